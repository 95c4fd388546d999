"""Pretext pool composition and the out-of-distribution evaluation manifest."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import replace
from fractions import Fraction

from ..errors import ContractError, DataError
from .manifest import ManifestRow, SampleManifest
from .remap import PLACES8_CLASSES
from .splits import largest_remainder

log = logging.getLogger(__name__)

# reporting order for pretext sources; unknown sources follow alphabetically
PRETEXT_SOURCE_ORDER = ("places", "interiornet", "hypersim", "openrooms")


def _source_rank(tag: str) -> tuple[int, str]:
    low = tag.lower()
    for i, name in enumerate(PRETEXT_SOURCE_ORDER):
        if low.startswith(name):
            return i, low
    return len(PRETEXT_SOURCE_ORDER), low


def source_report(m: SampleManifest) -> list[tuple[str, int, bool]]:
    """(source tag, row count, synthetic) per source."""
    counts = Counter(r.source_tag for r in m.rows)
    synthetic = {r.source_tag: r.synthetic for r in m.rows}
    return [(s, counts[s], synthetic[s]) for s in sorted(counts, key=_source_rank)]


def compose_pretext(manifests, mode: str, name: str | None = None) -> SampleManifest:
    """Union of source manifests for self-supervised pre-training.

    ``mode="real"`` keeps non-synthetic rows only, ``mode="all"`` keeps every
    row. All kept rows are tagged ``train``.
    """
    if mode not in ("real", "all"):
        raise ContractError(f"mode must be 'real' or 'all', got {mode!r}")
    rows = []
    for m in manifests:
        for r in m.rows:
            if not r.source_tag:
                raise DataError(f"{m.name!r}: row {r.uri} has no source tag")
            if mode == "real" and r.synthetic:
                continue
            rows.append(replace(r, split="train"))
    if not rows:
        raise DataError(f"pretext pool for mode={mode!r} is empty")
    out = SampleManifest(name or f"indoors.{mode}", rows, {"mode": mode})
    for source, count, synth in source_report(out):
        log.info("pretext %s: %s %d rows%s", mode, source, count, " (synthetic)" if synth else "")
    return out


OOD_SOURCES = ("google", "bing", "dollarstreet")


def make_ood_manifest(available: dict, ratio=(4, 3, 3), per_class: int = 10, classes=PLACES8_CLASSES,
                      sources=OOD_SOURCES, name: str = "ood-scenes") -> SampleManifest:
    """Assemble a validation-only manifest with a fixed per-class source mix.

    ``available[class][source]`` lists candidate uris; the first ``n`` of
    each list are taken, where ``n`` splits ``per_class`` by ``ratio``
    (largest remainder).
    """
    if len(ratio) != len(sources):
        raise ContractError(f"ratio {ratio} does not match sources {sources}")
    quota = largest_remainder(dict(zip(sources, map(int, ratio))), Fraction(per_class, sum(ratio)))
    rows = []
    for cls in classes:
        if cls not in available:
            raise DataError(f"no OOD images listed for class {cls!r}")
        for source in sources:
            uris = list(available[cls].get(source, ()))
            if len(uris) < quota[source]:
                raise DataError(f"class {cls!r}, source {source!r}: need {quota[source]} images, have {len(uris)}")
            rows += [ManifestRow(u, cls, cls, "val", source, False) for u in uris[: quota[source]]]
    return SampleManifest(name, rows, {"ratio": ":".join(str(r) for r in ratio), "per_class": str(per_class)})
