"""Per-cell run records and their tab-separated table.

Floats are written with ``repr`` (shortest round-trip form), rows are sorted
by (variant, repetition, fold), so identical results give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import DataError

METRICS = ("balanced_acc", "accuracy", "test_balanced_acc", "test_accuracy")


@dataclass(frozen=True)
class RunRecord:
    variant: str
    repetition: int
    fold: int
    seed: int
    balanced_acc: float
    accuracy: float
    test_balanced_acc: float
    test_accuracy: float
    epochs: int
    status: str
    config_fingerprint: str
    cell: str
    confusion: str = ""  # JSON list of lists, held-out fold counts
    message: str = ""

    @property
    def key(self) -> tuple:
        return (self.variant, self.repetition, self.fold)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def metric(self, name: str) -> float:
        if name not in METRICS:
            raise KeyError(f"unknown metric {name!r}; choose from {METRICS}")
        return getattr(self, name)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


COLUMNS = tuple(f.name for f in fields(RunRecord))
_TYPES = {f.name: f.type for f in fields(RunRecord)}


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value).replace("\t", " ").replace("\n", " ")


def records_to_tsv(records) -> str:
    out = io.StringIO()
    out.write("\t".join(COLUMNS) + "\n")
    for r in sorted(records, key=lambda r: r.key):
        out.write("\t".join(_fmt(getattr(r, c)) for c in COLUMNS) + "\n")
    return out.getvalue()


def write_records(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(records_to_tsv(records).encode("utf-8"))
    tmp.replace(path)
    return path


def records_from_tsv(text: str) -> list[RunRecord]:
    reader = csv.reader(io.StringIO(text), delimiter="\t")
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("results table is empty") from None
    missing = [c for c in ("variant", "repetition", "fold") if c not in header]
    if missing:
        raise DataError(f"results table lacks columns {missing}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        d = dict(zip(header, row))
        kwargs = {}
        for name in COLUMNS:
            raw = d.get(name, "")
            kind = _TYPES[name]
            if kind in ("int", int):
                kwargs[name] = int(raw) if raw else 0
            elif kind in ("float", float):
                kwargs[name] = float(raw) if raw else float("nan")
            else:
                kwargs[name] = raw
        if not kwargs["status"]:
            kwargs["status"] = "ok"
        try:
            out.append(RunRecord(**kwargs))
        except TypeError as exc:
            raise DataError(f"results line {lineno}: {exc}") from exc
    return out


def read_records(path) -> list[RunRecord]:
    return records_from_tsv(Path(path).read_text(encoding="utf-8"))
