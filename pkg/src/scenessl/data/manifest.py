"""Sample manifests: the engine's only view of a dataset.

On disk a manifest is UTF-8 text. Header lines start with ``#`` and hold
``key<TAB>value`` pairs (``dataset``, ``seed``, ``table``, ``checksum``, plus
any extra keys, in file order); the last header line names the columns.
Each following line is one row::

    uri  original_category  mapped_class  split  source_tag  synthetic

``mapped_class`` is ``-`` for unmapped rows, ``split`` one of
``train``/``val``/``test``/``none`` and ``synthetic`` ``0`` or ``1``. The
``checksum`` header is the sha256 of the row lines and is verified on read.
Writing a manifest that was read from disk reproduces the file byte for byte.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import DataError
from ..fingerprint import sha256_bytes
from .remap import RemapTable

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "none")
COLUMNS = ("uri", "original_category", "mapped_class", "split", "source_tag", "synthetic")
UNMAPPED = "-"


@dataclass(frozen=True)
class ManifestRow:
    uri: str
    original_category: str
    mapped_class: str | None = None
    split: str = "none"
    source_tag: str = ""
    synthetic: bool = False

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"{self.uri}: unknown split {self.split!r}")
        for name in ("uri", "original_category", "source_tag"):
            value = getattr(self, name)
            if "\t" in value or "\n" in value:
                raise DataError(f"{name} may not contain tabs or newlines: {value!r}")

    @property
    def mapped(self) -> bool:
        return self.mapped_class is not None

    def to_line(self) -> str:
        return "\t".join([self.uri, self.original_category, self.mapped_class or UNMAPPED, self.split,
                          self.source_tag, "1" if self.synthetic else "0"])

    @classmethod
    def from_line(cls, line: str, lineno: int = 0) -> "ManifestRow":
        parts = line.split("\t")
        if len(parts) != len(COLUMNS):
            raise DataError(f"manifest line {lineno}: expected {len(COLUMNS)} columns, got {len(parts)}")
        uri, orig, mapped, split, source, synth = parts
        if synth not in ("0", "1"):
            raise DataError(f"manifest line {lineno}: synthetic flag must be 0 or 1, got {synth!r}")
        return cls(uri, orig, None if mapped == UNMAPPED else mapped, split, source, synth == "1")


@dataclass
class SampleManifest:
    name: str
    rows: list[ManifestRow] = field(default_factory=list)
    header: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for row in self.rows:
            if row.uri in seen:
                raise DataError(f"{row.uri} appears twice (splits {seen[row.uri]} and {row.split})")
            seen[row.uri] = row.split

    def with_rows(self, rows, **header) -> "SampleManifest":
        h = dict(self.header)
        h.update({k: str(v) for k, v in header.items()})
        return SampleManifest(self.name, list(rows), h)

    def mapped_rows(self) -> list[ManifestRow]:
        return [r for r in self.rows if r.mapped]

    def split_rows(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.mapped and r.split == split]

    def classes(self) -> list[str]:
        return sorted({r.mapped_class for r in self.rows if r.mapped})

    def class_counts(self, split: str | None = None) -> Counter:
        return Counter(r.mapped_class for r in self.rows if r.mapped and (split is None or r.split == split))

    def unmapped_count(self) -> int:
        return sum(1 for r in self.rows if not r.mapped)

    # -- serialisation ---------------------------------------------------
    def body(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.rows)

    def checksum(self) -> str:
        return sha256_bytes(self.body().encode("utf-8"))

    def dumps(self) -> str:
        header = {"dataset": self.name}
        header.update({k: v for k, v in self.header.items() if k not in ("dataset", "checksum")})
        header["checksum"] = self.checksum()
        lines = [f"# {k}\t{v}\n" for k, v in header.items()]
        lines.append("#" + "\t".join(COLUMNS) + "\n")
        return "".join(lines) + self.body()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.dumps().encode("utf-8"))
        tmp.replace(path)
        return path

    @classmethod
    def loads(cls, text: str) -> "SampleManifest":
        header: dict[str, str] = {}
        rows = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if line.startswith("# "):
                key, _, value = line[2:].partition("\t")
                header[key] = value
            elif line.startswith("#"):
                if tuple(line[1:].split("\t")) != COLUMNS:
                    raise DataError(f"manifest line {lineno}: unexpected column header")
            elif line:
                rows.append(ManifestRow.from_line(line, lineno))
        name = header.pop("dataset", "unnamed")
        manifest = cls(name, rows, header)
        stored = header.get("checksum")
        if stored is not None and stored != manifest.checksum():
            raise DataError(f"manifest {name!r}: checksum mismatch, file was modified")
        return manifest

    @classmethod
    def read(cls, path) -> "SampleManifest":
        return cls.loads(Path(path).read_bytes().decode("utf-8"))


def remap_manifest(m: SampleManifest, table: RemapTable) -> SampleManifest:
    """Map every row's original category through ``table``.

    Rows outside the table become unmapped with split ``none``; mapped rows
    keep their split, which makes the operation idempotent.
    """
    rows = []
    for row in m.rows:
        target = table.lookup(row.original_category)
        if target is None:
            rows.append(replace(row, mapped_class=None, split="none"))
        else:
            rows.append(replace(row, mapped_class=target))
    out = m.with_rows(rows, table=table.fingerprint)
    counts = out.class_counts()
    if not counts:
        raise DataError(f"no category of {m.name!r} matched the remap table; wrong dataset?")
    log.info("remapped %s: %s; %d unmapped", m.name, dict(sorted(counts.items())), out.unmapped_count())
    return out
