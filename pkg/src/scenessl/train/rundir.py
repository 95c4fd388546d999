"""Run directory layout.

::

    <root>/
      MANIFEST            index: path, bytes, sha256, config fingerprint
      config/             resolved config (experiment.ini) and its fingerprint
      checkpoints/        pretext-<key>.ckpt, <variant>.rep<r>.fold<f>.ckpt
      metrics/            per-stage epoch streams (TSV)
      reports/            runs.tsv, summary.tsv, comparison reports
      manifests/          sample manifests the run trained and evaluated on
      cells/              one committed RunRecord (JSON) per finished cell
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from ..errors import ConfigError
from ..records import RunRecord

SUBDIRS = ("config", "checkpoints", "metrics", "reports", "manifests", "cells")


def _atomic_write(path: Path, data: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


class RunDirectory:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def init(self, cfg) -> None:
        """Create the layout; refuse to mix runs of two different configs."""
        for d in SUBDIRS:
            self.path(d).mkdir(parents=True, exist_ok=True)
        fp_file = self.path("config", "fingerprint")
        if fp_file.exists() and fp_file.read_text().strip() != cfg.fingerprint:
            raise ConfigError(f"{self.root} holds a run of config {fp_file.read_text().strip()}, "
                              f"this config is {cfg.fingerprint}; use a fresh run directory")
        _atomic_write(self.path("config", "experiment.ini"), cfg.dumps().encode("utf-8"))
        _atomic_write(fp_file, (cfg.fingerprint + "\n").encode("utf-8"))

    def checkpoint_path(self, name: str) -> Path:
        p = self.path("checkpoints", f"{name}.ckpt")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def metrics_path(self, group: str, name: str) -> Path:
        return self.path("metrics", group, f"{name}.tsv")

    def write_text(self, parts, text: str) -> Path:
        return _atomic_write(self.path(*parts), text.encode("utf-8"))

    def commit_cell(self, record: RunRecord) -> Path:
        return _atomic_write(self.path("cells", f"{record.cell}.json"), (record.to_json() + "\n").encode("utf-8"))

    def committed_cells(self) -> dict[str, RunRecord]:
        out = {}
        cells = self.path("cells")
        if not cells.is_dir():
            return out
        for f in sorted(cells.glob("*.json")):
            rec = RunRecord.from_json(f.read_text(encoding="utf-8"))
            if rec.ok:
                out[rec.cell] = rec
        return out

    def artifacts(self) -> list[Path]:
        return sorted(p for p in self.root.rglob("*") if p.is_file() and p.name != "MANIFEST"
                      and not p.name.endswith(".tmp"))

    def write_index(self, config_fingerprint: str) -> Path:
        lines = ["path\tbytes\tsha256\tconfig_fingerprint"]
        for p in self.artifacts():
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"{p.relative_to(self.root).as_posix()}\t{p.stat().st_size}\t{digest}\t{config_fingerprint}")
        return _atomic_write(self.path("MANIFEST"), ("\n".join(lines) + "\n").encode("utf-8"))
