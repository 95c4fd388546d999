"""Experiment configuration files.

A config is an INI file (``configparser`` syntax, ``;``/``#`` comments).
Every key is optional; omitted keys take the defaults in :data:`SCHEMA`.
Unknown sections or keys and unparsable values are rejected with the line
number they appear on. The fingerprint covers the fully resolved values, so
two files that differ only in comments or key order hash the same.

Sections
--------
``[experiment]`` name, seed.
``[data]`` where scene images come from (``source = toy`` or ``manifest``)
and the sizes of the toy pools.
``[model]`` encoder and projection-head shape.
``[object]`` / ``[pretext]`` / ``[finetune]`` optimiser, schedule and loss
settings for the object-centric pretext, scene-centric pretext and
downstream stages.
``[grid]`` which variants to run and the fold layout.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from ..fingerprint import fingerprint
from ..model import EncoderConfig, ModelConfig, ProjectionConfig
from .optim import EarlyStopConfig, LarsConfig, ScheduleConfig
from .stage import LossParams, Stage

_STAGE_KEYS = {
    "epochs": ("int", 20),
    "batch_size": ("int", 64),
    "base_lr": ("float", 1.0),
    "momentum": ("float", 0.9),
    "weight_decay": ("float", 1e-6),
    "trust": ("float", 1e-3),
    "restarts": ("int", 3),
    "min_lr": ("float", 0.0),
    "temperature": ("float", 0.1),
    "off_diagonal_weight": ("float", 5e-3),
    "swav_epsilon": ("float", 0.05),
    "swav_iters": ("int", 3),
}

SCHEMA = {
    "experiment": {"name": ("str", "experiment"), "seed": ("int", 0)},
    "data": {
        "source": ("str", "toy"),
        "classes": ("int", 8),
        "per_class": ("int", 120),
        "image_size": ("int", 64),
        "test_fraction": ("float", 0.1),
        "val_fraction": ("float", 0.1),
        "synthetic_per_class": ("int", 60),
        "object_per_class": ("int", 60),
        "manifest": ("str", ""),
        "image_root": ("str", ""),
        "synthetic_manifest": ("str", ""),
        "object_manifest": ("str", ""),
    },
    "model": {
        "stage_widths": ("ints", (16, 32, 64)),
        "blocks_per_stage": ("ints", (2, 2, 2)),
        "embedding_dim": ("int", 64),
        "norm": ("str", "group"),
        "groups": ("int", 8),
        "hidden_dim": ("int", 128),
        "output_dim": ("int", 64),
        "projection_batch_norm": ("bool", True),
        "prototypes": ("int", 32),
    },
    "object": dict(_STAGE_KEYS, epochs=("int", 10)),
    "pretext": dict(_STAGE_KEYS),
    "finetune": dict(_STAGE_KEYS, epochs=("int", 30), base_lr=("float", 0.5), restarts=("int", 1),
                     patience=("int", 5), min_delta=("float", 0.0)),
    "grid": {
        "object": ("strs", ("off",)),
        "scene": ("strs", ("real",)),
        "protocols": ("strs", ("nt_xent",)),
        "folds": ("int", 5),
        "repetitions": ("int", 3),
        "basis": ("str", "pooled"),
    },
}

CHOICES = {
    ("data", "source"): ("toy", "manifest"),
    ("model", "norm"): ("group", "batch"),
    ("grid", "object"): ("off", "on"),
    ("grid", "scene"): ("none", "real", "all"),
    ("grid", "protocols"): ("nt_xent", "supcon", "barlow_twins", "swav", "supervised"),
    ("grid", "basis"): ("pooled", "fold-mean"),
}

_SECTION_RE = re.compile(r"^\s*\[(?P<name>[^\]]+)\]")
_KEY_RE = re.compile(r"^(?P<key>[^\s;#=:][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict:
    """(section, key) -> line number, plus (section, None) for headers."""
    where, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m["name"].strip()
            where.setdefault((section, None), lineno)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            where.setdefault((section, m["key"].strip().lower()), lineno)
    return where


def _parse_value(kind: str, raw: str):
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "ints":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if kind == "strs":
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # section -> key -> resolved value
    source: str = "<defaults>"

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls({s: {k: v for k, (_, v) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def loads(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        try:
            parser.read_string(text, source=source)
        except configparser.MissingSectionHeaderError as exc:
            raise ConfigError(f"{source}: key outside any section", exc.lineno) from exc
        except configparser.DuplicateSectionError as exc:
            raise ConfigError(f"{source}: duplicate section [{exc.section}]", exc.lineno) from exc
        except configparser.DuplicateOptionError as exc:
            raise ConfigError(f"{source}: duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from exc
        except configparser.ParsingError as exc:
            lineno = exc.errors[0][0] if exc.errors else None
            raise ConfigError(f"{source}: malformed line", lineno) from exc
        where = _line_index(text)
        values = cls.defaults().values
        values = {s: dict(v) for s, v in values.items()}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{section}]; expected one of {sorted(SCHEMA)}",
                                  where.get((section, None)))
            for key, raw in parser.items(section):
                line = where.get((section, key))
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]", line)
                kind = SCHEMA[section][key][0]
                try:
                    value = _parse_value(kind, raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}: [{section}] {key}: expected {kind}, got {raw!r}", line) from exc
                allowed = CHOICES.get((section, key))
                if allowed is not None:
                    items = value if isinstance(value, tuple) else (value,)
                    bad = [v for v in items if v not in allowed]
                    if bad:
                        raise ConfigError(f"{source}: [{section}] {key}: {bad} not in {allowed}", line)
                values[section][key] = value
        cfg = cls(values, source)
        try:
            cfg.validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        return cfg

    @classmethod
    def read(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text, str(path))

    def dumps(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (kind, _) in keys.items():
                v = self.values[section][key]
                if kind in ("ints", "strs"):
                    v = ", ".join(str(x) for x in v)
                elif kind == "bool":
                    v = "true" if v else "false"
                lines.append(f"{key} = {v}")
            lines.append("")
        return "\n".join(lines)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return int(self.values["experiment"]["seed"])

    @property
    def fingerprint(self) -> str:
        return fingerprint({s: {k: list(v) if isinstance(v, tuple) else v for k, v in keys.items()}
                            for s, keys in self.values.items()})

    def validate(self) -> None:
        self.model_config()
        for section in ("object", "pretext", "finetune"):
            self.stage(section, "nt_xent" if section != "finetune" else "cross_entropy")
        g = self.values["grid"]
        if g["folds"] < 2 or g["repetitions"] < 1:
            raise ValueError("[grid] needs folds >= 2 and repetitions >= 1")
        if not g["protocols"] or not g["object"] or not g["scene"]:
            raise ValueError("[grid] object, scene and protocols must be non-empty")
        d = self.values["data"]
        if d["source"] == "manifest" and not d["manifest"]:
            raise ValueError("[data] source = manifest needs a manifest path")

    def model_config(self) -> ModelConfig:
        m, d = self.values["model"], self.values["data"]
        enc = EncoderConfig(input_size=(d["image_size"], d["image_size"], 3), stage_widths=tuple(m["stage_widths"]),
                            blocks_per_stage=tuple(m["blocks_per_stage"]), embedding_dim=m["embedding_dim"],
                            norm=m["norm"], groups=m["groups"])
        proj = ProjectionConfig(hidden_dim=m["hidden_dim"], output_dim=m["output_dim"],
                                use_batch_norm=m["projection_batch_norm"])
        return ModelConfig(encoder=enc, projection=proj, num_classes=d["classes"], prototypes=m["prototypes"])

    def stage(self, section: str, loss: str) -> Stage:
        s = self.values[section]
        tag = {"object": "pretext-object", "pretext": "pretext-scene", "finetune": "downstream"}[section]
        lars = LarsConfig(base_lr=s["base_lr"], momentum=s["momentum"], weight_decay=s["weight_decay"],
                          trust=s["trust"])
        schedule = ScheduleConfig(total_epochs=s["epochs"], restarts=s["restarts"], min_lr=s["min_lr"])
        if s["epochs"] and s["min_lr"] >= s["base_lr"]:
            raise ValueError(f"[{section}] min_lr must be below base_lr")
        stop = EarlyStopConfig(s["patience"], s["min_delta"]) if section == "finetune" else None
        params = LossParams(s["temperature"], s["off_diagonal_weight"], s["swav_epsilon"], s["swav_iters"])
        return Stage(tag, loss, s["epochs"], s["batch_size"], section, lars, schedule, stop, params)
