"""Experiment grids: variants × repetitions × folds.

A variant is one choice of (SSL protocol, object-centric pretext on/off,
scene-centric pretext pool none/real/all). Pretext stages do not depend on
the fold, so each distinct chain of pretext stages is trained once and its
checkpoint reused by every cell. Each cell then fine-tunes on k−1 folds,
stops early on the validation split, and is scored on the held-out fold and
on the test split. A repetition reshuffles the folds and re-initialises the
classifier head from its own derived seed.

Cells are committed atomically as JSON files under ``cells/``; a rerun skips
any cell whose file exists with status ``ok``.
"""

from __future__ import annotations

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..data import (
    SampleManifest,
    ToySceneSpec,
    compose_pretext,
    generate_toy_objects,
    generate_toy_scenes,
    load_images,
    make_folds,
)
from ..errors import ContractError, DataError, LineageError, StageAborted
from ..eval import evaluate
from ..fingerprint import fingerprint
from ..model import Checkpoint, load_checkpoint, save_checkpoint
from ..numerics import Rng
from ..records import RunRecord, write_records
from .config import ExperimentConfig
from .rundir import RunDirectory
from .stage import Stage, StageData, check_lineage, initial_checkpoint, run_stage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    protocol: str
    object_stage: bool
    scene: str  # none | real | all

    @property
    def name(self) -> str:
        return f"{self.protocol}.obj-{'on' if self.object_stage else 'off'}.scene-{self.scene}"

    @property
    def pretext_loss(self) -> str:
        return "cross_entropy" if self.protocol == "supervised" else self.protocol


@dataclass(frozen=True)
class Cell:
    variant: Variant
    repetition: int
    fold: int


class ExperimentGrid:
    """Cross product of the ``[grid]`` options, minus combinations that are not experiments.

    ``supervised`` only exists without scene-centric pretext (its object
    stage, when on, is supervised classification of the object pool). An SSL
    protocol needs at least one pretext stage.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        g = cfg["grid"]
        variants = []
        for protocol in g["protocols"]:
            for obj in g["object"]:
                for scene in g["scene"]:
                    on = obj == "on"
                    if protocol == "supervised" and scene != "none":
                        continue
                    if protocol != "supervised" and not on and scene == "none":
                        continue
                    variants.append(Variant(protocol, on, scene))
        if not variants:
            raise ContractError("the [grid] options leave no runnable variant")
        self.variants = variants
        self.k = g["folds"]
        self.repetitions = g["repetitions"]

    def cells(self) -> list[Cell]:
        return [Cell(v, r, f) for v in self.variants for r in range(self.repetitions) for f in range(self.k)]

    def __len__(self) -> int:
        return len(self.variants) * self.repetitions * self.k

    def pretext_stages(self, v: Variant) -> list[Stage]:
        stages = []
        if v.object_stage:
            stages.append(replace(self.cfg.stage("object", v.pretext_loss), data="objects"))
        if v.scene != "none":
            stages.append(replace(self.cfg.stage("pretext", v.pretext_loss), data=f"scenes.{v.scene}"))
        return [s for s in stages if s.epochs > 0]

    def downstream_stage(self) -> Stage:
        return replace(self.cfg.stage("finetune", "cross_entropy"), data="places8")


# -- datasets ----------------------------------------------------------------

@dataclass
class GridData:
    manifest: SampleManifest  # labelled scene set with train/val/test splits
    images: np.ndarray
    class_names: tuple[str, ...]
    pools: dict  # pretext key -> StageData

    def labels_of(self, idx) -> np.ndarray:
        pos = {n: i for i, n in enumerate(self.class_names)}
        return np.array([pos[self.manifest.rows[i].mapped_class] for i in idx], dtype=np.int64)

    def split_index(self, split: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.manifest.rows) if r.mapped and r.split == split], dtype=np.int64)


_DATA_CACHE: dict[str, GridData] = {}


def _data_fingerprint(cfg: ExperimentConfig) -> str:
    return fingerprint({"data": {k: v for k, v in cfg["data"].items()}, "seed": cfg.seed})


def build_data(cfg: ExperimentConfig, manifests_dir=None) -> GridData:
    key = _data_fingerprint(cfg)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    d = cfg["data"]
    seed = cfg.seed
    if d["source"] == "toy":
        spec = ToySceneSpec(classes=d["classes"], image_size=d["image_size"], per_class=d["per_class"], seed=seed,
                            test_fraction=d["test_fraction"], val_fraction=d["val_fraction"])
        scenes = generate_toy_scenes(spec)
        manifest, images, names = scenes.manifest, scenes.images, scenes.class_names
        synth = None
        if d["synthetic_per_class"] > 0:
            synth = generate_toy_scenes(replace(spec, per_class=d["synthetic_per_class"], source_tag="toy-render",
                                                synthetic=True, style="render", test_fraction=0, val_fraction=0))
        objects = generate_toy_objects(d["object_per_class"], d["image_size"], seed) if d["object_per_class"] else None
    else:
        manifest = SampleManifest.read(d["manifest"])
        size = (d["image_size"], d["image_size"])
        images, kept, skipped = load_images([r.uri for r in manifest.rows], size, d["image_root"] or None)
        if skipped:
            manifest = manifest.with_rows([manifest.rows[i] for i in kept])
        names = tuple(manifest.classes())
        if len(names) != d["classes"]:
            raise DataError(f"manifest has {len(names)} classes, [data] classes = {d['classes']}")
        synth = objects = None
        for attr, path in (("synth", d["synthetic_manifest"]), ("objects", d["object_manifest"])):
            if path:
                m = SampleManifest.read(path)
                imgs, kept, _ = load_images([r.uri for r in m.rows], size, d["image_root"] or None)
                m = m.with_rows([m.rows[i] for i in kept])
                holder = _Loaded(m, imgs, tuple(m.classes()))
                if attr == "synth":
                    synth = holder
                else:
                    objects = holder

    train_idx = np.array([i for i, r in enumerate(manifest.rows) if r.mapped and r.split == "train"], dtype=np.int64)
    real_manifest = SampleManifest("scenes.real", [manifest.rows[i] for i in train_idx])
    pools = {"scenes.real": StageData(images[train_idx])}
    pool_sources = {"scenes.real": compose_pretext([real_manifest], "real")}
    if synth is not None:
        composed = compose_pretext([real_manifest, synth.manifest], "all")
        pools["scenes.all"] = StageData(np.concatenate([images[train_idx], synth.images]))
        pool_sources["scenes.all"] = composed
    if objects is not None:
        pos = {n: i for i, n in enumerate(objects.class_names)}
        labels = np.array([pos[r.mapped_class] for r in objects.manifest.rows], dtype=np.int64)
        pools["objects"] = StageData(objects.images, labels, num_classes=len(pos))
        pool_sources["objects"] = objects.manifest
    if manifests_dir is not None:
        manifests_dir = Path(manifests_dir)
        manifest.write(manifests_dir / "places8.tsv")
        for key, m in pool_sources.items():
            m.write(manifests_dir / f"{key}.tsv")
    data = GridData(manifest, images, tuple(names), pools)
    _DATA_CACHE[key] = data
    return data


@dataclass
class _Loaded:
    manifest: SampleManifest
    images: np.ndarray
    class_names: tuple[str, ...]


# -- pretext chains --------------------------------------------------------

def _stage_key(prev: str, stage: Stage, seed: int, model_fp: str, data_fp: str) -> str:
    return fingerprint({"prev": prev, "stage": repr(stage), "seed": seed, "model": model_fp, "data": data_fp})


def pretext_checkpoint(grid: ExperimentGrid, v: Variant, data: GridData, run: RunDirectory) -> Checkpoint:
    """Train (or load from cache) every pretext stage of ``v``; returns the last checkpoint."""
    cfg = grid.cfg
    model_cfg = cfg.model_config()
    seed = cfg.seed
    data_fp = _data_fingerprint(cfg)
    ckpt = initial_checkpoint(model_cfg, seed, data.class_names)
    ckpt.extra["experiment"] = cfg.fingerprint
    key = fingerprint({"init": model_cfg.fingerprint, "seed": seed})
    for stage in grid.pretext_stages(v):
        key = _stage_key(key, stage, seed, model_cfg.fingerprint, data_fp)
        path = run.checkpoint_path(f"pretext-{key}")
        if path.exists():
            ckpt = load_checkpoint(path, expected=model_cfg)
            continue
        if stage.data not in data.pools:
            raise DataError(f"no image pool {stage.data!r} for variant {v.name}; check the [data] section")
        rng = Rng(seed).child("pretext", key)
        result = run_stage(stage, ckpt, data.pools[stage.data], rng, run.metrics_path(f"pretext-{key}", stage.tag))
        ckpt = result.checkpoint
        save_checkpoint(ckpt, path)
    return ckpt


# -- cells -----------------------------------------------------------------

def cell_fingerprint(cfg: ExperimentConfig, cell: Cell) -> str:
    return fingerprint({"config": cfg.fingerprint, "variant": cell.variant.name, "repetition": cell.repetition,
                        "fold": cell.fold})


def _nan_record(cfg, cell, status, message) -> RunRecord:
    nan = float("nan")
    return RunRecord(cell.variant.name, cell.repetition, cell.fold, cfg.seed, nan, nan, nan, nan, 0, status,
                     cfg.fingerprint, cell_fingerprint(cfg, cell), "", message)


def run_cell(grid: ExperimentGrid, cell: Cell, data: GridData, run: RunDirectory) -> RunRecord:
    cfg = grid.cfg
    v = cell.variant
    start = pretext_checkpoint(grid, v, data, run)
    check_lineage(start, [s.tag for s in grid.pretext_stages(v)])
    plan = make_folds(data.manifest, grid.k, grid.repetitions, Rng(cfg.seed).child("folds"))
    train_idx, held_idx = plan.split(cell.repetition, cell.fold)
    val_idx = data.split_index("val")
    test_idx = data.split_index("test")
    stage = grid.downstream_stage()
    sd = StageData(data.images[train_idx], data.labels_of(train_idx),
                   data.images[val_idx] if len(val_idx) else None,
                   data.labels_of(val_idx) if len(val_idx) else None, num_classes=len(data.class_names))
    rng = Rng(cfg.seed).child("cell", v.name, cell.repetition, cell.fold)
    metrics_path = run.metrics_path(v.name, f"rep{cell.repetition}-fold{cell.fold}")
    result = run_stage(stage, start, sd, rng, metrics_path, class_names=data.class_names)
    ckpt = result.checkpoint
    check_lineage(ckpt, [s.tag for s in grid.pretext_stages(v)] + ["downstream"])
    save_checkpoint(ckpt, run.checkpoint_path(f"{v.name}.rep{cell.repetition}.fold{cell.fold}"))
    model = ckpt.build_model()
    names = data.class_names
    rows = data.manifest.rows
    held = evaluate(model, data.images[held_idx], [rows[i].mapped_class for i in held_idx], names,
                    [rows[i].uri for i in held_idx])
    if len(test_idx):
        test = evaluate(model, data.images[test_idx], [rows[i].mapped_class for i in test_idx], names,
                        [rows[i].uri for i in test_idx])
        tb, ta = test.balanced_accuracy, test.accuracy
    else:
        tb = ta = float("nan")
    return RunRecord(v.name, cell.repetition, cell.fold, cfg.seed, held.balanced_accuracy, held.accuracy, tb, ta,
                     len(result.metrics), "ok", cfg.fingerprint, cell_fingerprint(cfg, cell),
                     json.dumps(held.confusion.counts.tolist(), separators=(",", ":")), "")


def _execute(cfg_text: str, source: str, run_root: str, cell_args: tuple) -> RunRecord:
    cfg = ExperimentConfig.loads(cfg_text, source)
    grid = ExperimentGrid(cfg)
    run = RunDirectory(run_root)
    protocol, obj, scene, rep, fold = cell_args
    cell = Cell(Variant(protocol, obj, scene), rep, fold)
    try:
        data = build_data(cfg)
        record = run_cell(grid, cell, data, run)
    except (LineageError, StageAborted, DataError, ContractError, ArithmeticError) as exc:
        log.error("cell %s rep %d fold %d failed: %s", cell.variant.name, rep, fold, exc)
        record = _nan_record(cfg, cell, "failed", f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # keep the grid going; the traceback goes to the log
        log.error("cell %s rep %d fold %d crashed:\n%s", cell.variant.name, rep, fold, traceback.format_exc())
        record = _nan_record(cfg, cell, "failed", f"{type(exc).__name__}: {exc}")
    run.commit_cell(record)
    return record


@dataclass
class GridResult:
    records: list[RunRecord]
    skipped: int
    run: RunDirectory

    @property
    def failed(self) -> list[RunRecord]:
        return [r for r in self.records if not r.ok]


def run_grid(cfg: ExperimentConfig, run_root, workers: int = 1, resume: bool = True) -> GridResult:
    """Run every cell of the grid, reusing committed cells when ``resume`` is set.

    Writes ``reports/runs.tsv`` (one RunRecord per cell) and
    ``reports/summary.tsv`` (mean ± sample standard deviation per variant).
    """
    grid = ExperimentGrid(cfg)
    run = RunDirectory(run_root)
    run.init(cfg)
    data = build_data(cfg, run.path("manifests"))
    done = run.committed_cells() if resume else {}
    todo = [c for c in grid.cells() if cell_fingerprint(cfg, c) not in done]
    skipped = len(grid) - len(todo)
    if skipped:
        log.info("resuming: %d of %d cells already complete", skipped, len(grid))
    # pretext chains first, in this process, so workers only ever read them
    seen = set()
    failed_chain = {}
    for c in todo:
        if c.variant in seen:
            continue
        seen.add(c.variant)
        try:
            pretext_checkpoint(grid, c.variant, data, run)
        except (StageAborted, DataError, ContractError, ArithmeticError) as exc:
            failed_chain[c.variant] = f"{type(exc).__name__}: {exc}"
            log.error("pretext for %s failed: %s", c.variant.name, exc)
    records = dict(done)
    runnable = []
    for c in todo:
        if c.variant in failed_chain:
            rec = _nan_record(cfg, c, "failed", failed_chain[c.variant])
            run.commit_cell(rec)
            records[rec.cell] = rec
        else:
            runnable.append(c)
    cfg_text = cfg.dumps()
    args = [(cfg_text, cfg.source, str(run.root), (c.variant.protocol, c.variant.object_stage, c.variant.scene,
                                                    c.repetition, c.fold)) for c in runnable]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_execute, *zip(*args)))
    else:
        results = [_execute(*a) for a in args]
    for rec in results:
        records[rec.cell] = rec
    wanted = {cell_fingerprint(cfg, c) for c in grid.cells()}
    final = [r for k, r in records.items() if k in wanted]
    write_records(final, run.path("reports", "runs.tsv"))
    run.write_text(("reports", "summary.tsv"), summary_table(final))
    run.write_index(cfg.fingerprint)
    return GridResult(sorted(final, key=lambda r: r.key), skipped, run)


def format_pm(values, digits: int = 2) -> str:
    """``$mean \\pm std$`` with the sample (n−1) standard deviation."""
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=np.float64)
    if len(v) == 0:
        return "nan"
    sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
    return f"${v.mean():.{digits}f} \\pm {sd:.{digits}f}$"


def summary_table(records, metrics=("balanced_acc", "accuracy", "test_balanced_acc", "test_accuracy")) -> str:
    variants = sorted({r.variant for r in records})
    lines = ["variant\tn_ok\tn_failed\t" + "\t".join(metrics)]
    for v in variants:
        rs = [r for r in records if r.variant == v]
        ok = [r for r in rs if r.ok]
        cells = [format_pm([r.metric(m) for r in ok]) for m in metrics]
        lines.append(f"{v}\t{len(ok)}\t{len(rs) - len(ok)}\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
