"""Single training stages and their chaining into a plan.

A stage trains the current model on one image pool with one objective and
returns a new checkpoint whose lineage gains the stage's tag. Pretext stages
draw two augmented views per image; the downstream stage fine-tunes the whole
network with cross-entropy on single lightly augmented views, keeping the
weights of the epoch with the lowest validation loss.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..augment import AugmentPolicy, view_batch
from ..errors import ContractError, LineageError, NonFiniteGradientError, NumericInstabilityError, StageAborted
from ..losses import BarlowConfig, ContrastiveBatch, SwavState, barlow_twins, cross_entropy, nt_xent, supcon, swav_loss
from ..model import STAGE_TAGS, Checkpoint, Linear, ModelConfig, SceneModel
from ..numerics import Rng, Tensor, backward, no_grad, slice_
from .optim import EarlyStopConfig, Lars, LarsConfig, ScheduleConfig, cosine_restart_lr, early_stop

log = logging.getLogger(__name__)

PRETEXT_LOSSES = ("nt_xent", "supcon", "barlow_twins", "swav")
LABELLED_LOSSES = ("supcon", "cross_entropy")
MAX_BAD_STEPS = 3


@dataclass(frozen=True)
class LossParams:
    temperature: float = 0.1
    off_diagonal_weight: float = 5e-3
    swav_epsilon: float = 0.05
    swav_iters: int = 3


@dataclass(frozen=True)
class Stage:
    tag: str
    loss: str
    epochs: int
    batch_size: int
    data: str
    optimizer: LarsConfig = LarsConfig()
    schedule: ScheduleConfig | None = None
    early_stopping: EarlyStopConfig | None = None
    loss_params: LossParams = LossParams()

    def __post_init__(self):
        if self.tag not in STAGE_TAGS:
            raise ContractError(f"unknown stage tag {self.tag!r}; expected one of {STAGE_TAGS}")
        if self.loss not in PRETEXT_LOSSES + ("cross_entropy",):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ContractError("epochs must be >= 0 and batch_size >= 2")
        if self.schedule is None:
            object.__setattr__(self, "schedule", ScheduleConfig(total_epochs=self.epochs))
        elif self.schedule.total_epochs != self.epochs:
            raise ContractError(f"schedule covers {self.schedule.total_epochs} epochs, stage runs {self.epochs}")

    @property
    def needs_labels(self) -> bool:
        return self.loss in LABELLED_LOSSES


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ContractError("a plan needs at least one stage")
        last = stages[-1]
        if last.tag != "downstream" or last.loss != "cross_entropy":
            raise ContractError("the last stage must be the downstream stage with cross_entropy")
        order = [STAGE_TAGS.index(s.tag) for s in stages]
        if order != sorted(set(order)):
            raise ContractError(f"stage tags must follow {STAGE_TAGS} without repeats, got {[s.tag for s in stages]}")
        for s in stages[:-1]:
            if s.loss == "cross_entropy" and s.tag != "pretext-object":
                raise ContractError("only the object stage may pre-train with cross_entropy")

    @property
    def tags(self) -> list[str]:
        return [s.tag for s in self.stages]


@dataclass
class StageData:
    """In-memory images for one stage; labels are integer class ids."""

    images: np.ndarray
    labels: np.ndarray | None = None
    val_images: np.ndarray | None = None
    val_labels: np.ndarray | None = None
    num_classes: int | None = None
    policy: AugmentPolicy | None = None

    def __post_init__(self):
        if len(self.images) < 2:
            raise ContractError("a stage needs at least two images")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ContractError("labels and images differ in length")
        if self.labels is not None and self.num_classes is None:
            self.num_classes = int(np.max(self.labels)) + 1


@dataclass
class StageResult:
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


METRIC_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_accuracy", "steps", "wall_time")


def write_metrics(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, METRIC_COLUMNS, delimiter="\t", lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in METRIC_COLUMNS})
    tmp.replace(path)


def initial_checkpoint(cfg: ModelConfig, seed: int, class_names=()) -> Checkpoint:
    model = SceneModel(cfg, Rng(seed).child("init"))
    return Checkpoint.from_model(model, lineage=[], seed=seed, class_names=list(class_names))


def _default_policy(stage: Stage, size) -> AugmentPolicy:
    return AugmentPolicy.finetune(size) if stage.loss == "cross_entropy" else AugmentPolicy(output_size=size)


def _batches(n: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """Shuffled batches; the ragged tail is dropped unless it is the only batch."""
    perm = rng.permutation(n)
    bs = min(batch_size, n)
    return [perm[i:i + bs] for i in range(0, n - bs + 1, bs)]


class _Objective:
    """Loss computation for one stage, bound to a model."""

    def __init__(self, stage: Stage, model: SceneModel, data: StageData, rng: Rng):
        self.stage, self.model = stage, model
        p = stage.loss_params
        self.head = None
        if stage.loss == "cross_entropy" and stage.tag != "downstream":
            # temporary head for supervised pre-training; only the encoder carries over
            self.head = Linear(model.cfg.encoder.embedding_dim, data.num_classes, rng.child("pretext-head"))
        if stage.loss == "swav":
            if model.prototypes is None:
                raise ContractError("swav needs a model built with prototypes > 0")
            self.swav = SwavState(model.prototypes, p.swav_epsilon, p.swav_iters, p.temperature)
        self.barlow = BarlowConfig(off_diagonal_weight=p.off_diagonal_weight)

    def parameters(self):
        named = list(self.model.named_parameters())
        if self.stage.loss != "swav":
            named = [(n, t) for n, t in named if n != "prototypes"]
        if self.stage.loss == "cross_entropy":
            named = [(n, t) for n, t in named if not n.startswith("projector.")]
            if self.head is not None:
                named = [(n, t) for n, t in named if not n.startswith("classifier.")]
                named += [("pretext_head." + n, t) for n, t in self.head.named_parameters()]
        else:
            named = [(n, t) for n, t in named if not n.startswith("classifier.")]
        return named

    def logits(self, x: Tensor) -> Tensor:
        h = self.model.encode(x)
        return (self.head if self.head is not None else self.model.classifier)(h)

    def loss(self, views: np.ndarray, labels: np.ndarray | None) -> Tensor:
        s = self.stage
        if s.loss == "cross_entropy":
            return cross_entropy(self.logits(Tensor(views)), labels)
        z = self.model.project(self.model.encode(Tensor(views)))
        b = len(views) // 2
        t = s.loss_params.temperature
        if s.loss == "nt_xent":
            return nt_xent(ContrastiveBatch(z, temperature=t))
        if s.loss == "supcon":
            return supcon(ContrastiveBatch(z, labels=labels, temperature=t))
        za, zb = slice_(z, slice(0, b)), slice_(z, slice(b, 2 * b))
        if s.loss == "barlow_twins":
            return barlow_twins(za, zb, self.barlow)
        return swav_loss(za, zb, self.swav)

    def after_step(self) -> None:
        if self.stage.loss == "swav":
            self.model.normalize_prototypes()


def _validation(obj: _Objective, data: StageData, policy: AugmentPolicy, rng: Rng, batch_size: int):
    """(mean validation loss, accuracy or None) with augmentation-free inputs."""
    if data.val_images is None or len(data.val_images) == 0:
        return None, None
    stage, model = obj.stage, obj.model
    model.eval()
    total, n, correct = 0.0, 0, 0
    with no_grad():
        for i in range(0, len(data.val_images), batch_size):
            x = data.val_images[i:i + batch_size]
            y = None if data.val_labels is None else data.val_labels[i:i + batch_size]
            if stage.loss == "cross_entropy":
                logits = obj.logits(Tensor(x))
                total += float(cross_entropy(logits, y).item()) * len(x)
                correct += int(np.sum(logits.data.argmax(1) == y))
                n += len(x)
            elif len(x) >= 2:
                views = view_batch(x, policy, rng.child("val", i), 2)
                total += float(obj.loss(views, None if y is None else y).item()) * len(x)
                n += len(x)
    model.train()
    if n == 0:
        return None, None
    return total / n, (correct / n if stage.loss == "cross_entropy" else None)


def run_stage(stage: Stage, checkpoint_in: Checkpoint, data: StageData, rng: Rng,
              metrics_path=None, class_names=None) -> StageResult:
    """Train one stage starting from ``checkpoint_in``.

    Deterministic for a given ``rng``. A 0-epoch stage returns the input
    checkpoint untouched. Three consecutive non-finite steps raise
    :class:`StageAborted` carrying the last good checkpoint.
    """
    if stage.epochs == 0:
        return StageResult(checkpoint_in, [], None)
    if stage.needs_labels and data.labels is None:
        raise ContractError(f"loss {stage.loss!r} needs labelled data for stage {stage.tag}")
    model = checkpoint_in.build_model()
    if stage.tag == "downstream":
        if data.num_classes is not None and data.num_classes != model.cfg.num_classes:
            raise ContractError(f"model head has {model.cfg.num_classes} classes, data has {data.num_classes}")
        model.reset_classifier(rng.child("head"))
    policy = data.policy or _default_policy(stage, data.images.shape[2:])
    model.train()
    obj = _Objective(stage, model, data, rng)
    opt = Lars(obj.parameters(), stage.optimizer)
    base_lr = stage.optimizer.base_lr
    lineage = list(checkpoint_in.lineage) + [stage.tag]
    names = list(class_names) if class_names is not None else list(checkpoint_in.class_names)

    def snapshot(epoch):
        return Checkpoint.from_model(model, lineage=lineage, epoch=epoch, seed=checkpoint_in.seed,
                                     class_names=names, extra=dict(checkpoint_in.extra))

    last_good = checkpoint_in
    best_ckpt, best_epoch = None, None
    metrics, val_history = [], []
    bad_steps = 0
    t0 = time.perf_counter()
    for epoch in range(stage.epochs):
        erng = rng.child("epoch", epoch)
        batches = _batches(len(data.images), stage.batch_size, erng.child("order"))
        losses, lr = [], stage.optimizer.base_lr
        for step, idx in enumerate(batches):
            lr = cosine_restart_lr(epoch + step / len(batches), stage.schedule, base_lr)
            n_views = 1 if stage.loss == "cross_entropy" else 2
            views = view_batch(data.images[idx], policy, erng.child("views", step), n_views)
            labels = None if data.labels is None else data.labels[idx]
            opt.zero_grad()
            try:
                loss = obj.loss(views, labels)
                value = float(loss.item())
                if not np.isfinite(value):
                    raise NumericInstabilityError("loss")
                backward(loss)
                opt.step(lr)
            except (NumericInstabilityError, NonFiniteGradientError) as exc:
                bad_steps += 1
                log.warning("%s epoch %d step %d: %s", stage.tag, epoch, step, exc)
                if bad_steps >= MAX_BAD_STEPS:
                    if metrics_path is not None:
                        write_metrics(metrics, metrics_path)
                    raise StageAborted(f"{stage.tag}: {MAX_BAD_STEPS} consecutive non-finite steps at epoch {epoch}",
                                       checkpoint=last_good, metrics=metrics) from exc
                continue
            bad_steps = 0
            obj.after_step()
            losses.append(value)
        val_loss, val_acc = _validation(obj, data, policy, rng, stage.batch_size)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_loss": val_loss, "val_accuracy": val_acc, "steps": len(losses),
               "wall_time": round(time.perf_counter() - t0, 3)}
        metrics.append(row)
        log.info("%s epoch %d: loss %.4f val %s", stage.tag, epoch, row["train_loss"], val_loss)
        if metrics_path is not None:
            write_metrics(metrics, metrics_path)
        if losses:  # failed steps never touch parameters
            last_good = snapshot(epoch + 1)
        if stage.early_stopping is not None and val_loss is not None:
            val_history.append(val_loss)
            decision = early_stop(val_history, stage.early_stopping.patience, stage.early_stopping.min_delta)
            if decision.best == len(val_history) - 1:
                best_ckpt, best_epoch = last_good, epoch
            if decision.stop:
                log.info("%s: early stop at epoch %d, best %d", stage.tag, epoch, decision.best)
                break
    if best_ckpt is not None:
        return StageResult(best_ckpt, metrics, best_epoch)
    return StageResult(last_good, metrics, len(metrics) - 1)


def check_lineage(ckpt: Checkpoint, expected: list[str]) -> None:
    if list(ckpt.lineage) != list(expected):
        raise LineageError(f"checkpoint lineage {ckpt.lineage} does not match plan {expected}")


def run_plan(plan: StagePlan, start: Checkpoint, datasets: dict, rng: Rng, metrics_dir=None,
             class_names=None) -> tuple[Checkpoint, dict]:
    """Run every stage in order; ``datasets`` maps each stage's ``data`` key to a :class:`StageData`."""
    ckpt = start
    all_metrics = {}
    for stage in plan.stages:
        check_lineage(ckpt, list(start.lineage) + [s.tag for s in plan.stages[: plan.stages.index(stage)]
                                                     if s.epochs > 0])
        path = None if metrics_dir is None else Path(metrics_dir) / f"{stage.tag}.tsv"
        names = class_names if stage.tag == "downstream" else None
        result = run_stage(stage, ckpt, datasets[stage.data], rng.child(stage.tag), path, names)
        ckpt = result.checkpoint
        all_metrics[stage.tag] = result.metrics
    return ckpt, all_metrics
