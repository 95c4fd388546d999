"""LARS, the restarted cosine schedule and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, DimensionError, NonFiniteGradientError
from ..numerics import Tensor


@dataclass(frozen=True)
class LarsConfig:
    """LARS hyper-parameters.

    Parameters whose name contains any ``exclude`` pattern (biases and
    normalisation affine terms by default) skip both weight decay and the
    trust ratio, i.e. they get plain momentum SGD.
    """

    base_lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust: float = 1e-3
    exclude: tuple[str, ...] = ("bias", "norm")

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractError(f"base_lr must be positive, got {self.base_lr}")
        if self.trust <= 0:
            raise ContractError(f"trust coefficient must be positive, got {self.trust}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")

    def excluded(self, name: str) -> bool:
        return any(p in name for p in self.exclude)


def local_learning_rate(w: np.ndarray, g: np.ndarray, cfg: LarsConfig) -> float:
    """``trust·‖w‖ / (‖g‖ + β‖w‖)``, or 1 when either norm is zero."""
    wn = float(np.linalg.norm(w))
    gn = float(np.linalg.norm(g))
    if wn == 0.0 or gn == 0.0:
        return 1.0
    return cfg.trust * wn / (gn + cfg.weight_decay * wn)


def lars_step(params: dict, grads: dict, cfg: LarsConfig, lr_t: float, velocity: dict | None = None):
    """One LARS update on plain arrays.

    Returns ``(new_params, new_velocity)``; inputs are not modified. The
    velocity update is ``v ← m·v + lr_t·λ·(g + β·w)`` followed by ``w ← w − v``
    with ``λ`` the local learning rate (1 and ``β = 0`` for excluded names).
    Raises :class:`NonFiniteGradientError` before touching anything if any
    gradient holds NaN or Inf.
    """
    if lr_t < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr_t}")
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(sorted(bad))
    velocity = velocity or {}
    new_params, new_velocity = {}, {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = w
            if name in velocity:
                new_velocity[name] = velocity[name]
            continue
        if g.shape != w.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        if cfg.excluded(name):
            step = g
            local = 1.0
        else:
            step = g + cfg.weight_decay * w
            local = local_learning_rate(w, g, cfg)
        v = cfg.momentum * velocity.get(name, 0.0) + (lr_t * local) * step
        new_velocity[name] = np.asarray(v, dtype=w.dtype)
        new_params[name] = (w - v).astype(w.dtype)
    return new_params, new_velocity


class Lars:
    """Stateful LARS over named Tensors, updated in place."""

    def __init__(self, named_params, cfg: LarsConfig):
        self.params = dict(named_params)
        self.cfg = cfg
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr_t: float) -> None:
        current = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        updated, self.velocity = lars_step(current, grads, self.cfg, lr_t, self.velocity)
        for n, p in self.params.items():
            p.data = updated[n]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass(frozen=True)
class ScheduleConfig:
    total_epochs: int
    restarts: int = 3
    min_lr: float = 0.0

    def __post_init__(self):
        if self.restarts < 1:
            raise ContractError(f"restart count must be at least 1, got {self.restarts}")
        if self.total_epochs < 0:
            raise ContractError("total_epochs must be non-negative")
        if self.min_lr < 0:
            raise ContractError("min_lr must be non-negative")

    @property
    def segment_length(self) -> float:
        return self.total_epochs / self.restarts


def cosine_restart_lr(epoch: float, cfg: ScheduleConfig, base_lr: float) -> float:
    """Half-wave cosine from ``base_lr`` down toward ``min_lr``, restarted ``cfg.restarts`` times.

    ``epoch`` may be fractional (per-step schedules). Segments have equal
    length ``total_epochs / restarts``.
    """
    if cfg.min_lr >= base_lr:
        raise ContractError(f"min_lr {cfg.min_lr} must be below base_lr {base_lr}")
    if not 0 <= epoch < cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    seg = cfg.segment_length
    t = epoch - math.floor(epoch / seg) * seg
    return cfg.min_lr + (base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t / seg)) / 2.0


@dataclass(frozen=True)
class EarlyStopConfig:
    patience: int = 5
    min_delta: float = 0.0

    def __post_init__(self):
        if self.patience < 1:
            raise ContractError("patience must be at least 1")
        if self.min_delta < 0:
            raise ContractError("min_delta must be non-negative")


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    best: int


def early_stop(history, patience: int, min_delta: float = 0.0) -> StopDecision:
    """Decide whether to stop after the last entry of ``history``.

    An epoch counts as an improvement when its loss is below the best so far
    by more than ``min_delta``. Training stops once ``patience`` epochs in a
    row brought no improvement; ``best`` is the index of the last improvement.
    """
    history = list(history)
    if not history:
        raise ContractError("early stopping needs at least one validation loss")
    best_i, best = 0, history[0]
    for i, v in enumerate(history[1:], start=1):
        if v < best - min_delta:
            best_i, best = i, v
    return StopDecision(stop=len(history) - 1 - best_i >= patience, best=best_i)


def is_finite_tensor(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))
