"""Self-supervised objectives and the supervised cross-entropy baseline.

All contrastive inputs are view-major: for ``V`` views of ``B`` images the
rows are ``[view1(0..B-1), view2(0..B-1), ...]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import Tensor, as_tensor, l2_normalize, log_softmax, logsumexp, matmul, standardize

# Added to masked logits; exp() of it underflows to exactly zero.
_MASK = -1e9


@dataclass
class ContrastiveBatch:
    embeddings: Tensor
    labels: np.ndarray | None = None
    temperature: float = 0.1
    n_views: int = 2

    def __post_init__(self):
        self.embeddings = as_tensor(self.embeddings)
        if self.embeddings.ndim != 2:
            raise DimensionError(f"embeddings must be (rows, dim), got {self.embeddings.shape}")
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        rows = self.embeddings.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.ndim != 1 or len(self.labels) == 0 or rows % len(self.labels):
                raise ContractError(f"{rows} rows are not a whole number of views of {len(self.labels)} labels")
            self.n_views = rows // len(self.labels)
        if self.n_views < 1 or rows % self.n_views:
            raise ContractError(f"{rows} rows cannot be split into {self.n_views} views")

    @property
    def batch_size(self) -> int:
        return self.embeddings.shape[0] // self.n_views

    def row_labels(self) -> np.ndarray:
        """Per-row identity used to find positives (class labels, or image index)."""
        base = self.labels if self.labels is not None else np.arange(self.batch_size)
        return np.tile(base, self.n_views)


def _similarity_logits(z: Tensor, temperature: float) -> Tensor:
    z = l2_normalize(z, axis=1)
    logits = matmul(z, z.T) * (1.0 / temperature)
    mask = np.zeros(logits.shape, dtype=logits.dtype)
    np.fill_diagonal(mask, _MASK)
    return logits + mask


def nt_xent(batch: ContrastiveBatch) -> Tensor:
    """Normalised-temperature cross entropy over two views, averaged over all 2B anchors."""
    if batch.n_views != 2:
        raise ContractError(f"nt_xent needs exactly 2 views, got {batch.n_views}")
    b = batch.batch_size
    if b < 2:
        raise ContractError("nt_xent needs at least 2 images per view (no negatives otherwise)")
    logits = _similarity_logits(batch.embeddings, batch.temperature)
    positive = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    pos_logit = logits[np.arange(2 * b), positive]
    return (logsumexp(logits, axis=1) - pos_logit).mean()


def supcon(batch: ContrastiveBatch, diagnostics: dict | None = None) -> Tensor:
    """Supervised contrastive loss, mean over anchors that have at least one positive.

    For anchor ``i`` with positives ``P(i)`` (same label, other row) and
    candidates ``A(i)`` (all other rows)::

        ℓ_i = −1/|P(i)| Σ_{p∈P(i)} log softmax_{a∈A(i)}(z_i·z_a / τ)[p]

    Anchors with empty ``P(i)`` are skipped; their count is written to
    ``diagnostics["excluded_anchors"]`` when a dict is supplied.
    """
    if batch.labels is None:
        raise ContractError("supcon needs labels")
    ids = batch.row_labels()
    n = len(ids)
    positives = (ids[:, None] == ids[None, :]) & ~np.eye(n, dtype=bool)
    counts = positives.sum(axis=1)
    keep = counts > 0
    if diagnostics is not None:
        diagnostics["excluded_anchors"] = int((~keep).sum())
    if not keep.any():
        raise ContractError("supcon: no anchor has a positive")
    logp = log_softmax(_similarity_logits(batch.embeddings, batch.temperature), axis=1)
    weights = np.where(positives, 1.0 / np.maximum(counts, 1)[:, None], 0.0)[keep]
    per_anchor = -(logp[np.flatnonzero(keep)] * weights.astype(logp.dtype)).sum(axis=1)
    return per_anchor.mean()


@dataclass(frozen=True)
class BarlowConfig:
    off_diagonal_weight: float = 5e-3
    eps: float = 1e-12

    def __post_init__(self):
        if not self.off_diagonal_weight > 0:
            raise ContractError("off_diagonal_weight must be positive")


def cross_correlation(view_a: Tensor, view_b: Tensor, eps: float = 1e-12) -> Tensor:
    """Batch cross-correlation ``(1/B) Z_Aᵀ Z_B`` of per-dimension standardised views."""
    view_a, view_b = as_tensor(view_a), as_tensor(view_b)
    if view_a.shape != view_b.shape or view_a.ndim != 2:
        raise DimensionError(f"views must share a (B, d) shape, got {view_a.shape} and {view_b.shape}")
    if view_a.shape[0] < 2:
        raise ContractError("barlow_twins needs a batch of at least 2")
    za = standardize(view_a, axes=0, eps=eps, floor=True)
    zb = standardize(view_b, axes=0, eps=eps, floor=True)
    return matmul(za.T, zb) * (1.0 / view_a.shape[0])


def barlow_twins(view_a: Tensor, view_b: Tensor, cfg: BarlowConfig = BarlowConfig()) -> Tensor:
    """``Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²``."""
    c = cross_correlation(view_a, view_b, cfg.eps)
    d = c.shape[0]
    eye = np.eye(d, dtype=c.dtype)
    on = ((c - eye) * eye) ** 2
    off = (c * (1.0 - eye)) ** 2
    return on.sum() + off.sum() * cfg.off_diagonal_weight


def sinkhorn_codes(scores, epsilon: float = 0.05, iters: int = 3) -> np.ndarray:
    """Soft assignment of B samples to K prototypes with equal prototype usage.

    Starting from ``exp(scores / ε)`` the plan alternates row normalisation
    (each sample sums to 1) and column normalisation (each prototype sums to
    B/K); ``iters`` counts column/row pairs and the last step is a row
    normalisation, so rows sum to exactly 1. Each row is shifted by its
    maximum before exponentiating; the first row normalisation cancels the
    shift exactly. Computed in float64 and never differentiated.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if s.ndim != 2:
        raise DimensionError(f"scores must be (B, K), got {s.shape}")
    if iters < 1 or not epsilon > 0:
        raise ContractError("sinkhorn needs iters >= 1 and epsilon > 0")
    s = s.astype(np.float64)
    b, k = s.shape
    q = np.exp((s - s.max(axis=1, keepdims=True)) / epsilon)
    q /= q.sum(axis=1, keepdims=True)
    for _ in range(iters):
        q *= (b / k) / q.sum(axis=0, keepdims=True)
        q /= q.sum(axis=1, keepdims=True)
    return q


@dataclass
class SwavState:
    prototypes: Tensor
    epsilon: float = 0.05
    iters: int = 3
    temperature: float = 0.1

    def __post_init__(self):
        self.prototypes = as_tensor(self.prototypes)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 2:
            raise ContractError(f"need at least 2 prototypes, got shape {self.prototypes.shape}")
        norms = np.linalg.norm(self.prototypes.data, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-4):
            raise ContractError("prototype rows must have unit norm")

    def renormalize(self) -> None:
        p = self.prototypes.data
        self.prototypes.data = (p / np.linalg.norm(p, axis=1, keepdims=True)).astype(p.dtype)


def swav_loss(view_a: Tensor, view_b: Tensor, state: SwavState, codes: tuple | None = None) -> Tensor:
    """Swapped prediction: Sinkhorn codes of one view supervise the other's prototype softmax.

    ``codes`` lets a caller freeze the (q_a, q_b) pair, e.g. for gradient checks.
    """
    view_a, view_b = as_tensor(view_a), as_tensor(view_b)
    if view_a.shape != view_b.shape:
        raise DimensionError(f"views differ in shape: {view_a.shape} vs {view_b.shape}")
    if view_a.shape[1] != state.prototypes.shape[1]:
        raise DimensionError(f"embedding dim {view_a.shape[1]} != prototype dim {state.prototypes.shape[1]}")
    protos_t = state.prototypes.T
    scores_a = matmul(l2_normalize(view_a, axis=1), protos_t)
    scores_b = matmul(l2_normalize(view_b, axis=1), protos_t)
    if codes is None:
        codes = (sinkhorn_codes(scores_a.data, state.epsilon, state.iters),
                 sinkhorn_codes(scores_b.data, state.epsilon, state.iters))
    q_a, q_b = (np.asarray(c, dtype=scores_a.dtype) for c in codes)
    logp_a = log_softmax(scores_a * (1.0 / state.temperature), axis=1)
    logp_b = log_softmax(scores_b * (1.0 / state.temperature), axis=1)
    b = view_a.shape[0]
    return ((logp_a * q_b).sum() + (logp_b * q_a).sum()) * (-0.5 / b)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and targets {targets.shape} do not align")
    bad = np.flatnonzero((targets < 0) | (targets >= logits.shape[1]))
    if bad.size:
        raise ContractError(f"target {int(targets[bad[0]])} at row {int(bad[0])} outside [0, {logits.shape[1]})")
    logp = log_softmax(logits, axis=1)
    return -logp[np.arange(len(targets)), targets.astype(np.int64)].mean()


LOSS_KINDS = ("nt_xent", "supcon", "barlow_twins", "swav", "cross_entropy")
