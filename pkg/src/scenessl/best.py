"""Bayesian two-group comparison with a robust Student-t model.

Model, for groups k = 1, 2 with pooled mean ``M`` and pooled standard
deviation ``S`` of both samples together::

    mu_k      ~ Normal(M, 1000·S)
    sigma_k   ~ Uniform(S/1000, 1000·S)
    nu - 1    ~ Exponential(mean 29)
    y_ki      ~ StudentT(nu, mu_k, sigma_k)

The sampler is random-walk Metropolis-within-Gibbs. ``mu`` moves on the raw
scale, ``sigma`` and ``nu`` on the log scale (the Jacobian term is added to
the target). Step sizes adapt during warm-up toward about 44% acceptance and
stay fixed afterwards. Each chain draws from its own ``Rng`` child stream, so
chain ``c`` is the same whatever the number of chains.
"""

from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import ContractError, DataError
from .numerics import Rng

PARAMS = ("mu1", "mu2", "sigma1", "sigma2", "nu")
_LOG_SCALE = (False, False, True, True, True)


@dataclass(frozen=True)
class BestPriors:
    mu_mean: float
    mu_sd: float
    sigma_low: float
    sigma_high: float
    nu_mean: float = 29.0

    @classmethod
    def from_data(cls, y1, y2, mu_sd_factor: float = 1000.0, sigma_factor: float = 1000.0,
                  nu_mean: float = 29.0) -> "BestPriors":
        pooled = np.concatenate([np.asarray(y1, float), np.asarray(y2, float)])
        s = float(np.std(pooled, ddof=1))
        if not s > 0:
            raise ContractError("the pooled sample has zero spread; the priors are undefined")
        return cls(float(np.mean(pooled)), mu_sd_factor * s, s / sigma_factor, sigma_factor * s, nu_mean)


def _check_groups(y1, y2):
    y1, y2 = np.asarray(y1, dtype=np.float64), np.asarray(y2, dtype=np.float64)
    for name, y in (("group1", y1), ("group2", y2)):
        if y.ndim != 1 or len(y) < 2:
            raise ContractError(f"{name} needs at least 2 values, got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ContractError(f"{name} contains non-finite values")
    return y1, y2


def _t_loglik(y, mu, sigma, nu):
    """Sum of Student-t log densities; ``mu``, ``sigma``, ``nu`` broadcast over a leading chain axis."""
    z = (y[None, :] - mu[:, None]) / sigma[:, None]
    n = y.shape[0]
    const = gammaln((nu + 1) / 2) - gammaln(nu / 2) - 0.5 * np.log(nu * np.pi) - np.log(sigma)
    return n * const - (nu + 1) / 2 * np.sum(np.log1p(z * z / nu[:, None]), axis=1)


def _log_prior(theta: np.ndarray, pr: BestPriors) -> np.ndarray:
    """theta: (chains, 5) on the natural scale."""
    mu, sig, nu = theta[:, :2], theta[:, 2:4], theta[:, 4]
    lp = np.sum(-0.5 * ((mu - pr.mu_mean) / pr.mu_sd) ** 2 - math.log(pr.mu_sd * math.sqrt(2 * math.pi)), axis=1)
    inside = np.all((sig >= pr.sigma_low) & (sig <= pr.sigma_high), axis=1) & (nu > 1)
    lp = lp - 2 * math.log(pr.sigma_high - pr.sigma_low)
    lam = 1.0 / (pr.nu_mean)
    lp = lp + math.log(lam) - lam * (nu - 1)
    return np.where(inside, lp, -np.inf)


def _log_post_batch(theta, y1, y2, pr):
    lp = _log_prior(theta, pr)
    ok = np.isfinite(lp)
    out = np.full(theta.shape[0], -np.inf)
    if np.any(ok):
        t = theta[ok]
        out[ok] = lp[ok] + _t_loglik(y1, t[:, 0], t[:, 2], t[:, 4]) + _t_loglik(y2, t[:, 1], t[:, 3], t[:, 4])
    return out


def log_posterior(params, y1, y2, priors: BestPriors | None = None) -> float:
    """Unnormalised log posterior at ``params`` = (mu1, mu2, sigma1, sigma2, nu) or a dict of those names.

    Returns ``-inf`` outside the prior support.
    """
    y1, y2 = _check_groups(y1, y2)
    pr = priors or BestPriors.from_data(y1, y2)
    if isinstance(params, dict):
        params = [params[k] for k in PARAMS]
    theta = np.asarray(params, dtype=np.float64).reshape(1, 5)
    return float(_log_post_batch(theta, y1, y2, pr)[0])


# -- diagnostics ------------------------------------------------------------

def split_rhat(draws: np.ndarray) -> float:
    """Split potential scale reduction for draws of shape (chains, n)."""
    c, n = draws.shape
    half = n // 2
    parts = np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)
    m, k = parts.shape
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean()
    b = k * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (k - 1) / k * w + b / k
    return float(math.sqrt(var_plus / w))


def effective_sample_size(draws: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence on autocorrelations."""
    c, n = draws.shape
    if n < 4:
        return float(c * n)
    x = draws - draws.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n] / n
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    b_over_n = draws.mean(axis=1).var(ddof=1) if c > 1 else 0.0
    var_plus = (n - 1) / n * w + b_over_n
    if var_plus <= 0:
        return float(c * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total, prev = 0.0, math.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
    tau = -1.0 + 2.0 * total
    return float(c * n / max(tau, 1.0 / math.log10(c * n)))


def hdi(draws, mass: float = 0.95) -> tuple[float, float]:
    """Narrowest interval holding ``mass`` of the draws."""
    x = np.sort(np.asarray(draws, dtype=np.float64).ravel())
    n = len(x)
    if n == 0 or not 0 < mass <= 1:
        raise ContractError("hdi needs draws and 0 < mass <= 1")
    k = max(1, int(math.ceil(mass * n)))
    if k >= n:
        return float(x[0]), float(x[-1])
    widths = x[k - 1:] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


# -- sampler ----------------------------------------------------------------

@dataclass
class PosteriorSummary:
    draws: dict[str, np.ndarray]  # each (chains, draws), natural scale
    diff_mean: float
    diff_hdi: tuple[float, float]
    p_direction: float
    effect_size_mean: float
    effect_size_hdi: tuple[float, float]
    acceptance: dict[str, float]
    rhat: dict[str, float]
    ess: dict[str, float]
    converged: bool
    basis: str = "pooled"
    n: tuple[int, int] = (0, 0)
    fixed: dict = field(default_factory=dict)

    @property
    def diff(self) -> np.ndarray:
        return (self.draws["mu1"] - self.draws["mu2"]).ravel()

    @property
    def effect_size(self) -> np.ndarray:
        s1, s2 = self.draws["sigma1"].ravel(), self.draws["sigma2"].ravel()
        return self.diff / np.sqrt((s1**2 + s2**2) / 2)

    @property
    def rhat_max(self) -> float:
        return max(self.rhat.values()) if self.rhat else 1.0

    @property
    def ess_min(self) -> float:
        return min(self.ess.values()) if self.ess else float("inf")


def sample_posterior(y1, y2, chains: int = 4, draws: int = 5000, warmup: int = 2000, seed: int = 0,
                     fixed: dict | None = None, priors: BestPriors | None = None,
                     target_accept: float = 0.44, rhat_threshold: float = 1.05) -> PosteriorSummary:
    """Draw from the posterior; ``fixed`` pins any of sigma1/sigma2/nu/mu1/mu2 to a value."""
    y1, y2 = _check_groups(y1, y2)
    if chains < 2 or draws < 10 or warmup < 0:
        raise ContractError("need chains >= 2, draws >= 10, warmup >= 0")
    pr = priors or BestPriors.from_data(y1, y2)
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(PARAMS)
    if unknown:
        raise ContractError(f"cannot fix unknown parameters {sorted(unknown)}")
    free = [i for i, p in enumerate(PARAMS) if p not in fixed]
    total = warmup + draws

    root = Rng(seed).child("best")
    streams = [root.child("chain", c) for c in range(chains)]
    noise = np.stack([s.normal(size=(total, 5)) for s in streams])  # (chains, total, 5)
    logu = np.log(np.stack([s.uniform(size=(total, 5)) for s in streams]))
    init_noise = np.stack([s.normal(size=5) for s in streams])

    theta = np.empty((chains, 5))
    sd1, sd2 = np.std(y1, ddof=1) or pr.sigma_low * 10, np.std(y2, ddof=1) or pr.sigma_low * 10
    theta[:, 0] = y1.mean() + init_noise[:, 0] * sd1 / math.sqrt(len(y1))
    theta[:, 1] = y2.mean() + init_noise[:, 1] * sd2 / math.sqrt(len(y2))
    theta[:, 2] = np.clip(sd1 * np.exp(0.2 * init_noise[:, 2]), pr.sigma_low * 1.01, pr.sigma_high * 0.99)
    theta[:, 3] = np.clip(sd2 * np.exp(0.2 * init_noise[:, 3]), pr.sigma_low * 1.01, pr.sigma_high * 0.99)
    theta[:, 4] = 1.0 + 29.0 * np.exp(0.3 * init_noise[:, 4])
    for name, value in fixed.items():
        theta[:, PARAMS.index(name)] = value

    # initial step sizes (log-scale params use multiplicative steps)
    step = np.empty((chains, 5))
    step[:, 0] = 2.4 * sd1 / math.sqrt(len(y1))
    step[:, 1] = 2.4 * sd2 / math.sqrt(len(y2))
    step[:, 2:4] = 0.3
    step[:, 4] = 0.8

    def jac(th):
        # log|d theta / d u| for u = log(theta) on log-scale params
        return np.sum(np.log(th[:, [i for i in free if _LOG_SCALE[i]]]), axis=1) if any(_LOG_SCALE[i] for i in free) else 0.0

    cur = _log_post_batch(theta, y1, y2, pr)
    if not np.all(np.isfinite(cur)):
        raise ContractError("starting point lies outside the prior support; check the fixed values")
    cur = cur + jac(theta)
    out = np.empty((chains, draws, 5))
    accepted = np.zeros((chains, 5))
    window_acc = np.zeros((chains, 5))
    window = 50
    for it in range(total):
        for i in free:
            prop = theta.copy()
            if _LOG_SCALE[i]:
                prop[:, i] = theta[:, i] * np.exp(step[:, i] * noise[:, it, i])
            else:
                prop[:, i] = theta[:, i] + step[:, i] * noise[:, it, i]
            new = _log_post_batch(prop, y1, y2, pr)
            new = np.where(np.isfinite(new), new + jac(np.where(np.isfinite(new)[:, None], prop, theta)), -np.inf)
            take = logu[:, it, i] < new - cur
            theta = np.where(take[:, None], prop, theta)
            cur = np.where(take, new, cur)
            if it < warmup:
                window_acc[:, i] += take
            else:
                accepted[:, i] += take
        if it < warmup and (it + 1) % window == 0:
            rate = window_acc / window
            step *= np.exp(np.clip(rate - target_accept, -0.5, 0.5) * 2.0)
            window_acc[:] = 0
        if it >= warmup:
            out[:, it - warmup] = theta

    chains_draws = {p: out[:, :, j] for j, p in enumerate(PARAMS)}
    rhat, ess, acc = {}, {}, {}
    for j, p in enumerate(PARAMS):
        if p in fixed:
            continue
        rhat[p] = split_rhat(chains_draws[p])
        ess[p] = effective_sample_size(chains_draws[p])
        acc[p] = float(accepted[:, j].sum() / (chains * draws))
    diff_draws = chains_draws["mu1"] - chains_draws["mu2"]
    rhat["diff"] = split_rhat(diff_draws)
    ess["diff"] = effective_sample_size(diff_draws)
    summary = PosteriorSummary(chains_draws, 0.0, (0.0, 0.0), 0.0, 0.0, (0.0, 0.0), acc, rhat, ess,
                               converged=max(rhat.values()) <= rhat_threshold, n=(len(y1), len(y2)), fixed=fixed)
    d = summary.diff
    summary.diff_mean = float(d.mean())
    summary.diff_hdi = hdi(d)
    summary.p_direction = float(np.mean(d > 0))
    es = summary.effect_size
    summary.effect_size_mean = float(es.mean())
    summary.effect_size_hdi = hdi(es)
    return summary


# -- comparing grid variants ------------------------------------------------

BASES = ("pooled", "fold-mean")
_VERDICT = re.compile(r"^(?P<a>.+) vs (?P<b>.+): Δ = (?P<delta>[-+]?\d+(?:\.\d+)?) pp, P\(Δ>0\) = (?P<p>\d(?:\.\d+)?)$")


def format_verdict(a: str, b: str, summary: PosteriorSummary) -> str:
    return f"{a} vs {b}: Δ = {summary.diff_mean * 100:+.2f} pp, P(Δ>0) = {summary.p_direction:.3f}"


def parse_verdict(line: str) -> dict:
    m = _VERDICT.match(line.strip())
    if not m:
        raise ValueError(f"not a verdict line: {line!r}")
    return {"a": m["a"], "b": m["b"], "delta_pp": float(m["delta"]), "p_direction": float(m["p"])}


def metric_vectors(records, a: str, b: str, metric: str = "balanced_acc", basis: str = "pooled"):
    """Aligned metric vectors of variants ``a`` and ``b``.

    Both variants must cover the same (repetition, fold) cells, every cell
    having a successful record. ``basis="fold-mean"`` averages the
    repetitions of each fold first.
    """
    if basis not in BASES:
        raise ContractError(f"basis must be one of {BASES}")
    by_variant = defaultdict(dict)
    for r in records:
        if r.ok:
            by_variant[r.variant][(r.repetition, r.fold)] = r.metric(metric)
    available = sorted({r.variant for r in records})
    for v in (a, b):
        if v not in available:
            raise DataError(f"variant {v!r} not in results; available: {', '.join(available)}")
    cells = sorted({(r.repetition, r.fold) for r in records if r.variant in (a, b)})
    missing = [f"{v} rep={rep} fold={fold}" for v in (a, b) for rep, fold in cells if (rep, fold) not in by_variant[v]]
    if missing:
        raise DataError("incomplete results, missing cells: " + "; ".join(missing))
    va = np.array([by_variant[a][c] for c in cells])
    vb = np.array([by_variant[b][c] for c in cells])
    if basis == "fold-mean":
        folds = sorted({f for _, f in cells})
        va = np.array([np.mean([by_variant[a][c] for c in cells if c[1] == f]) for f in folds])
        vb = np.array([np.mean([by_variant[b][c] for c in cells if c[1] == f]) for f in folds])
    return va, vb


@dataclass
class Comparison:
    a: str
    b: str
    metric: str
    summary: PosteriorSummary
    verdict: str

    def row(self) -> list[str]:
        s = self.summary
        return [f"{self.a} vs {self.b}", self.metric, s.basis, str(s.n[0]), f"{s.diff_mean:.6f}",
                f"{s.diff_hdi[0]:.6f}", f"{s.diff_hdi[1]:.6f}", f"{s.p_direction:.4f}",
                f"{s.effect_size_mean:.4f}", f"{s.rhat_max:.4f}", f"{s.ess_min:.1f}",
                "yes" if s.converged else "NO", self.verdict]


REPORT_COLUMNS = ("pair", "metric", "basis", "n", "delta_mean", "hdi_low", "hdi_high", "p_direction",
                  "effect_size", "rhat_max", "ess_min", "converged", "verdict")


def compare_variants(records, a: str, b: str, metric: str = "balanced_acc", basis: str = "pooled",
                     seed: int = 0, **sampler) -> Comparison:
    va, vb = metric_vectors(records, a, b, metric, basis)
    summary = sample_posterior(va, vb, seed=seed, **sampler)
    summary.basis = basis
    return Comparison(a, b, metric, summary, format_verdict(a, b, summary))


def comparison_report(comparisons) -> str:
    lines = ["\t".join(REPORT_COLUMNS)]
    lines += ["\t".join(c.row()) for c in comparisons]
    return "\n".join(lines) + "\n"


def posterior_grid_mean_difference(y1, y2, sigma1, sigma2, nu, priors: BestPriors | None = None,
                                   points: int = 2001, width: float = 8.0) -> float:
    """Posterior mean of mu1 - mu2 by brute-force grid integration with sigma and nu held fixed.

    With those fixed the two means are independent a posteriori, so each is
    integrated on its own 1-D grid of ``points`` nodes spanning ``width``
    standard errors around the sample mean.
    """
    y1, y2 = _check_groups(y1, y2)
    pr = priors or BestPriors.from_data(y1, y2)

    def mean_of(y, sigma):
        se = sigma / math.sqrt(len(y))
        grid = np.linspace(y.mean() - width * se, y.mean() + width * se, points)
        lp = -0.5 * ((grid - pr.mu_mean) / pr.mu_sd) ** 2
        lp = lp + _t_loglik(y, grid, np.full_like(grid, sigma), np.full_like(grid, nu))
        w = np.exp(lp - lp.max())
        return float(np.sum(w * grid) / np.sum(w))

    return mean_of(y1, sigma1) - mean_of(y2, sigma2)
