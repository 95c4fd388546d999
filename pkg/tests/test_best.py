import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from scenessl.best import (
    BestPriors,
    compare_variants,
    comparison_report,
    effective_sample_size,
    format_verdict,
    hdi,
    log_posterior,
    metric_vectors,
    parse_verdict,
    sample_posterior,
    split_rhat,
)
from scenessl.errors import ContractError, DataError
from scenessl.numerics import Rng
from scenessl.records import RunRecord

Y1 = np.array([0.71, 0.69, 0.74, 0.70, 0.73, 0.68, 0.72, 0.75])
Y2 = np.array([0.66, 0.70, 0.65, 0.69, 0.67, 0.64, 0.68])


def scipy_log_posterior(params, y1, y2):
    """Same model written against scipy.stats, up to the shared constant."""
    mu1, mu2, s1, s2, nu = params
    pr = BestPriors.from_data(y1, y2)
    if not (pr.sigma_low <= s1 <= pr.sigma_high and pr.sigma_low <= s2 <= pr.sigma_high and nu > 1):
        return -math.inf
    lp = stats.norm.logpdf(mu1, pr.mu_mean, pr.mu_sd) + stats.norm.logpdf(mu2, pr.mu_mean, pr.mu_sd)
    lp += 2 * stats.uniform.logpdf(s1, pr.sigma_low, pr.sigma_high - pr.sigma_low)
    lp += stats.expon.logpdf(nu - 1, scale=pr.nu_mean)
    lp += stats.t.logpdf(y1, nu, mu1, s1).sum() + stats.t.logpdf(y2, nu, mu2, s2).sum()
    return lp


def test_priors_from_data():
    pr = BestPriors.from_data([1.0, 3.0], [2.0, 2.0])
    s = np.std([1, 3, 2, 2], ddof=1)
    assert pr.mu_mean == 2.0 and pr.mu_sd == pytest.approx(1000 * s)
    assert pr.sigma_low == pytest.approx(s / 1000) and pr.sigma_high == pytest.approx(1000 * s)
    with pytest.raises(ContractError):
        BestPriors.from_data([1.0, 1.0], [1.0, 1.0])


def test_log_posterior_matches_scipy_up_to_a_constant():
    pts = [(0.7, 0.67, 0.02, 0.03, 5.0), (0.72, 0.66, 0.05, 0.01, 40.0), (0.6, 0.8, 0.1, 0.1, 1.5)]
    diffs = [log_posterior(p, Y1, Y2) - scipy_log_posterior(p, Y1, Y2) for p in pts]
    assert max(diffs) - min(diffs) < 1e-9


def test_support_boundary():
    pr = BestPriors.from_data(Y1, Y2)
    assert math.isfinite(log_posterior((0.7, 0.7, pr.sigma_low * 1.001, 0.02, 1.001), Y1, Y2))
    assert log_posterior((0.7, 0.7, pr.sigma_low * 0.999, 0.02, 10), Y1, Y2) == -math.inf
    assert log_posterior((0.7, 0.7, 0.02, pr.sigma_high * 1.001, 10), Y1, Y2) == -math.inf
    assert log_posterior((0.7, 0.7, 0.02, 0.02, 0.999), Y1, Y2) == -math.inf
    assert log_posterior((0.7, 0.7, 0.02, 0.02, 1.0), Y1, Y2) == -math.inf  # nu - 1 > 0


def test_log_posterior_symmetric_under_swap():
    p = (0.7, 0.66, 0.02, 0.03, 7.0)
    assert log_posterior(p, Y1, Y2) == pytest.approx(log_posterior((0.66, 0.7, 0.03, 0.02, 7.0), Y2, Y1), abs=1e-9)


def test_input_contracts():
    with pytest.raises(ContractError):
        sample_posterior([1.0], [1.0, 2.0])
    with pytest.raises(ContractError):
        sample_posterior([1.0, np.nan], [1.0, 2.0])
    with pytest.raises(ContractError):
        sample_posterior(Y1, Y2, fixed={"tau": 1})


def test_hdi_values():
    lo, hi = hdi(np.arange(101.0), 0.5)
    assert hi - lo == 50
    draws = Rng(0).normal(size=200_000)
    lo, hi = hdi(draws, 0.95)
    assert lo == pytest.approx(-1.96, abs=0.03) and hi == pytest.approx(1.96, abs=0.03)
    # skewed: the HDI is narrower than the equal-tailed interval
    e = Rng(1).exponential(1.0, 100_000)
    lo, hi = hdi(e, 0.9)
    assert lo < 0.01 and hi - lo < np.quantile(e, 0.95) - np.quantile(e, 0.05)


@given(st.integers(0, 1000))
@settings(max_examples=15)
def test_hdi_nesting(seed):
    d = Rng(seed).normal(size=500)
    lo1, hi1 = hdi(d, 0.5)
    lo2, hi2 = hdi(d, 0.9)
    assert lo2 <= lo1 <= hi1 <= hi2


def test_rhat_and_ess_on_known_chains():
    iid = Rng(0).normal(size=(4, 2000))
    assert split_rhat(iid) < 1.01
    assert effective_sample_size(iid) > 4000
    shifted = iid + np.array([[0], [0], [0], [3]])
    assert split_rhat(shifted) > 1.5
    ar = np.zeros((4, 4000))
    z = Rng(1).normal(size=(4, 4000))
    for t in range(1, 4000):
        ar[:, t] = 0.9 * ar[:, t - 1] + z[:, t]
    # AR(1) with phi = 0.9: ESS ≈ n (1 - phi) / (1 + phi)
    assert effective_sample_size(ar) == pytest.approx(16000 * 0.1 / 1.9, rel=0.3)


def test_identical_groups_are_undecided():
    y = 0.7 + 0.02 * Rng(5).normal(size=15)
    s = sample_posterior(y, y.copy(), draws=3000, warmup=1500, seed=1)
    assert 0.45 <= s.p_direction <= 0.55
    assert s.diff_hdi[0] < 0 < s.diff_hdi[1]
    assert s.converged and s.rhat_max < 1.05 and s.ess_min > 400


def test_shift_is_detected():
    rng = Rng(11)
    y1 = 0.75 + 0.02 * rng.normal(size=15)
    y2 = 0.70 + 0.02 * rng.normal(size=15)
    s = sample_posterior(y1, y2, draws=3000, warmup=1500, seed=2)
    assert 0.035 <= s.diff_mean <= 0.065 and s.p_direction > 0.95
    assert s.effect_size_mean > 1
    for name, rate in s.acceptance.items():
        assert 0.15 < rate < 0.75, name


def test_chains_are_seed_deterministic():
    a = sample_posterior(Y1, Y2, chains=2, draws=200, warmup=100, seed=9)
    b = sample_posterior(Y1, Y2, chains=2, draws=200, warmup=100, seed=9)
    c = sample_posterior(Y1, Y2, chains=3, draws=200, warmup=100, seed=9)
    assert np.array_equal(a.draws["mu1"], b.draws["mu1"])
    assert np.array_equal(a.draws["mu1"], c.draws["mu1"][:2])


def test_fixed_parameters_stay_fixed():
    s = sample_posterior(Y1, Y2, chains=2, draws=100, warmup=50, fixed={"nu": 4.0, "sigma1": 0.02})
    assert np.all(s.draws["nu"] == 4.0) and np.all(s.draws["sigma1"] == 0.02)


def test_swapping_groups_negates_the_difference():
    a = sample_posterior(Y1, Y2, draws=2000, warmup=1000, seed=3)
    b = sample_posterior(Y2, Y1, draws=2000, warmup=1000, seed=3)
    assert a.diff_mean == pytest.approx(-b.diff_mean, abs=3e-3)
    assert a.p_direction == pytest.approx(1 - b.p_direction, abs=0.02)


def test_location_equivariance():
    a = sample_posterior(Y1, Y2, draws=2000, warmup=1000, seed=4)
    b = sample_posterior(Y1 + 10, Y2 + 10, draws=2000, warmup=1000, seed=4)
    assert a.diff_mean == pytest.approx(b.diff_mean, abs=3e-3)


def test_verdict_round_trip():
    s = sample_posterior(Y1, Y2, chains=2, draws=200, warmup=100)
    line = format_verdict("real", "none", s)
    v = parse_verdict(line)
    assert v["a"] == "real" and v["b"] == "none"
    assert v["delta_pp"] == pytest.approx(s.diff_mean * 100, abs=0.005)
    assert v["p_direction"] == pytest.approx(s.p_direction, abs=5e-4)
    with pytest.raises(ValueError):
        parse_verdict("real beats none")


def _records(variants, folds=3, reps=1, skip=()):
    out = []
    for v, base in variants.items():
        for r in range(reps):
            for f in range(folds):
                if (v, r, f) in skip:
                    continue
                acc = base + 0.01 * f + 0.001 * r
                out.append(RunRecord(v, r, f, 0, acc, acc, acc, acc, 3, "ok", "fp", f"{v}.rep{r}.fold{f}"))
    return out


def test_metric_vectors_alignment_and_bases():
    recs = _records({"a": 0.7, "b": 0.6}, folds=3, reps=2)
    va, vb = metric_vectors(recs, "a", "b")
    assert len(va) == 6 and np.allclose(va - vb, 0.1)
    fa, _ = metric_vectors(recs, "a", "b", basis="fold-mean")
    assert np.allclose(fa, [0.7005, 0.7105, 0.7205])


def test_missing_variant_and_cells():
    recs = _records({"a": 0.7, "b": 0.6})
    with pytest.raises(DataError, match="available: a, b"):
        metric_vectors(recs, "a", "zzz")
    with pytest.raises(DataError, match="b rep=0 fold=1"):
        metric_vectors(_records({"a": 0.7, "b": 0.6}, skip={("b", 0, 1)}), "a", "b")


def test_compare_variants_report():
    recs = _records({"a": 0.75, "b": 0.65}, folds=5)
    cmp = compare_variants(recs, "a", "b", draws=500, warmup=300)
    assert cmp.verdict.startswith("a vs b: Δ = +")
    report = comparison_report([cmp]).splitlines()
    assert report[0].split("\t")[0] == "pair" and len(report[1].split("\t")) == len(report[0].split("\t"))
