import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_twosided
from prinstrat.data import Dataset, Design, MISSING_D
from prinstrat.inference import (
    BootstrapError, CIConfig, DegenerateWeightWarning, Pipeline, analytic_se, apply_bootstrap, bootstrap_ci,
    normal_ci, run_pipeline, stratified_resample,
)
from prinstrat.simulation import SimConfig, simulate, true_estimands


def test_equal_weights_give_two_sample_se():
    y1, y0 = np.array([1.0, 3.0]), np.array([2.0, 6.0])
    # 1/n convention: var(y1)/n1 + var(y0)/n0 with var = mean squared deviation
    want = math.sqrt(1.0 / 2 + 4.0 / 2)
    assert analytic_se(np.ones(2), y1, np.ones(2), y0) == pytest.approx(want, abs=1e-15)


def test_constant_outcomes_give_zero_se():
    assert analytic_se(np.array([0.2, 0.7]), np.full(2, 4.0), np.ones(3), np.full(3, 1.5)) == 0.0


def test_single_point_mass_is_flagged():
    with pytest.warns(DegenerateWeightWarning):
        se = analytic_se(np.array([1.0, 0.0, 0.0]), np.array([5.0, 1.0, 2.0]), np.ones(2), np.array([0.0, 2.0]))
    # treated arm contributes 0; control arm (0, 2) contributes 2 / 4
    assert se == pytest.approx(math.sqrt(0.5), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c1=st.floats(0.01, 100), c0=st.floats(0.01, 100))
def test_se_invariant_to_weight_scale(seed, c1, c0):
    rng = np.random.default_rng(seed)
    w1, w0, y1, y0 = rng.random(10), rng.random(12), rng.normal(size=10), rng.normal(size=12)
    assert analytic_se(c1 * w1, y1, c0 * w0, y0) == pytest.approx(analytic_se(w1, y1, w0, y0), rel=1e-10)


def test_normal_ci_symmetry():
    lo, hi = normal_ci(1.0, 0.5, 0.95)
    assert (lo + hi) / 2 == pytest.approx(1.0)
    assert hi - lo == pytest.approx(2 * 1.959963984540054 * 0.5, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_stratified_resample_keeps_arm_sizes(seed):
    z = np.random.default_rng(seed).integers(0, 2, size=57)
    idx = stratified_resample(z, np.random.default_rng(seed + 1))
    assert len(idx) == len(z)
    assert np.sum(z[idx] == 1) == np.sum(z == 1)


def test_pipeline_rejects_illegal_combinations():
    with pytest.raises(ValueError):
        Pipeline("one-sided", "marginal", "both-er")
    with pytest.raises(ValueError):
        Pipeline("one-sided", "joint", "weak-pi")
    with pytest.raises(ValueError):
        Pipeline("two-sided", "joint", "weak-pi", estimator="subgroup")
    with pytest.raises(ValueError):
        CIConfig(method="bootstrap", n_boot=50)


def test_bootstrap_is_deterministic_and_job_independent():
    ds = simulate(SimConfig(n=400), seed=2).dataset
    pipe = Pipeline("one-sided", "marginal", "weak-pi")
    a = bootstrap_ci(ds, pipe, CIConfig(method="bootstrap", n_boot=100, seed=5))
    b = bootstrap_ci(ds, pipe, CIConfig(method="bootstrap", n_boot=100, seed=5))
    c = bootstrap_ci(ds, pipe, CIConfig(method="bootstrap", n_boot=100, seed=5, jobs=2))
    assert a.ci == b.ci == c.ci
    assert a.se == c.se
    other = bootstrap_ci(ds, pipe, CIConfig(method="bootstrap", n_boot=100, seed=6))
    assert other.ci != a.ci


def test_bootstrap_zero_variance_has_zero_width():
    ds = simulate(SimConfig(n=300), seed=3).dataset.with_outcome(np.full(300, 2.5))
    boot = bootstrap_ci(ds, Pipeline("one-sided", "marginal", "strong-pi"), CIConfig(method="bootstrap", n_boot=100))
    for lo, hi in boot.ci.values():
        assert abs(lo) < 1e-12 and abs(hi) < 1e-12


def test_bootstrap_failure_census():
    # two treated High Takers: most resamples lose one and cannot fit the score model
    z = np.array([1] * 12 + [0] * 12)
    d = np.where(z == 1, [1, 1] + [0] * 10 + [0] * 12, MISSING_D)
    rng = np.random.default_rng(0)
    ds = Dataset(Design.ONE_SIDED, z, d, rng.normal(size=24), rng.normal(size=(24, 1)), None)
    with pytest.raises(BootstrapError) as info:
        bootstrap_ci(ds, Pipeline("one-sided", "marginal", "weak-pi"), CIConfig(method="bootstrap", n_boot=100))
    assert info.value.census["n_failed"] > 10
    assert "EstimationError" in info.value.census["failures"]


def test_apply_bootstrap_marks_method():
    ds = random_twosided(3, n=200)
    pipe = Pipeline("two-sided", "marginal", "weak-pi-er-nt")
    cfg = CIConfig(method="bootstrap", n_boot=100, seed=1)
    est = run_pipeline(ds, pipe)
    est = apply_bootstrap(est, bootstrap_ci(ds, pipe, cfg), cfg)
    assert est.ci_method == "bootstrap"
    assert est.metadata["bootstrap"]["n_boot"] == 100
    for e in est.strata.values():
        assert e.ci_lo <= e.itt <= e.ci_hi


def test_run_pipeline_dispatch(os_a):
    plug = run_pipeline(os_a, Pipeline("one-sided", "cell", "weak-pi", "plugin"))
    wt = run_pipeline(os_a, Pipeline("one-sided", "cell", "weak-pi"))
    assert plug["h"].itt == pytest.approx(wt["h"].itt, abs=1e-12)
    iv = run_pipeline(random_twosided(0), Pipeline("two-sided", "marginal", "both-er"))
    assert iv.method == "iv"


@pytest.mark.slow
def test_bootstrap_coverage_calibration():
    cfg = SimConfig()
    truth = true_estimands(cfg)["h"]
    pipe = Pipeline("one-sided", "marginal", "weak-pi")
    reps, hits = 1000, 0
    for r in range(reps):
        ds = simulate(cfg, seed=np.random.SeedSequence([4242, r])).dataset
        boot = bootstrap_ci(ds, pipe, CIConfig(method="bootstrap", n_boot=100, seed=r))
        lo, hi = boot.ci["h"]
        hits += lo <= truth <= hi
    assert 0.92 <= hits / reps <= 0.97
