import csv
import io

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from prinstrat.data import MISSING_D
from prinstrat.onesided import estimate_discrete_subgroup, estimate_weighting_strong, estimate_weighting_weak
from prinstrat.pscore import pscore_onesided
from prinstrat.simulation import SimConfig, StudyCell, run_study, simulate, simulate_twosided, true_estimands


def test_defaults():
    cfg = SimConfig()
    assert (cfg.n, cfg.p_treat, cfg.eta0, cfg.eta1) == (2000, 0.5, 0.0, 1.0)
    assert (cfg.alpha, cfg.beta0, cfg.tau, cfg.sigma_tau, cfg.sigma_y) == (0.0, 0.5, 0.5, 0.1, 1.0)
    assert (cfg.delta0, cfg.delta1) == (0.0, 0.0)


@pytest.mark.parametrize("bad", [{"sigma_y": -1}, {"p_treat": 1.0}, {"n": 1}, {"assignment": "cluster"}])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        SimConfig(**bad)


def test_noiseless_constant_effect():
    cfg = SimConfig(sigma_y=0, sigma_tau=0, beta0=0)
    sim = simulate(cfg, seed=1)
    ds = sim.dataset
    assert np.all(sim.y0 == 0) and np.all(sim.tau == 0.5)
    scores = pscore_onesided(ds)
    for est in (estimate_weighting_weak(ds, scores), estimate_weighting_strong(ds, scores),
                estimate_discrete_subgroup(ds, scores)):
        for s in "hl":
            assert est[s].itt == pytest.approx(0.5, abs=1e-14)


def test_assignment_and_strata_shares():
    sim = simulate(SimConfig(), seed=2)
    ds = sim.dataset
    assert np.sum(ds.z) == 1000
    # Bernoulli(0.5) share: 3 MC sds at n = 2000 is about 0.034
    assert abs(sim.high.mean() - 0.5) < 3 * np.sqrt(0.25 / 2000)
    assert np.all(ds.d[ds.z == 0] == MISSING_D)
    assert_array_equal(ds.d[ds.z == 1], sim.high[ds.z == 1])


def test_bernoulli_assignment_option():
    sim = simulate(SimConfig(assignment="bernoulli"), seed=3)
    assert 900 < sim.dataset.z.sum() < 1100


def test_same_seed_same_data():
    a, b = simulate(SimConfig(), seed=7), simulate(SimConfig(), seed=7)
    for name in ("z", "d", "y", "x"):
        assert getattr(a.dataset, name).tobytes() == getattr(b.dataset, name).tobytes()
    c = simulate(SimConfig(), seed=8)
    assert c.dataset.y.tobytes() != a.dataset.y.tobytes()


def test_true_estimands_trivial_cases():
    assert true_estimands(SimConfig()) == pytest.approx({"h": 0.5, "l": 0.5}, abs=1e-12)
    flat = true_estimands(SimConfig(eta1=0.0, gamma1=0.3, beta1=0.7))
    assert flat["h"] == pytest.approx(0.8, abs=1e-10)
    assert flat["l"] == pytest.approx(0.5, abs=1e-10)


def test_conditional_mean_matches_monte_carlo():
    cfg = SimConfig(beta1=0.25)
    ex_h = (true_estimands(cfg)["h"] - 0.5) / 0.25
    rng = np.random.default_rng(20240917)
    total = 0.0
    count = 0
    for _ in range(10):
        x = rng.standard_normal(1_000_000)
        h = rng.random(x.size) < 1 / (1 + np.exp(-x))
        total += x[h].sum()
        count += h.sum()
    # 10^7 draws: MC sd of the conditional mean is about 4e-4
    assert abs(ex_h - total / count) < 1e-3


def test_truth_matches_population_effects():
    cfg = SimConfig(n=400_000, beta1=0.25, gamma1=0.3, delta1=0.2)
    sim = simulate(cfg, seed=11)
    truth = true_estimands(cfg)
    assert sim.tau[sim.high == 1].mean() == pytest.approx(truth["h"], abs=0.01)
    assert sim.tau[sim.high == 0].mean() == pytest.approx(truth["l"], abs=0.01)


def test_study_layout_and_determinism():
    base = SimConfig(n=400)
    grid = {"beta1": [0, 0.25]}
    a = run_study(base, grid, n_reps=12, master_seed=3)
    b = run_study(base, grid, n_reps=12, master_seed=3)
    assert a.to_csv() == b.to_csv()
    rows = list(csv.DictReader(io.StringIO(a.to_csv())))
    assert [r["beta1"] for r in rows] == ["0.0", "0.25"]
    for key in ("bias_Sub", "coverage_Wt", "mcse_bias_WkWt", "flag_bias_Sub", "n_reps", "failures"):
        assert key in rows[0]
    assert all(int(r["n_reps"]) + int(r["failures"]) == 12 for r in rows)
    assert all(0 <= float(r["coverage_WkWt"]) <= 1 for r in rows)
    assert a.lookup(beta1=0.25) == 1


def test_study_jobs_invariance_small():
    base = SimConfig(n=300)
    cells = [StudyCell(0.0, 0.0, 0.5), {"gamma0": 0.5}]
    one = run_study(base, cells, n_reps=10, master_seed=5, jobs=1)
    two = run_study(base, cells, n_reps=10, master_seed=5, jobs=3)
    assert one.to_csv() == two.to_csv()


def test_study_rejects_unknown_methods():
    with pytest.raises(ValueError):
        run_study(SimConfig(), {"beta1": [0]}, methods=("Sub", "IV"), n_reps=1)


def test_oracle_score_mode_runs():
    res = run_study(SimConfig(n=400), {"beta1": [0.0]}, n_reps=5, score_mode="oracle")
    assert res.n_reps == [5]


def test_twosided_simulator_shapes():
    ds, strata, P = simulate_twosided(500, [-1.0, 0.5, 0.5], [-0.5, -0.5, 0.0], seed=1)
    assert ds.k == 2 and P.shape == (500, 3)
    assert np.allclose(P.sum(axis=1), 1)
    assert np.all(ds.d[strata == 0] == 1) and np.all(ds.d[strata == 2] == 0)
    assert np.all(ds.d[strata == 1] == ds.z[strata == 1])
