import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import DATA, hand, random_twosided
from prinstrat import cli
from prinstrat.data import Dataset, Design, MISSING_D, save_dataset
from prinstrat.diagnostics import balance_report_twosided
from prinstrat.onesided import estimate_binary_plugin
from prinstrat.pscore import pscore_twosided_joint
from prinstrat.simulation import simulate_twosided


def _json(path):
    return json.loads(path.read_text())


def test_estimate_both_er_matches_wald(tmp_path):
    ds = random_twosided(1, n=120)
    data = tmp_path / "ts.csv"
    save_dataset(ds, data)
    out = tmp_path / "out"
    code = cli.main(["estimate", "--data", str(data), "--design", "two-sided", "--assumption", "both-er",
                     "--out", str(out)])
    assert code == 0
    est = _json(out / "estimates.json")
    z, d, y = ds.z, ds.d, ds.y
    wald = (y[z == 1].mean() - y[z == 0].mean()) / (d[z == 1].mean() - d[z == 0].mean())
    assert est["strata"]["c"]["itt"] == pytest.approx(wald, abs=1e-10)
    manifest = _json(out / "manifest.json")
    assert est["manifest_id"] == manifest["config_hash"]
    assert manifest["inputs"][0]["sha256"]
    assert (out / "estimates.txt").read_text().startswith("method=iv")


def test_estimate_cell_weak_matches_plugin(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["estimate", "--data", str(DATA / "os_a.csv"), "--design", "one-sided", "--assumption",
                     "weak-pi", "--score", "cell", "--out", str(out)])
    assert code == 0
    est = _json(out / "estimates.json")
    plug = estimate_binary_plugin(hand("os_a.csv", Design.ONE_SIDED), "weak-pi")
    for s in "hl":
        assert est["strata"][s]["itt"] == pytest.approx(plug[s].itt, abs=1e-10)
    lines = (out / "scores.csv").read_text().splitlines()
    assert lines[0] == "unit_index,pi_h,pi_l"


def test_illegal_combination_is_a_usage_error(tmp_path, capsys):
    code = cli.main(["estimate", "--data", str(DATA / "os_a.csv"), "--design", "one-sided", "--assumption",
                     "weak-pi-er-nt", "--out", str(tmp_path)])
    assert code == 2
    assert "not available" in capsys.readouterr().err


def test_invalid_data_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("z,d,y\n2,1,1\n1,1,1\n0,0,0\n0,0,1\n")
    code = cli.main(["estimate", "--data", str(bad), "--design", "two-sided", "--assumption", "both-er",
                     "--out", str(tmp_path / "o")])
    assert code == 2
    assert "row 2" in capsys.readouterr().err


def test_estimation_failure_exits_3(tmp_path):
    data = tmp_path / "weak.csv"
    z = [0] * 100 + [1] * 100
    d = [1] * 50 + [0] * 50 + [1] * 51 + [0] * 49
    save_dataset(Dataset(Design.TWO_SIDED, z, d, np.zeros(200), np.zeros((200, 1)), ("x1",)), data)
    code = cli.main(["estimate", "--data", str(data), "--design", "two-sided", "--assumption", "both-er",
                     "--out", str(tmp_path / "o")])
    assert code == 3


def test_bootstrap_cli(tmp_path):
    out = tmp_path / "boot"
    args = ["estimate", "--data", str(DATA / "os_b.csv"), "--design", "one-sided", "--assumption", "strong-pi",
            "--score", "cell", "--ci", "bootstrap", "--n-boot", "100", "--seed", "4", "--out", str(out)]
    code = cli.main(args)
    if code == 3:
        # twelve units: resamples often empty a covariate cell; the census must be written
        assert (out / "bootstrap_failures.json").exists()
    else:
        assert code == 0
        assert _json(out / "estimates.json")["ci_method"] == "bootstrap"


def test_env_var_sets_output_directory(tmp_path, monkeypatch):
    monkeypatch.setenv("PRINSTRAT_OUT", str(tmp_path / "envout"))
    assert cli.main(["simulate", "--seed", "1"]) == 0
    assert (tmp_path / "envout" / "data.csv").exists()


def test_simulate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["simulate", "--reps", "1", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    for f in ("data.csv", "data_truth.csv", "truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_config_errors(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"base": {"sigma_y": -1}}')
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("{not json")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_mc_study_schema_errors(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"grid": {"beta1": [0]}, "methods": ["IV"]}')
    assert cli.main(["mc-study", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_bundled_configs_validate():
    root = DATA.parent.parent / "configs"
    for name in ("table2.json", "table3.json"):
        raw = cli.load_study_config(root / name)
        assert raw["n_reps"] == 1000


def test_mc_study_jobs_byte_identical(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"base": {"n": 300}, "grid": {"gamma0": [0, 0.5]}, "n_reps": 8, "seed": 3}))
    for jobs in ("1", "4"):
        assert cli.main(["mc-study", "--config", str(cfg), "--jobs", jobs, "--out", str(tmp_path / jobs)]) == 0
    assert (tmp_path / "1" / "study.csv").read_bytes() == (tmp_path / "4" / "study.csv").read_bytes()
    m1, m4 = _json(tmp_path / "1" / "manifest.json"), _json(tmp_path / "4" / "manifest.json")
    assert m1["config_hash"] == m4["config_hash"]


def test_balance_twosided_well_specified(tmp_path):
    ds, _, _ = simulate_twosided(4000, [-1.0, 0.6, -0.4], [-0.7, -0.8, 0.3], seed=3)
    data = tmp_path / "bal.csv"
    save_dataset(ds, data)
    out = tmp_path / "b"
    assert cli.main(["balance", "--data", str(data), "--design", "two-sided", "--score", "joint",
                     "--out", str(out)]) == 0
    with (out / "balance.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(abs(float(r["delta"])) < 0.1 for r in rows)
    assert (out / "balance_plot.csv").read_text().startswith("panel,covariate")


def test_balance_flags_zero_variance(tmp_path):
    rng = np.random.default_rng(0)
    n = 400
    x = np.column_stack([rng.standard_normal(n), np.ones(n)])
    z = np.tile([0, 1], n // 2)
    d = np.where(z == 1, rng.random(n) < 0.5, MISSING_D)
    data = tmp_path / "one.csv"
    save_dataset(Dataset(Design.ONE_SIDED, z, d, rng.normal(size=n), x, ("x1", "const")), data)
    out = tmp_path / "b"
    assert cli.main(["balance", "--data", str(data), "--design", "one-sided", "--out", str(out)]) == 0
    with (out / "balance.csv").open() as fh:
        const = [r for r in csv.DictReader(fh) if r["covariate"] == "const"]
    assert const and all(r["defined"] == "0" and r["delta"] == "" for r in const)


def test_balance_misspecified_shows_imbalance(tmp_path):
    ds, _, _ = simulate_twosided(6000, [-1.0, 0.0, 1.2], [-0.7, 0.0, -1.2], seed=6)
    # a model without x2 leaves x2 imbalanced; the CLI fits the full model, which balances it
    data = tmp_path / "full.csv"
    save_dataset(ds, data)
    out = tmp_path / "b"
    assert cli.main(["balance", "--data", str(data), "--design", "two-sided", "--score", "joint",
                     "--out", str(out)]) == 0
    with (out / "balance.csv").open() as fh:
        full = [float(r["delta"]) for r in csv.DictReader(fh) if r["covariate"] == "x2"]
    assert max(map(abs, full)) < 0.1
    reduced = Dataset(Design.TWO_SIDED, ds.z, ds.d, ds.y, ds.x[:, :1], ("x1",))
    rows = balance_report_twosided(ds, pscore_twosided_joint(reduced))
    assert max(abs(r.delta) for r in rows if r.covariate == "x2") > 0.1


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "prinstrat.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "0.1.0"
