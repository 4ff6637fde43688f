"""Command-line interface: ``prinstrat {estimate,balance,simulate,mc-study}``.

Exit codes: 0 success, 2 input or configuration error, 3 estimation
failure, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import warnings
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .data import AssumptionSet, DataError, Design, EstimationError, load_dataset, save_dataset
from .diagnostics import balance_report_twosided, balance_within_bins_onesided, write_balance_csv, write_plot_data
from .inference import BootstrapError, CIConfig, Pipeline, apply_bootstrap, bootstrap_ci, fit_scores, run_pipeline
from .pscore import EMInvariantError
from .simulation import METHODS, SimConfig, StudyFailure, run_study, simulate, true_estimands

log = logging.getLogger("prinstrat")

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION, EXIT_INTERNAL = 0, 2, 3, 4
OUT_ENV = "PRINSTRAT_OUT"


class UsageError(ValueError):
    pass


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class Manifest:
    """Run record written next to every output set.

    ``manifest_id`` hashes everything that determines the outputs (inputs,
    settings, seed, version) and excludes timestamps and worker counts.
    """

    def __init__(self, subcommand: str, settings: dict, inputs=(), seed=None):
        self.subcommand = subcommand
        self.inputs = [{"path": str(p), "sha256": _sha256_file(Path(p))} for p in inputs]
        self.settings = settings
        self.seed = seed
        self.started = datetime.now(timezone.utc).isoformat()
        self.manifest_id = _config_hash({"subcommand": subcommand, "inputs": [i["sha256"] for i in self.inputs],
                                         "settings": settings, "seed": seed, "version": __version__})

    def write(self, out: Path, outputs: list[str]) -> None:
        record = {
            "subcommand": self.subcommand,
            "tool_version": __version__,
            "inputs": self.inputs,
            "settings": self.settings,
            "config_hash": self.manifest_id,
            "seed": self.seed,
            "outputs": outputs,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
        }
        (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(arg: str | None) -> Path:
    out = Path(arg or os.environ.get(OUT_ENV) or "prinstrat-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pipeline(args) -> Pipeline:
    design = Design.parse(args.design)
    assumption = AssumptionSet.parse(args.assumption)
    if not assumption.allowed(design):
        raise UsageError(f"--assumption {assumption.value} is not available for --design {design.value}")
    score = args.score
    if score is None:
        score = "marginal"
    try:
        return Pipeline(design, score, assumption, getattr(args, "estimator", "weighting"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_estimate(args) -> int:
    pipeline = _pipeline(args)
    dataset = load_dataset(args.data, pipeline.design)
    settings = {"design": pipeline.design.value, "score": pipeline.score, "assumption": pipeline.assumption.value,
                "estimator": pipeline.estimator, "ci": args.ci, "level": args.level, "n_boot": args.n_boot}
    manifest = Manifest("estimate", settings, [args.data], args.seed)
    out = _out_dir(args.out)
    outputs = []
    scores = fit_scores(dataset, pipeline)
    if scores is not None:
        scores.to_csv(out / "scores.csv")
        scores.write_sidecar(out / "scores.json")
        outputs += ["scores.csv", "scores.json"]
    est = run_pipeline(dataset, pipeline, level=args.level, scores=scores)
    if args.ci == "bootstrap":
        config = CIConfig("bootstrap", args.level, args.n_boot, args.seed, args.jobs)
        boot = bootstrap_ci(dataset, pipeline, config)
        est = apply_bootstrap(est, boot, config)
    est.metadata["design"] = pipeline.design.value
    est.to_json(out / "estimates.json", manifest_id=manifest.manifest_id)
    _write_flat_row(est.flat_row(), out / "estimates.csv")
    table = est.table()
    (out / "estimates.txt").write_text(table + "\n", encoding="utf-8")
    outputs += ["estimates.json", "estimates.csv", "estimates.txt"]
    manifest.write(out, outputs)
    print(table)
    return EXIT_OK


def _write_flat_row(row: dict, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(row))
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])


def cmd_balance(args) -> int:
    design = Design.parse(args.design)
    dataset = load_dataset(args.data, design)
    score = args.score or "marginal"
    if design is Design.ONE_SIDED and score == "joint":
        raise UsageError("--score joint applies to two-sided designs only")
    pipeline = Pipeline(design, score, AssumptionSet.WEAK_PI)
    settings = {"design": design.value, "score": score, "bins": args.bins}
    manifest = Manifest("balance", settings, [args.data])
    out = _out_dir(args.out)
    scores = fit_scores(dataset, pipeline)
    if design is Design.ONE_SIDED:
        rows = balance_within_bins_onesided(dataset, scores, args.bins)
    else:
        rows = balance_report_twosided(dataset, scores)
    scores.to_csv(out / "scores.csv")
    write_balance_csv(rows, out / "balance.csv")
    write_plot_data(rows, out / "balance_plot.csv")
    manifest.write(out, ["scores.csv", "balance.csv", "balance_plot.csv"])
    for r in rows:
        delta = "undefined" if not r.defined else f"{r.delta:+.4f}"
        print(f"{r.stratum:<8}{r.covariate:<20}{r.mode.value:<24}{delta}")
    return EXIT_OK


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def cmd_simulate(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    base = raw.get("base", raw)
    try:
        cfg = SimConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulation config: {exc}") from None
    settings = {"config": cfg.__dict__, "reps": args.reps}
    manifest = Manifest("simulate", settings, seed=args.seed)
    out = _out_dir(args.out)
    outputs = []
    streams = np.random.SeedSequence(args.seed).spawn(args.reps)
    for r, ss in enumerate(streams):
        sim = simulate(cfg, rng=np.random.default_rng(ss))
        stem = "data" if args.reps == 1 else f"data_{r:04d}"
        save_dataset(sim.dataset, out / f"{stem}.csv")
        truth = out / f"{stem}_truth.csv"
        with truth.open("w", encoding="utf-8", newline="") as fh:
            fh.write("unit_index,high,tau,y0,y1\n")
            for i in range(sim.dataset.n):
                fh.write(f"{i},{int(sim.high[i])},{sim.tau[i]!r},{sim.y0[i]!r},{sim.y1[i]!r}\n")
        outputs += [f"{stem}.csv", truth.name]
    (out / "truth.json").write_text(json.dumps({"config": cfg.__dict__, "itt": true_estimands(cfg),
                                                "manifest_id": manifest.manifest_id}, indent=2, sort_keys=True)
                                    + "\n", encoding="utf-8")
    manifest.write(out, outputs + ["truth.json"])
    print(f"wrote {args.reps} dataset(s) to {out}")
    return EXIT_OK


def load_study_config(path) -> dict:
    """Read a Monte Carlo study config and check it against the bundled JSON schema."""
    raw = _read_json(path)
    schema = json.loads(resources.files("prinstrat").joinpath("study_config.schema.json").read_text())
    try:
        jsonschema.validate(raw, schema)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"invalid study config {path}: {exc.message}") from None
    return raw


def cmd_mc_study(args) -> int:
    raw = load_study_config(args.config)
    try:
        base = SimConfig.from_dict(raw.get("base", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid base config: {exc}") from None
    reps = args.reps if args.reps is not None else raw.get("n_reps", 1000)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    methods = raw.get("methods", list(METHODS))
    mode = raw.get("score_mode", "fitted")
    settings = {"config": raw, "reps": reps}
    manifest = Manifest("mc-study", settings, [args.config], seed)
    out = _out_dir(args.out)
    result = run_study(base, raw["grid"], methods, reps, seed, jobs=args.jobs, score_mode=mode)
    text = result.to_csv(out / "study.csv")
    manifest.write(out, ["study.csv"])
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prinstrat", description="Principal score estimation of stratum effects.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="fit principal scores and estimate stratum effects")
    est.add_argument("--data", required=True)
    est.add_argument("--design", required=True, choices=[d.value for d in Design])
    est.add_argument("--score", choices=["cell", "marginal", "joint"], default=None)
    est.add_argument("--assumption", required=True, choices=[a.value for a in AssumptionSet])
    est.add_argument("--estimator", choices=["weighting", "subgroup", "plugin"], default="weighting",
                     help="one-sided only: weighting (default), discrete subgroup, or binary plug-in")
    est.add_argument("--ci", choices=["analytic", "bootstrap"], default="analytic")
    est.add_argument("--level", type=float, default=0.95)
    est.add_argument("--n-boot", type=int, default=500)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--jobs", type=int, default=1)
    est.add_argument("--out")
    est.set_defaults(func=cmd_estimate)

    bal = sub.add_parser("balance", help="covariate balance given the principal scores")
    bal.add_argument("--data", required=True)
    bal.add_argument("--design", required=True, choices=[d.value for d in Design])
    bal.add_argument("--score", choices=["cell", "marginal", "joint"], default=None)
    bal.add_argument("--bins", type=int, default=5)
    bal.add_argument("--out")
    bal.set_defaults(func=cmd_balance)

    sim = sub.add_parser("simulate", help="draw datasets from the one-sided simulation model")
    sim.add_argument("--config")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--reps", type=int, default=1)
    sim.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; simulation is serial")
    sim.add_argument("--out")
    sim.set_defaults(func=cmd_simulate)

    mc = sub.add_parser("mc-study", aliases=["mc_study"], help="Monte Carlo bias/coverage study")
    mc.add_argument("--config", required=True)
    mc.add_argument("--seed", type=int, default=None)
    mc.add_argument("--reps", type=int, default=None)
    mc.add_argument("--jobs", type=int, default=1)
    mc.add_argument("--out")
    mc.set_defaults(func=cmd_mc_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return args.func(args)
    except (UsageError, DataError) as exc:
        print(f"prinstrat: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EMInvariantError, AssertionError) as exc:
        print(f"prinstrat: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (EstimationError, StudyFailure, BootstrapError) as exc:
        census = getattr(exc, "census", None)
        if census is not None and getattr(args, "out", None):
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "bootstrap_failures.json").write_text(json.dumps(census, indent=2) + "\n")
        print(f"prinstrat: estimation failed ({type(exc).__module__.split('.')[-1]}): {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ValueError as exc:
        print(f"prinstrat: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
