"""Data-generating process, true estimands and Monte Carlo study harness.

Units draw ``x ~ N(0, 1)`` and a High-Taker indicator with probability
``expit(eta0 + eta1 x)``.  Control outcomes are
``alpha + beta0 x + gamma0 H + delta0 H x + e_y`` and unit effects
``tau + beta1 x + gamma1 H + delta1 H x + e_tau``.  Setting ``gamma0 != 0``
breaks principal ignorability on the control side, ``gamma1 != 0`` on the
treated side.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats
from scipy.special import expit

from .data import Dataset, Design, EstimationError, MISSING_D
from .onesided import estimate_discrete_subgroup, estimate_weighting_strong, estimate_weighting_weak
from .pscore import PrincipalScoreSet, SeparationWarning, pscore_onesided

__all__ = [
    "METHODS",
    "SimConfig",
    "Simulated",
    "StudyCell",
    "StudyResult",
    "run_study",
    "simulate",
    "simulate_twosided",
    "true_estimands",
]

METHODS = ("Sub", "Wt", "WkWt")
FAILURE_LIMIT = 0.05


@dataclass(frozen=True)
class SimConfig:
    n: int = 2000
    p_treat: float = 0.5
    eta0: float = 0.0
    eta1: float = 1.0
    alpha: float = 0.0
    beta0: float = 0.5
    beta1: float = 0.0
    tau: float = 0.5
    gamma0: float = 0.0
    gamma1: float = 0.0
    delta0: float = 0.0
    delta1: float = 0.0
    sigma_y: float = 1.0
    sigma_tau: float = 0.1
    assignment: str = "complete"

    def __post_init__(self):
        if self.sigma_y < 0 or self.sigma_tau < 0:
            raise ValueError("noise standard deviations must be nonnegative")
        if not 0 < self.p_treat < 1:
            raise ValueError("p_treat must lie in (0, 1)")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.assignment not in ("complete", "bernoulli"):
            raise ValueError("assignment must be 'complete' or 'bernoulli'")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, raw: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class Simulated:
    dataset: Dataset
    high: np.ndarray
    tau: np.ndarray
    y0: np.ndarray
    y1: np.ndarray


def _assign(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.assignment == "bernoulli":
        return (rng.random(cfg.n) < cfg.p_treat).astype(np.int64)
    n1 = int(round(cfg.n * cfg.p_treat))
    z = np.zeros(cfg.n, dtype=np.int64)
    z[rng.permutation(cfg.n)[:n1]] = 1
    return z


def simulate(config: SimConfig, seed=None, rng: np.random.Generator | None = None) -> Simulated:
    """Draw one one-sided dataset; truth (strata, unit effects, potential outcomes) is kept alongside."""
    cfg = config
    if rng is None:
        rng = np.random.default_rng(seed)
    x = rng.standard_normal(cfg.n)
    high = (rng.random(cfg.n) < expit(cfg.eta0 + cfg.eta1 * x)).astype(np.int64)
    y0 = cfg.alpha + cfg.beta0 * x + cfg.gamma0 * high + cfg.delta0 * high * x + cfg.sigma_y * rng.standard_normal(cfg.n)
    tau = cfg.tau + cfg.beta1 * x + cfg.gamma1 * high + cfg.delta1 * high * x + cfg.sigma_tau * rng.standard_normal(cfg.n)
    y1 = y0 + tau
    z = _assign(cfg, rng)
    y = np.where(z == 1, y1, y0)
    d = np.where(z == 1, high, MISSING_D)
    ds = Dataset(Design.ONE_SIDED, z, d, y, x.reshape(-1, 1), ("x1",))
    return Simulated(ds, high, tau, y0, y1)


def _conditional_mean_x(cfg: SimConfig, high: bool) -> float:
    def p(x):
        q = expit(cfg.eta0 + cfg.eta1 * x)
        return q if high else 1.0 - q

    num = integrate.quad(lambda x: x * p(x) * stats.norm.pdf(x), -10, 10, epsabs=1e-10, epsrel=1e-12, limit=200)[0]
    den = integrate.quad(lambda x: p(x) * stats.norm.pdf(x), -10, 10, epsabs=1e-10, epsrel=1e-12, limit=200)[0]
    return num / den


def true_estimands(config: SimConfig) -> dict[str, float]:
    """Population ITT for High (``"h"``) and Low (``"l"``) Takers, by quadrature over ``x``."""
    cfg = config
    ex_h = _conditional_mean_x(cfg, True)
    ex_l = _conditional_mean_x(cfg, False)
    return {
        "h": cfg.tau + cfg.gamma1 + (cfg.beta1 + cfg.delta1) * ex_h,
        "l": cfg.tau + cfg.beta1 * ex_l,
    }


def simulate_twosided(n: int, coef_a, coef_n, seed=None, p_treat: float = 0.5, outcome_coef=None,
                      effects=(0.0, 1.0, 0.0), sigma_y: float = 1.0, x=None) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Two-sided test data from a multinomial strata model.

    ``coef_a`` and ``coef_n`` (intercept first) give the log-odds of
    always- and never-taking relative to complying.  Covariates are iid
    standard normal unless ``x`` is given.  Outcomes follow
    ``x . outcome_coef + effect[s] * z + e``, which satisfies Strong PI.
    Returns the dataset, the true strata (0=a, 1=c, 2=n) and the true score
    matrix (columns a, c, n).
    """
    rng = np.random.default_rng(seed)
    coef_a = np.asarray(coef_a, dtype=float)
    coef_n = np.asarray(coef_n, dtype=float)
    k = len(coef_a) - 1
    X = rng.standard_normal((n, k)) if x is None else np.asarray(x, dtype=float)
    X1 = np.column_stack([np.ones(n), X])
    eta = np.column_stack([X1 @ coef_a, np.zeros(n), X1 @ coef_n])
    P = np.exp(eta - eta.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    u = rng.random(n)
    strata = (u[:, None] > np.cumsum(P, axis=1)).sum(axis=1)
    z = np.zeros(n, dtype=np.int64)
    z[rng.permutation(n)[: int(round(n * p_treat))]] = 1
    d = np.where(strata == 0, 1, np.where(strata == 2, 0, z))
    beta = np.zeros(k) if outcome_coef is None else np.asarray(outcome_coef, dtype=float)
    y = X @ beta + np.asarray(effects)[strata] * z + sigma_y * rng.standard_normal(n)
    names = tuple(f"x{j + 1}" for j in range(k))
    return Dataset(Design.TWO_SIDED, z, d, y, X, names), strata, P


@dataclass(frozen=True)
class StudyCell:
    beta1: float
    gamma0: float
    gamma1: float


def _cell_grid(grid) -> list[StudyCell]:
    if isinstance(grid, dict):
        keys = ("beta1", "gamma0", "gamma1")
        values = [grid.get(k, [0.0]) for k in keys]
        return [StudyCell(*map(float, combo)) for combo in itertools.product(*values)]
    return [c if isinstance(c, StudyCell) else StudyCell(float(c.get("beta1", 0.0)), float(c.get("gamma0", 0.0)),
                                                         float(c.get("gamma1", 0.0))) for c in grid]


def _one_replicate(cfg: SimConfig, methods, master_seed: int, cell_index: int, rep: int, score_mode: str):
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, cell_index, rep]))
    sim = simulate(cfg, rng=rng)
    ds = sim.dataset
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SeparationWarning)
            if score_mode == "oracle":
                pi = expit(cfg.eta0 + cfg.eta1 * ds.x[:, 0])
                scores = PrincipalScoreSet.from_arrays(Design.ONE_SIDED, {"h": pi}, method="oracle")
            else:
                scores = pscore_onesided(ds)
            if scores.separated:
                return None
            out = {}
            for m in methods:
                if m == "Sub":
                    est = estimate_discrete_subgroup(ds, scores)
                elif m == "Wt":
                    est = estimate_weighting_strong(ds, scores)
                else:
                    est = estimate_weighting_weak(ds, scores)
                h = est["h"]
                out[m] = (h.itt, h.ci_lo, h.ci_hi)
    except (EstimationError, np.linalg.LinAlgError):
        return None
    return out


def _run_chunk(args):
    cfg, methods, master_seed, cell_index, start, stop, score_mode = args
    return cell_index, start, [_one_replicate(cfg, methods, master_seed, cell_index, r, score_mode)
                               for r in range(start, stop)]


@dataclass
class StudyResult:
    """Bias and coverage for ITT_h per grid cell and method.

    ``flag_bias_<method>`` in :meth:`rows` marks biases more than two Monte
    Carlo standard errors from zero.
    """

    cells: list[StudyCell]
    methods: tuple[str, ...]
    truth: list[float]
    bias: list[dict[str, float]]
    coverage: list[dict[str, float]]
    mc_se: list[dict[str, float]]
    n_reps: list[int]
    failures: list[int]
    requested: int

    def rows(self) -> list[dict]:
        out = []
        for i, cell in enumerate(self.cells):
            row = {"beta1": cell.beta1, "gamma0": cell.gamma0, "gamma1": cell.gamma1, "truth_itt_h": self.truth[i]}
            for m in self.methods:
                row[f"bias_{m}"] = self.bias[i][m]
            for m in self.methods:
                row[f"coverage_{m}"] = self.coverage[i][m]
            for m in self.methods:
                row[f"mcse_bias_{m}"] = self.mc_se[i][m]
            for m in self.methods:
                row[f"flag_bias_{m}"] = int(abs(self.bias[i][m]) > 2 * self.mc_se[i][m])
            row["n_reps"] = self.n_reps[i]
            row["failures"] = self.failures[i]
            out.append(row)
        return out

    def to_csv(self, path=None) -> str:
        rows = self.rows()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(rows[0]))
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row.values()])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def lookup(self, beta1: float = 0.0, gamma0: float = 0.0, gamma1: float = 0.0) -> int:
        for i, c in enumerate(self.cells):
            if math.isclose(c.beta1, beta1) and math.isclose(c.gamma0, gamma0) and math.isclose(c.gamma1, gamma1):
                return i
        raise KeyError((beta1, gamma0, gamma1))


class StudyFailure(EstimationError):
    pass


def run_study(base: SimConfig, grid, methods=METHODS, n_reps: int = 1000, master_seed: int = 0,
              jobs: int = 1, score_mode: str = "fitted") -> StudyResult:
    """Monte Carlo bias and 95% coverage of each method for ITT_h over a parameter grid.

    ``grid`` is either a list of cells (``StudyCell`` or dicts with beta1,
    gamma0, gamma1) or a dict of value lists whose Cartesian product is taken.
    Replicate ``r`` of cell ``i`` uses the stream
    ``SeedSequence([master_seed, i, r])``; results are reduced in replicate
    order with exact summation, so output is identical for any ``jobs``.
    Failed replicates (separated score model, empty groups) are counted;
    more than 5% failures in a cell raises :class:`StudyFailure`.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    if score_mode not in ("fitted", "oracle"):
        raise ValueError(f"score_mode must be 'fitted' or 'oracle', got {score_mode!r}")
    methods = tuple(methods)
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValueError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
    cells = _cell_grid(grid)
    configs = [base.replace(beta1=c.beta1, gamma0=c.gamma0, gamma1=c.gamma1) for c in cells]
    chunk = n_reps if jobs <= 1 else max(1, math.ceil(n_reps * len(configs) / (4 * jobs * len(configs))))
    tasks = [(cfg, methods, master_seed, i, start, min(start + chunk, n_reps), score_mode)
             for i, cfg in enumerate(configs) for start in range(0, n_reps, chunk)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, tasks))
    else:
        parts = [_run_chunk(t) for t in tasks]
    results: dict[int, list] = {i: [] for i in range(len(configs))}
    for i, start, reps in sorted(parts, key=lambda p: (p[0], p[1])):
        results[i].extend(reps)

    truth, bias, coverage, mcse, kept, failed = [], [], [], [], [], []
    for i, cfg in enumerate(configs):
        reps = results[i]
        ok = [r for r in reps if r is not None]
        n_fail = len(reps) - len(ok)
        if n_fail > FAILURE_LIMIT * n_reps:
            raise StudyFailure(f"cell {cells[i]}: {n_fail} of {n_reps} replicates failed")
        target = true_estimands(cfg)["h"]
        truth.append(target)
        b, cv, se = {}, {}, {}
        for m in methods:
            errs = [r[m][0] - target for r in ok]
            hits = [1.0 if r[m][1] <= target <= r[m][2] else 0.0 for r in ok]
            k = len(errs)
            mean_err = math.fsum(errs) / k if k else math.nan
            b[m] = mean_err
            cv[m] = math.fsum(hits) / k if k else math.nan
            se[m] = math.sqrt(math.fsum((e - mean_err) ** 2 for e in errs) / (k - 1) / k) if k > 1 else math.nan
        bias.append(b)
        coverage.append(cv)
        mcse.append(se)
        kept.append(len(ok))
        failed.append(n_fail)
    return StudyResult(cells, methods, truth, bias, coverage, mcse, kept, failed, n_reps)
