"""Analytic weighted-mean variances and stratified bootstrap intervals."""

from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import AssumptionSet, Dataset, Design, EstimateSet, EstimationError

__all__ = [
    "BootstrapError",
    "BootstrapResult",
    "CIConfig",
    "CIMethod",
    "DegenerateWeightWarning",
    "Pipeline",
    "analytic_se",
    "arm_variance",
    "bootstrap_ci",
    "normal_ci",
    "run_pipeline",
    "stratified_resample",
]


class DegenerateWeightWarning(UserWarning):
    """An arm's weighted mean rests on a single unit, so its variance is reported as 0."""


class CIMethod(str, enum.Enum):
    ANALYTIC = "analytic"
    BOOTSTRAP = "bootstrap"


@dataclass(frozen=True)
class CIConfig:
    method: CIMethod = CIMethod.ANALYTIC
    level: float = 0.95
    n_boot: int = 500
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "method", CIMethod(self.method))
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if self.method is CIMethod.BOOTSTRAP and self.n_boot < 100:
            raise ValueError("bootstrap needs n_boot >= 100")


def arm_variance(w, y) -> float:
    """Variance of a weighted mean with the weights held fixed.

    ``sum(w**2 * (y - mu)**2) / sum(w)**2``
    """
    w = np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float)
    total = w.sum()
    if not total > 0:
        raise EstimationError("zero weight mass in an arm")
    if np.count_nonzero(w) < 2:
        warnings.warn("single effective unit in an arm; its variance contribution is 0",
                      DegenerateWeightWarning, stacklevel=3)
    mu = np.dot(w, y) / total
    return float(np.dot(w * w, (y - mu) ** 2) / total**2)


def analytic_se(w1, y1, w0, y0) -> float:
    """Standard error of a weighted difference in means, weights treated as fixed."""
    return math.sqrt(arm_variance(w1, y1) + arm_variance(w0, y0))


def normal_ci(estimate: float, se: float, level: float = 0.95) -> tuple[float, float]:
    q = stats.norm.ppf(0.5 + level / 2)
    return estimate - q * se, estimate + q * se


@dataclass(frozen=True)
class Pipeline:
    """Names a full estimation pipeline: score method, then estimator.

    ``estimator`` is one of ``weighting``, ``subgroup`` and ``plugin``
    (one-sided) or ``weighting`` (two-sided, the assumption decides the rest).
    """

    design: Design
    score: str
    assumption: AssumptionSet
    estimator: str = "weighting"

    def __post_init__(self):
        object.__setattr__(self, "design", Design.parse(self.design))
        object.__setattr__(self, "assumption", AssumptionSet.parse(self.assumption))
        self.assumption.require(self.design)
        if self.score not in ("cell", "marginal", "joint"):
            raise ValueError(f"unknown score method {self.score!r}")
        if self.design is Design.ONE_SIDED and self.score == "joint":
            raise ValueError("joint score estimation applies to two-sided designs only")
        if self.estimator not in ("weighting", "subgroup", "plugin"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.design is Design.TWO_SIDED and self.estimator != "weighting":
            raise ValueError(f"estimator {self.estimator!r} is one-sided only")


def fit_scores(dataset: Dataset, pipeline: Pipeline):
    from . import pscore

    if pipeline.assumption is AssumptionSet.BOTH_ER:
        return None
    if pipeline.score == "cell":
        return pscore.pscore_cell(dataset)
    if pipeline.design is Design.ONE_SIDED:
        return pscore.pscore_onesided(dataset)
    if pipeline.score == "marginal":
        return pscore.pscore_twosided_marginal(dataset)
    return pscore.pscore_twosided_joint(dataset)


def run_pipeline(dataset: Dataset, pipeline: Pipeline, level: float = 0.95,
                 scores=None) -> EstimateSet:
    """Fit principal scores (unless given) and run the named estimator."""
    from . import onesided, twosided

    if scores is None:
        scores = fit_scores(dataset, pipeline)
    a = pipeline.assumption
    if pipeline.design is Design.ONE_SIDED:
        if pipeline.estimator == "subgroup":
            return onesided.estimate_discrete_subgroup(dataset, scores, level=level)
        if pipeline.estimator == "plugin":
            return onesided.estimate_binary_plugin(dataset, a, level=level)
        if a is AssumptionSet.WEAK_PI:
            return onesided.estimate_weighting_weak(dataset, scores, level=level)
        return onesided.estimate_weighting_strong(dataset, scores, level=level)
    if a is AssumptionSet.STRONG_PI:
        return twosided.estimate_strong_twosided(dataset, scores, level=level)
    if a is AssumptionSet.WEAK_PI:
        return twosided.estimate_weak_twosided(dataset, scores, level=level)
    if a is AssumptionSet.WEAK_PI_ER_NT:
        return twosided.estimate_weak_er_nt(dataset, scores, level=level)
    return twosided.estimate_iv_both_er(dataset, level=level)


def stratified_resample(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices of a with-replacement resample drawn separately within each arm."""
    parts = []
    for arm in (0, 1):
        members = np.flatnonzero(z == arm)
        parts.append(members[rng.integers(0, len(members), size=len(members))])
    return np.concatenate(parts)


@dataclass
class BootstrapResult:
    ci: dict[str, tuple[float, float]]
    se: dict[str, float]
    n_ok: int
    failures: dict[str, int] = field(default_factory=dict)

    def census(self) -> dict:
        return {"n_ok": self.n_ok, "n_failed": sum(self.failures.values()), "failures": self.failures}


def _replicate(args):
    dataset, pipeline, seed, b = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
    idx = stratified_resample(dataset.z, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            est = run_pipeline(dataset.subset(idx), pipeline)
        except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
            return b, None, type(exc).__name__
    scores_meta = est.metadata.get("score_separated")
    if scores_meta:
        return b, None, "Separation"
    return b, {s: e.itt for s, e in est.strata.items()}, None


class BootstrapError(EstimationError):
    def __init__(self, message: str, census: dict):
        super().__init__(message)
        self.census = census


def bootstrap_ci(dataset: Dataset, pipeline: Pipeline, config: CIConfig) -> BootstrapResult:
    """Percentile intervals from arm-stratified resampling of the whole pipeline.

    Each replicate refits the principal scores.  Replicate ``b`` draws from
    the stream ``SeedSequence([seed, b])`` so the output does not depend on
    ``config.jobs``.
    """
    tasks = [(dataset, pipeline, config.seed, b) for b in range(config.n_boot)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * config.jobs))))
    else:
        results = [_replicate(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    failures: dict[str, int] = {}
    draws: dict[str, list[float]] = {}
    n_ok = 0
    for _, value, err in results:
        if value is None:
            failures[err] = failures.get(err, 0) + 1
            continue
        n_ok += 1
        for s, v in value.items():
            draws.setdefault(s, []).append(v)
    census = {"n_ok": n_ok, "n_failed": config.n_boot - n_ok, "failures": failures}
    if config.n_boot - n_ok > 0.1 * config.n_boot:
        raise BootstrapError(f"{config.n_boot - n_ok} of {config.n_boot} bootstrap replicates failed", census)
    alpha = 1 - config.level
    ci, se = {}, {}
    for s, vals in draws.items():
        arr = np.asarray(vals)
        lo, hi = np.quantile(arr, [alpha / 2, 1 - alpha / 2])
        ci[s] = (float(lo), float(hi))
        se[s] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return BootstrapResult(ci=ci, se=se, n_ok=n_ok, failures=failures)


def apply_bootstrap(est: EstimateSet, boot: BootstrapResult, config: CIConfig) -> EstimateSet:
    """Replace the analytic intervals in ``est`` with bootstrap ones."""
    for s, e in est.strata.items():
        if s in boot.ci:
            e.ci_lo, e.ci_hi = boot.ci[s]
            e.se = boot.se[s]
            # percentile intervals need not contain the full-sample estimate
            e.ci_lo = min(e.ci_lo, e.itt)
            e.ci_hi = max(e.ci_hi, e.itt)
    est.ci_method = CIMethod.BOOTSTRAP.value
    est.level = config.level
    est.metadata["bootstrap"] = boot.census() | {"n_boot": config.n_boot, "seed": config.seed}
    return est
