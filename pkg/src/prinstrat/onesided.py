"""Estimators of High- and Low-Taker impacts under one-sided noncompliance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit

from .data import AssumptionSet, Dataset, Design, EstimateSet, EstimationError, StratumEstimate
from .inference import analytic_se, normal_ci
from .pscore import PrincipalScoreSet, fit_logit

__all__ = [
    "ImplicationTest",
    "StratumWeights",
    "estimate_binary_plugin",
    "estimate_discrete_subgroup",
    "estimate_weighting_strong",
    "estimate_weighting_weak",
    "strong_pi_implication_test",
    "weighted_contrast",
    "weights_strong",
    "weights_weak",
]


@dataclass(frozen=True)
class StratumWeights:
    """Per-unit analysis weights for each target stratum; the arm is read off ``z``."""

    weights: dict[str, np.ndarray]

    def __getitem__(self, stratum: str) -> np.ndarray:
        return self.weights[stratum]


def _require_onesided(dataset: Dataset, scores: PrincipalScoreSet | None = None) -> None:
    if dataset.design is not Design.ONE_SIDED:
        raise ValueError("this estimator needs a one-sided dataset")
    if scores is not None and len(scores) != dataset.n:
        raise ValueError(f"{len(scores)} scores for {dataset.n} units")


def weights_weak(dataset: Dataset, scores: PrincipalScoreSet) -> StratumWeights:
    """Treated units weighted by their observed dose, controls by their score."""
    pi = scores.pi
    treated = dataset.z == 1
    high = np.where(treated, (dataset.d == 1).astype(float), pi)
    low = np.where(treated, (dataset.d == 0).astype(float), 1.0 - pi)
    return StratumWeights({"h": high, "l": low})


def weights_strong(dataset: Dataset, scores: PrincipalScoreSet) -> StratumWeights:
    pi = scores.pi
    return StratumWeights({"h": pi.copy(), "l": 1.0 - pi})


def weighted_contrast(z, y, w, level: float = 0.95) -> StratumEstimate:
    """Weighted difference in means between arms with a fixed-weight normal interval."""
    t, c = z == 1, z == 0
    w1, w0 = w[t], w[c]
    s1, s0 = w1.sum(), w0.sum()
    if not (s1 > 0 and s0 > 0):
        raise EstimationError("zero weight mass in one arm")
    mu1 = float(np.dot(w1, y[t]) / s1)
    mu0 = float(np.dot(w0, y[c]) / s0)
    itt = mu1 - mu0
    se = analytic_se(w1, y[t], w0, y[c])
    lo, hi = normal_ci(itt, se, level)
    return StratumEstimate(mu1, mu0, itt, se, lo, hi, float(s1), float(s0))


def _from_weights(dataset, weights: StratumWeights, assumption, method, level, scores=None) -> EstimateSet:
    strata = {}
    for s, w in weights.weights.items():
        try:
            strata[s] = weighted_contrast(dataset.z, dataset.y, w, level)
        except EstimationError as exc:
            raise EstimationError(f"stratum {s!r}: {exc}") from None
    meta = {}
    if scores is not None:
        meta = {"score_method": scores.method, "score_separated": scores.separated}
    return EstimateSet(strata, assumption, method, level, metadata=meta)


def estimate_weighting_weak(dataset: Dataset, scores: PrincipalScoreSet, level: float = 0.95) -> EstimateSet:
    """Weighting under Weak PI.

    Treated-side stratum means are the observed dose-group means; control-side
    means weight every control by its High-Taker score (or one minus it).
    """
    _require_onesided(dataset, scores)
    treated = dataset.z == 1
    for dose, name in ((1, "High"), (0, "Low")):
        if not np.any(treated & (dataset.d == dose)):
            raise EstimationError(f"no treated {name} Takers")
    return _from_weights(dataset, weights_weak(dataset, scores), AssumptionSet.WEAK_PI, "weighting", level, scores)


def estimate_weighting_strong(dataset: Dataset, scores: PrincipalScoreSet, level: float = 0.95) -> EstimateSet:
    """Weighting under Strong PI: both arms weighted by the score."""
    _require_onesided(dataset, scores)
    return _from_weights(dataset, weights_strong(dataset, scores), AssumptionSet.STRONG_PI, "weighting", level,
                         scores)


def estimate_discrete_subgroup(dataset: Dataset, scores: PrincipalScoreSet, level: float = 0.95,
                               threshold: str = "all") -> EstimateSet:
    """Split units at the average score and report subgroup ITTs.

    Units with ``pi >= threshold`` are predicted High Takers.  The threshold
    is the mean score over all units (``threshold="all"``) or the share of
    High Takers among treated units (``"treated"``).  The results estimate
    effects for *predicted* strata, not for the principal strata themselves.
    """
    _require_onesided(dataset, scores)
    pi = scores.pi
    if threshold == "all":
        cut = float(pi.mean())
    elif threshold == "treated":
        cut = float(np.mean(dataset.d[dataset.z == 1] == 1))
    else:
        raise ValueError(f"unknown threshold rule {threshold!r}")
    predicted_high = pi >= cut
    strata = {}
    for s, group in (("h", predicted_high), ("l", ~predicted_high)):
        for arm in (0, 1):
            if not np.any(group & (dataset.z == arm)):
                raise EstimationError(
                    f"predicted {'High' if s == 'h' else 'Low'} Taker group has no units with z={arm}; "
                    f"the threshold {cut:.6g} does not split the scores"
                )
        strata[s] = weighted_contrast(dataset.z, dataset.y, group.astype(float), level)
    meta = {"threshold": cut, "threshold_rule": threshold, "score_method": scores.method,
            "score_separated": scores.separated,
            "estimand": "average impact for units predicted to be High (h) or Low (l) Takers"}
    return EstimateSet(strata, None, "subgroup", level, metadata=meta)


def _cell_stats(y):
    n = len(y)
    if n == 0:
        return math.nan, math.nan, 0
    m = float(np.mean(y))
    return m, float(np.mean((y - m) ** 2)) / n, n


def estimate_binary_plugin(dataset: Dataset, assumption: AssumptionSet | str = AssumptionSet.WEAK_PI,
                           level: float = 0.95) -> EstimateSet:
    """Plug-in moment estimators for a single binary covariate.

    Control-side stratum means are averages of the covariate-cell control
    means, weighted by the share of the stratum in each cell
    ``p(x|s) ~ pi_s(x) p(x)``.  Under Weak PI the treated side is the observed
    dose-group mean; under Strong PI it is the same weighted average of the
    treated cell means.  ``p(x)`` is taken within the arm being averaged.
    Standard errors propagate the cell-mean variances with the cell weights
    held fixed.
    """
    _require_onesided(dataset)
    assumption = AssumptionSet.parse(assumption)
    if assumption not in (AssumptionSet.WEAK_PI, AssumptionSet.STRONG_PI):
        raise ValueError("binary plug-in estimators exist for weak-pi and strong-pi only")
    if dataset.k != 1:
        raise ValueError(f"binary plug-in needs exactly one covariate, got {dataset.k}")
    x = dataset.x[:, 0]
    values = np.unique(x)
    if len(values) > 2:
        raise ValueError("the covariate must be binary")
    z, d, y = dataset.z, dataset.d, dataset.y

    pi_h, p0, p1, ybar0, v0, ybar1, v1 = {}, {}, {}, {}, {}, {}, {}
    n0, n1 = int((z == 0).sum()), int((z == 1).sum())
    for v in values:
        t = (z == 1) & (x == v)
        c = (z == 0) & (x == v)
        if not t.any() or not c.any():
            raise EstimationError(f"empty cell: covariate value {v:g} lacks units in one arm")
        pi_h[v] = float(np.mean(d[t] == 1))
        p1[v], p0[v] = t.sum() / n1, c.sum() / n0
        ybar0[v], v0[v], _ = _cell_stats(y[c])
        ybar1[v], v1[v], _ = _cell_stats(y[t])

    strata = {}
    for s, dose in (("h", 1), ("l", 0)):
        share = {v: (pi_h[v] if dose == 1 else 1 - pi_h[v]) for v in values}
        w0 = {v: share[v] * p0[v] for v in values}
        tot0 = sum(w0.values())
        group = (z == 1) & (d == dose)
        if not group.any():
            raise EstimationError(f"no treated units with dose {'H' if dose else 'L'}")
        if tot0 <= 0:
            raise EstimationError(f"stratum {s!r} has zero estimated share in every cell")
        mu0 = sum(w0[v] / tot0 * ybar0[v] for v in values)
        var0 = sum((w0[v] / tot0) ** 2 * v0[v] for v in values)
        if assumption is AssumptionSet.WEAK_PI:
            mu1, var1, _ = _cell_stats(y[group])
            n_eff_1 = float(group.sum())
        else:
            w1 = {v: share[v] * p1[v] for v in values}
            tot1 = sum(w1.values())
            mu1 = sum(w1[v] / tot1 * ybar1[v] for v in values)
            var1 = sum((w1[v] / tot1) ** 2 * v1[v] for v in values)
            n_eff_1 = float(sum(share[v] * ((z == 1) & (x == v)).sum() for v in values))
        itt = mu1 - mu0
        se = math.sqrt(var1 + var0)
        lo, hi = normal_ci(itt, se, level)
        n_eff_0 = float(sum(share[v] * ((z == 0) & (x == v)).sum() for v in values))
        strata[s] = StratumEstimate(mu1, mu0, itt, se, lo, hi, n_eff_1, n_eff_0)
    meta = {"pi_h_by_cell": {repr(float(v)): pi_h[v] for v in values}}
    return EstimateSet(strata, assumption, "plugin", level, metadata=meta)


@dataclass
class ImplicationTest:
    """Contrast between the direct and score-weighted treated-arm stratum means."""

    statistic: dict[str, float]
    se: dict[str, float]
    z: dict[str, float]
    p_value: dict[str, float]
    alpha: float
    n_boot: int

    def reject(self, stratum: str) -> bool:
        return self.p_value[stratum] < self.alpha

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "se": self.se, "z": self.z, "p_value": self.p_value,
                "alpha": self.alpha, "n_boot": self.n_boot,
                "reject": {s: self.reject(s) for s in self.statistic}}


def _implication_stats(d1, y1, pi1) -> dict[str, float]:
    out = {}
    for s, dose, w in (("h", 1, pi1), ("l", 0, 1 - pi1)):
        direct = y1[d1 == dose].mean()
        weighted = np.dot(w, y1) / w.sum()
        out[s] = float(direct - weighted)
    return out


def strong_pi_implication_test(dataset: Dataset, scores: PrincipalScoreSet | None = None, n_boot: int = 200,
                               seed: int = 0, alpha: float = 0.05) -> ImplicationTest:
    """Test the treated-side half of Strong PI.

    Under Strong PI the observed High-Taker treated mean and the score-weighted
    treated mean estimate the same quantity.  The statistic is their
    difference; its standard error comes from resampling treated units.  When
    ``scores`` is None the score model is refit in every replicate.  Rejection
    says nothing about the control-side half of the assumption.
    """
    _require_onesided(dataset, scores)
    treated = np.flatnonzero(dataset.z == 1)
    d1, y1 = dataset.d[treated], dataset.y[treated]
    if not (np.any(d1 == 1) and np.any(d1 == 0)):
        raise EstimationError("need treated units at both doses")

    def pis(idx):
        if scores is not None:
            return scores.pi[treated][idx]
        x1 = dataset.x[treated][idx]
        model = fit_logit(x1, d1[idx])
        if model.separated:
            raise EstimationError("separated score model in replicate")
        return expit(model.linear_predictor(x1))

    base = _implication_stats(d1, y1, pis(np.arange(len(treated))))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    draws = {s: [] for s in base}
    for _ in range(n_boot):
        idx = rng.integers(0, len(treated), size=len(treated))
        if not (np.any(d1[idx] == 1) and np.any(d1[idx] == 0)):
            continue
        try:
            st = _implication_stats(d1[idx], y1[idx], pis(idx))
        except EstimationError:
            continue
        for s, v in st.items():
            draws[s].append(v)
    se = {s: float(np.std(v, ddof=1)) for s, v in draws.items()}
    zs = {s: (base[s] / se[s] if se[s] > 0 else (0.0 if base[s] == 0 else math.copysign(math.inf, base[s])))
          for s in base}
    pv = {s: float(2 * stats.norm.sf(abs(zs[s]))) for s in base}
    return ImplicationTest(base, se, zs, pv, alpha, n_boot)

