"""Two-sided noncompliance under monotonicity: always-takers, compliers, never-takers."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import AssumptionSet, Dataset, Design, EstimateSet, EstimationError, StratumEstimate
from .inference import arm_variance, normal_ci
from .onesided import weighted_contrast
from .pscore import PrincipalScoreSet

__all__ = [
    "COMPLIER_GUARD",
    "StrataProportions",
    "TwoSidedWeights",
    "estimate_iv_both_er",
    "estimate_strong_twosided",
    "estimate_weak_er_nt",
    "estimate_weak_twosided",
    "strata_proportions",
    "twosided_weights",
]

# below this complier share the mixture inversions blow up
COMPLIER_GUARD = 0.02


@dataclass(frozen=True)
class StrataProportions:
    pi_a: float
    pi_c: float
    pi_n: float

    def as_dict(self) -> dict[str, float]:
        return {"a": self.pi_a, "c": self.pi_c, "n": self.pi_n}


def _require_twosided(dataset: Dataset, scores: PrincipalScoreSet | None = None) -> None:
    if dataset.design is not Design.TWO_SIDED:
        raise ValueError("this estimator needs a two-sided dataset")
    if scores is not None:
        if len(scores) != dataset.n:
            raise ValueError(f"{len(scores)} scores for {dataset.n} units")
        if np.max(np.abs(scores.probs.sum(axis=1) - 1)) > 1e-10:
            raise ValueError("principal scores must sum to 1 for every unit")


def strata_proportions(dataset: Dataset) -> StrataProportions:
    """Overall stratum shares from the arm-wise take-up rates."""
    _require_twosided(dataset)
    z, d = dataset.z, dataset.d
    pi_a = float(np.mean(d[z == 0] == 1))
    pi_n = float(np.mean(d[z == 1] == 0))
    pi_c = 1.0 - pi_a - pi_n
    if pi_c <= 0:
        raise EstimationError(
            f"estimated complier share {pi_c:.4g} is not positive; monotonicity or the design is violated"
        )
    return StrataProportions(pi_a, pi_c, pi_n)


@dataclass(frozen=True)
class TwoSidedWeights:
    a: np.ndarray
    c: np.ndarray
    n: np.ndarray

    def __getitem__(self, stratum: str) -> np.ndarray:
        return getattr(self, stratum)


def twosided_weights(dataset: Dataset, scores: PrincipalScoreSet) -> TwoSidedWeights:
    """Weak-PI weights: observed strata get 0/1, the two mixture cells split by score ratios."""
    _require_twosided(dataset, scores)
    z, d = dataset.z, dataset.d
    pa, pc, pn = scores["a"], scores["c"], scores["n"]
    m11 = (z == 1) & (d == 1)
    m00 = (z == 0) & (d == 0)
    denom11 = pc + pa
    denom00 = pc + pn
    if np.any(denom11[m11] <= 0):
        raise EstimationError("a (z=1, d=1) unit has zero complier and always-taker score")
    if np.any(denom00[m00] <= 0):
        raise EstimationError("a (z=0, d=0) unit has zero complier and never-taker score")
    with np.errstate(invalid="ignore", divide="ignore"):
        r11 = np.where(m11, pa / denom11, 0.0)
        r00 = np.where(m00, pn / denom00, 0.0)
    w_a = np.where(m11, r11, 0.0) + ((z == 0) & (d == 1))
    w_n = np.where(m00, r00, 0.0) + ((z == 1) & (d == 0))
    w_c = np.where(m11, 1.0 - r11, 0.0) + np.where(m00, 1.0 - r00, 0.0)
    return TwoSidedWeights(w_a.astype(float), w_c.astype(float), w_n.astype(float))


def _contrasts(dataset: Dataset, weights: dict[str, np.ndarray], level: float) -> dict[str, StratumEstimate]:
    out = {}
    for s, w in weights.items():
        m1 = w[dataset.z == 1].sum()
        m0 = w[dataset.z == 0].sum()
        if m1 == 0 and m0 == 0:
            # stratum absent from both data and scores
            continue
        try:
            out[s] = weighted_contrast(dataset.z, dataset.y, w, level)
        except EstimationError:
            raise EstimationError(f"stratum {s!r} has zero weight mass in one arm") from None
    return out


def estimate_strong_twosided(dataset: Dataset, scores: PrincipalScoreSet, level: float = 0.95) -> EstimateSet:
    """Strong PI: both arms weighted by the stratum score, ignoring treatment received."""
    _require_twosided(dataset, scores)
    strata = _contrasts(dataset, {s: scores[s] for s in "acn"}, level)
    return EstimateSet(strata, AssumptionSet.STRONG_PI, "weighting", level,
                       metadata={"score_method": scores.method, "score_separated": scores.separated})


def estimate_weak_twosided(dataset: Dataset, scores: PrincipalScoreSet, level: float = 0.95) -> EstimateSet:
    """Weak PI: weighted difference in means with :func:`twosided_weights`."""
    w = twosided_weights(dataset, scores)
    strata = _contrasts(dataset, {"a": w.a, "c": w.c, "n": w.n}, level)
    return EstimateSet(strata, AssumptionSet.WEAK_PI, "weighting", level,
                       metadata={"score_method": scores.method, "score_separated": scores.separated})


def _cell_mean_var(dataset: Dataset, z: int, d: int) -> tuple[float, float, int]:
    mask = dataset.cell(z, d)
    n = int(mask.sum())
    if n == 0:
        return math.nan, 0.0, 0
    y = dataset.y[mask]
    m = float(y.mean())
    return m, float(np.mean((y - m) ** 2)) / n, n


def _guarded_proportions(dataset: Dataset) -> StrataProportions:
    props = strata_proportions(dataset)
    if props.pi_c <= COMPLIER_GUARD:
        raise EstimationError(
            f"complier share {props.pi_c:.4g} is at or below {COMPLIER_GUARD}; the mixture inversion is "
            "numerically unstable (weak instrument)"
        )
    return props


def _control_side(dataset: Dataset, props: StrataProportions):
    """Complier control mean from the never-taker exclusion restriction, plus observed cell means."""
    y00, v00, n00 = _cell_mean_var(dataset, 0, 0)
    y10, v10, n10 = _cell_mean_var(dataset, 1, 0)
    y01, v01, n01 = _cell_mean_var(dataset, 0, 1)
    if n00 == 0:
        raise EstimationError("empty (z=0, d=0) cell")
    c00 = (props.pi_c + props.pi_n) / props.pi_c
    c10 = props.pi_n / props.pi_c
    mu_c0 = y00 * c00 - (y10 * c10 if n10 else 0.0)
    var_c0 = c00**2 * v00 + (c10**2 * v10 if n10 else 0.0)
    y = dataset.y
    if not (y.min() <= mu_c0 <= y.max()):
        warnings.warn(f"complier control mean {mu_c0:.4g} lies outside the observed outcome range",
                      RuntimeWarning, stacklevel=3)
    return {"mu_c0": mu_c0, "var_c0": var_c0, "y10": y10, "v10": v10, "n10": n10,
            "y01": y01, "v01": v01, "n01": n01, "n00": n00}


def _make(mu1, mu0, var, level, n1, n0) -> StratumEstimate:
    itt = mu1 - mu0
    se = math.sqrt(var)
    lo, hi = normal_ci(itt, se, level)
    return StratumEstimate(mu1, mu0, itt, se, lo, hi, float(n1), float(n0))


def _excluded(mean, var, n1, n0) -> StratumEstimate:
    # exclusion restriction: same mean in both arms, effect fixed at 0
    return StratumEstimate(mean, mean, 0.0, 0.0, 0.0, 0.0, float(n1), float(n0))


def estimate_weak_er_nt(dataset: Dataset, scores: PrincipalScoreSet, level: float = 0.95) -> EstimateSet:
    """Weak PI for compliers and always-takers plus the exclusion restriction for never-takers.

    Treated-side complier and always-taker means split the (z=1, d=1) cell by
    ``phi = pi_c / (pi_c + pi_a)``; the complier control mean inverts the
    (z=0, d=0) mixture using the never-taker mean observed in (z=1, d=0).
    Overall shares come from :func:`strata_proportions`.
    """
    _require_twosided(dataset, scores)
    props = _guarded_proportions(dataset)
    m11 = dataset.cell(1, 1)
    if not m11.any():
        raise EstimationError("empty (z=1, d=1) cell")
    ctrl = _control_side(dataset, props)
    pa, pc = scores["a"][m11], scores["c"][m11]
    denom = pa + pc
    if np.any(denom <= 0):
        raise EstimationError("a (z=1, d=1) unit has zero complier and always-taker score")
    phi = pc / denom
    y11 = dataset.y[m11]
    if phi.sum() <= 0:
        raise EstimationError("complier weights in the (z=1, d=1) cell sum to 0")
    mu_c1 = float(np.dot(phi, y11) / phi.sum())
    var_c1 = arm_variance(phi, y11)
    strata = {"c": _make(mu_c1, ctrl["mu_c0"], var_c1 + ctrl["var_c0"], level, phi.sum(),
                         ctrl["n00"] * props.pi_c / (props.pi_c + props.pi_n))}
    if ctrl["n01"]:
        wa = 1.0 - phi
        if wa.sum() <= 0:
            raise EstimationError("always-takers observed under control but none weighted under treatment")
        mu_a1 = float(np.dot(wa, y11) / wa.sum())
        strata["a"] = _make(mu_a1, ctrl["y01"], arm_variance(wa, y11) + ctrl["v01"], level, wa.sum(), ctrl["n01"])
    if ctrl["n10"]:
        strata["n"] = _excluded(ctrl["y10"], ctrl["v10"], ctrl["n10"], ctrl["n00"] * props.pi_n
                                / (props.pi_c + props.pi_n))
    return EstimateSet(strata, AssumptionSet.WEAK_PI_ER_NT, "weighting", level,
                       metadata={"proportions": props.as_dict(), "score_method": scores.method,
                                 "score_separated": scores.separated})


def estimate_iv_both_er(dataset: Dataset, level: float = 0.95) -> EstimateSet:
    """Standard instrumental-variables estimates: exclusion restrictions for both always- and never-takers.

    The complier effect equals the Wald ratio ``(mean(Y|Z=1) - mean(Y|Z=0)) / pi_c``.
    """
    _require_twosided(dataset)
    props = _guarded_proportions(dataset)
    ctrl = _control_side(dataset, props)
    y11, v11, n11 = _cell_mean_var(dataset, 1, 1)
    if n11 == 0:
        raise EstimationError("empty (z=1, d=1) cell")
    c11 = (props.pi_c + props.pi_a) / props.pi_c
    c01 = props.pi_a / props.pi_c
    y01 = ctrl["y01"] if ctrl["n01"] else 0.0
    mu_c1 = y11 * c11 - y01 * c01
    var_c1 = c11**2 * v11 + (c01**2 * ctrl["v01"] if ctrl["n01"] else 0.0)
    strata = {"c": _make(mu_c1, ctrl["mu_c0"], var_c1 + ctrl["var_c0"], level,
                         n11 * props.pi_c / (props.pi_c + props.pi_a),
                         ctrl["n00"] * props.pi_c / (props.pi_c + props.pi_n))}
    if ctrl["n01"]:
        strata["a"] = _excluded(ctrl["y01"], ctrl["v01"], n11 * props.pi_a / (props.pi_c + props.pi_a), ctrl["n01"])
    if ctrl["n10"]:
        strata["n"] = _excluded(ctrl["y10"], ctrl["v10"], ctrl["n10"],
                                ctrl["n00"] * props.pi_n / (props.pi_c + props.pi_n))
    return EstimateSet(strata, AssumptionSet.BOTH_ER, "iv", level, metadata={"proportions": props.as_dict()})
