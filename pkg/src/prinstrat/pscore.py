"""Principal score estimation.

One-sided scores come from a logistic regression of the dose on covariates
among treated units.  Two-sided scores come either from two marginal
logistic fits (one per arm) or from an EM fit of a multinomial model for
the latent strata, which keeps every complier score inside [0, 1].
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .data import Dataset, Design, EstimationError

__all__ = [
    "ClippingWarning",
    "EMInvariantError",
    "LogitModel",
    "MultinomialStrataModel",
    "PrincipalScoreSet",
    "SeparationWarning",
    "fit_logit",
    "fit_multinomial",
    "observed_loglik",
    "predict_proba",
    "pscore_cell",
    "pscore_onesided",
    "pscore_twosided_joint",
    "pscore_twosided_marginal",
]

RIDGE = 1e-10
SEPARATION_NORM = 30.0
MAX_CELLS = 20


class SeparationWarning(UserWarning):
    pass


class ClippingWarning(UserWarning):
    pass


class EMInvariantError(AssertionError):
    """The observed-data log-likelihood went down during EM; this is a bug trap."""


def _design_matrix(features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if x.size else x.reshape(0, 0)
    return np.column_stack([np.ones(x.shape[0]), x])


@dataclass
class LogitModel:
    coef: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float
    separated: bool = False

    def linear_predictor(self, features) -> np.ndarray:
        return _design_matrix(features) @ self.coef

    def to_dict(self) -> dict:
        return {"coef": self.coef.tolist(), "converged": self.converged, "iterations": self.iterations,
                "max_abs_score": self.max_abs_score, "separated": self.separated}


def _weighted_loglik(eta, y, w):
    return float(np.dot(w, y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def fit_logit(features, labels, weights=None, max_iter: int = 100, tol: float = 1e-8) -> LogitModel:
    """Weighted logistic regression by iteratively reweighted least squares.

    An intercept is prepended to ``features``.  Iteration stops once the
    largest absolute score component drops below ``tol``.  If the coefficient
    norm passes 30 the data are (quasi-)separated: the fit is returned with
    ``converged=False`` and ``separated=True`` rather than raising.
    """
    X = _design_matrix(features)
    y = np.asarray(labels, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    n, p = X.shape
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if n < p:
        raise ValueError(f"need at least {p} units for {p} coefficients, got {n}")
    pos = w > 0
    if not (np.any(y[pos] == 1) and np.any(y[pos] == 0)):
        # all positive-weight labels equal: the MLE is at infinity
        sign = 1.0 if np.all(y[pos] == 1) else -1.0
        coef = np.zeros(p)
        coef[0] = sign * SEPARATION_NORM
        return LogitModel(coef, False, 0, float("nan"), separated=True)

    beta = np.zeros(p)
    eta = X @ beta
    ll = _weighted_loglik(eta, y, w)
    score = X.T @ (w * (y - expit(eta)))
    it = 0
    while it < max_iter:
        max_score = float(np.max(np.abs(score)))
        if max_score < tol:
            return LogitModel(beta, True, it, max_score)
        mu = expit(eta)
        info = (X * (w * mu * (1 - mu))[:, None]).T @ X
        step = np.linalg.solve(info + RIDGE * np.eye(p), score)
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = X @ cand
            ll_c = _weighted_loglik(eta_c, y, w)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-6:
                break
            t /= 2
        beta, eta, ll = cand, eta_c, ll_c
        score = X.T @ (w * (y - expit(eta)))
        it += 1
        if np.linalg.norm(beta) > SEPARATION_NORM:
            return LogitModel(beta, False, it, float(np.max(np.abs(score))), separated=True)
    max_score = float(np.max(np.abs(score)))
    return LogitModel(beta, max_score < tol, it, max_score)


def predict_proba(model: LogitModel, x) -> np.ndarray | float:
    """Fitted probability ``expit(intercept + coef . x)`` for one unit or a matrix of units."""
    if not model.converged:
        raise EstimationError("cannot predict from a logistic model that did not converge")
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        return float(expit(model.coef[0] + np.dot(model.coef[1:], x)))
    return expit(model.linear_predictor(x))


@dataclass
class MultinomialStrataModel:
    """Multinomial logit for (always-taker, complier, never-taker); compliers are the reference."""

    coef_a: np.ndarray
    coef_n: np.ndarray
    active_a: bool = True
    active_n: bool = True
    loglik_trace: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    def proba(self, features) -> np.ndarray:
        X = _design_matrix(features)
        return _softmax_acn(X, self.coef_a, self.coef_n, self.active_a, self.active_n)

    def to_dict(self) -> dict:
        return {"coef_a": self.coef_a.tolist(), "coef_n": self.coef_n.tolist(),
                "active_a": self.active_a, "active_n": self.active_n,
                "converged": self.converged, "iterations": self.iterations,
                "loglik_trace": list(self.loglik_trace)}


def _softmax_acn(X, coef_a, coef_n, active_a=True, active_n=True) -> np.ndarray:
    n = X.shape[0]
    eta = np.zeros((n, 3))
    eta[:, 0] = X @ coef_a if active_a else -np.inf
    eta[:, 2] = X @ coef_n if active_n else -np.inf
    return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


def fit_multinomial(features, resp, active=(True, True), init=None, max_iter: int = 200,
                    tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Maximize ``sum_i sum_s resp[i, s] log p_s(x_i)`` over a (a, c, n) multinomial logit.

    ``resp`` holds per-unit soft stratum memberships (columns a, c, n).
    Strata flagged inactive are fixed at probability zero.  Returns the
    coefficient vectors for a and n (zeros when inactive).
    """
    X = _design_matrix(features)
    R = np.asarray(resp, dtype=float)
    n, p = X.shape
    cols = [s for s, on in zip((0, 2), active) if on]
    m = len(cols)
    coef = {0: np.zeros(p), 2: np.zeros(p)}
    if init is not None:
        coef[0], coef[2] = np.array(init[0], dtype=float), np.array(init[1], dtype=float)
    if m == 0:
        return coef[0], coef[2]
    act_a, act_n = active

    def objective(ca, cn):
        P = _softmax_acn(X, ca, cn, act_a, act_n)
        with np.errstate(divide="ignore"):
            logp = np.log(P)
        mask = R > 0
        return float(np.sum(R[mask] * logp[mask])), P

    q, P = objective(coef[0], coef[2])
    for _ in range(max_iter):
        grad = np.concatenate([X.T @ (R[:, s] - P[:, s]) for s in cols])
        if np.max(np.abs(grad)) < tol:
            break
        H = np.zeros((m * p, m * p))
        for a_i, s in enumerate(cols):
            for b_i, t in enumerate(cols):
                v = P[:, s] * ((s == t) - P[:, t])
                H[a_i * p:(a_i + 1) * p, b_i * p:(b_i + 1) * p] = (X * v[:, None]).T @ X
        step = np.linalg.solve(H + RIDGE * np.eye(m * p), grad)
        t_len = 1.0
        while True:
            new = dict(coef)
            for a_i, s in enumerate(cols):
                new[s] = coef[s] + t_len * step[a_i * p:(a_i + 1) * p]
            q_new, P_new = objective(new[0], new[2])
            if q_new >= q - 1e-13 * abs(q) or t_len < 1e-8:
                break
            t_len /= 2
        improved = q_new - q
        coef, q, P = new, q_new, P_new
        if np.linalg.norm(np.concatenate([coef[s] for s in cols])) > 10 * SEPARATION_NORM:
            break
        if 0 <= improved < 1e-14 * max(1.0, abs(q)):
            break
    return coef[0], coef[2]


@dataclass
class PrincipalScoreSet:
    """Per-unit stratum probabilities.

    Columns follow ``strata``: ``("h", "l")`` for one-sided designs and
    ``("a", "c", "n")`` for two-sided ones.  ``pre_clip_c`` keeps the
    complier scores before clipping when the marginal or cell method
    produced values below zero.
    """

    design: Design
    method: str
    strata: tuple[str, ...]
    probs: np.ndarray
    models: dict = field(default_factory=dict)
    pre_clip_c: np.ndarray | None = None
    n_clipped: int = 0
    separated: bool = False

    def __getitem__(self, stratum: str) -> np.ndarray:
        return self.probs[:, self.strata.index(stratum)]

    @property
    def pi(self) -> np.ndarray:
        """One-sided shorthand: probability of being a High Taker."""
        return self["h"]

    def __len__(self) -> int:
        return self.probs.shape[0]

    def proportions(self) -> dict[str, float]:
        return {s: float(self.probs[:, j].mean()) for j, s in enumerate(self.strata)}

    def metadata(self) -> dict:
        models = {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in self.models.items()}
        return {"design": self.design.value, "method": self.method, "strata": list(self.strata),
                "n_units": len(self), "n_clipped": self.n_clipped, "separated": self.separated,
                "proportions": self.proportions(), "models": models}

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["unit_index", *(f"pi_{s}" for s in self.strata)])
            for i, row in enumerate(self.probs):
                writer.writerow([i, *(repr(float(v)) for v in row)])

    def write_sidecar(self, path) -> None:
        Path(path).write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_arrays(cls, design, columns: dict[str, np.ndarray], method: str = "given") -> "PrincipalScoreSet":
        """Wrap user-supplied scores, e.g. ``{"h": pi}`` or ``{"a": .., "c": .., "n": ..}``."""
        design = Design.parse(design)
        if design is Design.ONE_SIDED:
            h = np.asarray(columns["h"], dtype=float)
            probs = np.column_stack([h, 1 - h])
            strata = ("h", "l")
        else:
            probs = np.column_stack([np.asarray(columns[s], dtype=float) for s in "acn"])
            strata = ("a", "c", "n")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("scores must lie in [0, 1]")
        if np.max(np.abs(probs.sum(axis=1) - 1)) > 1e-10:
            raise ValueError("scores must sum to 1 for every unit")
        return cls(design, method, strata, probs)


def _clip_complier(pa: np.ndarray, pn: np.ndarray):
    """Set negative complier scores to 0 and rescale (a, n) proportionally."""
    pc = 1.0 - pa - pn
    neg = pc < 0
    pa, pn = pa.copy(), pn.copy()
    if np.any(neg):
        total = pa[neg] + pn[neg]
        pa[neg] /= total
        pn[neg] /= total
    pc_post = np.where(neg, 0.0, pc)
    return pa, pc_post, pn, pc, int(neg.sum())


def _twosided_set(method, pa, pn, models, separated=False) -> PrincipalScoreSet:
    pa, pc, pn, pre, n_clip = _clip_complier(pa, pn)
    if n_clip:
        warnings.warn(f"{n_clip} unit(s) had negative complier scores; clipped to 0 and renormalized",
                      ClippingWarning, stacklevel=3)
    return PrincipalScoreSet(Design.TWO_SIDED, method, ("a", "c", "n"), np.column_stack([pa, pc, pn]),
                             models=models, pre_clip_c=pre, n_clipped=n_clip, separated=separated)


def pscore_onesided(dataset: Dataset) -> PrincipalScoreSet:
    """High-Taker scores from a logistic fit of the dose on covariates among treated units."""
    if dataset.design is not Design.ONE_SIDED:
        raise ValueError("pscore_onesided needs a one-sided dataset")
    treated = dataset.z == 1
    d1 = dataset.d[treated]
    if (d1 == 1).sum() < 2 or (d1 == 0).sum() < 2:
        raise EstimationError("need at least 2 treated units at each dose to fit the principal score")
    model = fit_logit(dataset.x[treated], d1)
    if model.separated:
        warnings.warn("principal score model is separated; scores are at the boundary", SeparationWarning,
                      stacklevel=2)
    pi = expit(model.linear_predictor(dataset.x))
    return PrincipalScoreSet(Design.ONE_SIDED, "marginal", ("h", "l"), np.column_stack([pi, 1 - pi]),
                             models={"h": model}, separated=model.separated)


def _cell_keys(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys, inverse = np.unique(x, axis=0, return_inverse=True)
    return keys, inverse.reshape(-1)


def _cell_name(names, key) -> str:
    return "(" + ", ".join(f"{n}={float(v):g}" for n, v in zip(names, key)) + ")"


def pscore_cell(dataset: Dataset, columns=None) -> PrincipalScoreSet:
    """Nonparametric scores: stratum proportions within each joint covariate cell."""
    cols = list(range(dataset.k)) if columns is None else list(columns)
    x = dataset.x[:, cols]
    names = [dataset.covariate_names[j] for j in cols]
    if x.shape[1] == 0:
        x = np.zeros((dataset.n, 1))
        names = ["(none)"]
    keys, cell = _cell_keys(x)
    if len(keys) > MAX_CELLS:
        raise ValueError(f"{len(keys)} distinct covariate cells; the cell method allows at most {MAX_CELLS}")
    z, d = dataset.z, dataset.d
    if dataset.design is Design.ONE_SIDED:
        pi_cell = np.empty(len(keys))
        for c, key in enumerate(keys):
            t = (cell == c) & (z == 1)
            if not t.any():
                raise EstimationError(f"covariate cell {_cell_name(names, key)} has no treated units")
            pi_cell[c] = np.mean(d[t] == 1)
        pi = pi_cell[cell]
        return PrincipalScoreSet(Design.ONE_SIDED, "cell", ("h", "l"), np.column_stack([pi, 1 - pi]),
                                 models={"cells": keys.tolist(), "pi_h": pi_cell.tolist()})
    pa_cell, pn_cell = np.empty(len(keys)), np.empty(len(keys))
    for c, key in enumerate(keys):
        ctrl = (cell == c) & (z == 0)
        trt = (cell == c) & (z == 1)
        if not ctrl.any() or not trt.any():
            raise EstimationError(f"covariate cell {_cell_name(names, key)} is missing units in one arm")
        pa_cell[c] = np.mean(d[ctrl] == 1)
        pn_cell[c] = np.mean(d[trt] == 0)
    return _twosided_set("cell", pa_cell[cell], pn_cell[cell],
                         {"cells": keys.tolist(), "pi_a": pa_cell.tolist(), "pi_n": pn_cell.tolist()})


def pscore_twosided_marginal(dataset: Dataset) -> PrincipalScoreSet:
    """Always-taker scores from controls, never-taker scores from treateds, compliers by subtraction."""
    if dataset.design is not Design.TWO_SIDED:
        raise ValueError("pscore_twosided_marginal needs a two-sided dataset")
    z, d = dataset.z, dataset.d
    for arm in (0, 1):
        if len(np.unique(d[z == arm])) < 2:
            raise EstimationError(
                f"every unit with z={arm} has the same treatment received; the design is effectively "
                "one-sided, use the one-sided score path on relabeled data"
            )
    ctrl, trt = z == 0, z == 1
    model_a = fit_logit(dataset.x[ctrl], d[ctrl])
    model_t = fit_logit(dataset.x[trt], d[trt])
    separated = model_a.separated or model_t.separated
    if separated:
        warnings.warn("a marginal principal score model is separated", SeparationWarning, stacklevel=2)
    pa = expit(model_a.linear_predictor(dataset.x))
    pn = 1.0 - expit(model_t.linear_predictor(dataset.x))
    return _twosided_set("marginal", pa, pn, {"a": model_a, "d_given_treated": model_t}, separated)


def observed_loglik(dataset: Dataset, P: np.ndarray) -> float:
    """Observed-data log-likelihood of stratum probabilities ``P`` (columns a, c, n)."""
    z, d = dataset.z, dataset.d
    with np.errstate(divide="ignore"):
        terms = np.where(
            (z == 1) & (d == 0), np.log(P[:, 2]),
            np.where((z == 0) & (d == 1), np.log(P[:, 0]),
                     np.where(z == 1, np.log(P[:, 0] + P[:, 1]), np.log(P[:, 2] + P[:, 1]))))
    return float(np.sum(terms))


def _e_step(dataset: Dataset, P: np.ndarray) -> np.ndarray:
    z, d = dataset.z, dataset.d
    R = np.zeros_like(P)
    R[(z == 1) & (d == 0), 2] = 1.0
    R[(z == 0) & (d == 1), 0] = 1.0
    m11 = (z == 1) & (d == 1)
    s = P[m11, 0] + P[m11, 1]
    R[m11, 0] = P[m11, 0] / s
    R[m11, 1] = P[m11, 1] / s
    m00 = (z == 0) & (d == 0)
    s = P[m00, 2] + P[m00, 1]
    R[m00, 2] = P[m00, 2] / s
    R[m00, 1] = P[m00, 1] / s
    return R


def pscore_twosided_joint(dataset: Dataset, init: np.ndarray | None = None, max_iter: int = 500,
                          tol: float = 1e-8) -> PrincipalScoreSet:
    """Joint principal scores by EM over the latent strata.

    Units with (z=1, d=0) are never-takers and units with (z=0, d=1) are
    always-takers.  The ambiguous cells get posterior memberships in the
    E-step; the M-step refits a weighted multinomial logit on all units,
    ignoring assignment.  ``init`` optionally supplies starting stratum
    probabilities (N x 3, columns a, c, n) for the ambiguous units; by
    default the marginal-method scores are used, or an even split if that
    fit fails.
    """
    if dataset.design is not Design.TWO_SIDED:
        raise ValueError("pscore_twosided_joint needs a two-sided dataset")
    z, d = dataset.z, dataset.d
    active = (bool(np.any((z == 0) & (d == 1))), bool(np.any((z == 1) & (d == 0))))

    if init is None:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                start = pscore_twosided_marginal(dataset).probs
        except (EstimationError, ValueError, np.linalg.LinAlgError):
            start = np.full((dataset.n, 3), 1.0 / 3)
    else:
        start = np.asarray(init, dtype=float)
    start = start.copy()
    if not active[0]:
        start[:, 0] = 0.0
    if not active[1]:
        start[:, 2] = 0.0
    start[:, 1] = np.maximum(start[:, 1], 1e-6)
    start /= start.sum(axis=1, keepdims=True)
    R = _e_step(dataset, start)

    coef_a = coef_n = None
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        init_coef = None if coef_a is None else (coef_a, coef_n)
        coef_a, coef_n = fit_multinomial(dataset.x, R, active=active, init=init_coef)
        P = _softmax_acn(_design_matrix(dataset.x), coef_a, coef_n, *active)
        ll = observed_loglik(dataset, P)
        if trace and ll < trace[-1] - tol:
            raise EMInvariantError(f"EM log-likelihood decreased from {trace[-1]!r} to {ll!r} at iteration {it}")
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
        R = _e_step(dataset, P)
    model = MultinomialStrataModel(coef_a, coef_n, active[0], active[1], trace, converged, it)
    mass = R.sum(axis=0)
    for s, label in zip(range(3), "acn"):
        if (s != 0 or active[0]) and (s != 2 or active[1]) and mass[s] <= 0:
            warnings.warn(f"EM left no posterior mass in stratum {label!r}", RuntimeWarning, stacklevel=2)
    return PrincipalScoreSet(Design.TWO_SIDED, "joint", ("a", "c", "n"), P, models={"joint": model})
