"""Covariate balance checks for principal score models."""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, Design, EstimationError
from .pscore import PrincipalScoreSet
from .twosided import twosided_weights

__all__ = [
    "BalanceMode",
    "BalanceRow",
    "SparseBinWarning",
    "balance_report_twosided",
    "balance_within_bins_onesided",
    "normalized_difference",
    "weighted_moments",
    "write_balance_csv",
    "write_plot_data",
]


class SparseBinWarning(UserWarning):
    pass


class BalanceMode(str, enum.Enum):
    OBSERVED_VS_OBSERVED = "observed-vs-observed"
    OBSERVED_VS_PREDICTED = "observed-vs-predicted"
    PREDICTED_VS_OBSERVED = "predicted-vs-observed"
    PREDICTED_VS_PREDICTED = "predicted-vs-predicted"


def normalized_difference(mean_t: float, mean_c: float, sd_t: float, sd_c: float) -> float:
    """``(mean_t - mean_c) / sqrt((sd_t**2 + sd_c**2) / 2)``."""
    if sd_t < 0 or sd_c < 0:
        raise ValueError("standard deviations must be nonnegative")
    if sd_t == 0 and sd_c == 0:
        raise ValueError("normalized difference is undefined when both standard deviations are 0")
    return (mean_t - mean_c) / math.sqrt((sd_t**2 + sd_c**2) / 2)


def weighted_moments(x, w) -> tuple[float, float]:
    """Weighted mean and standard deviation (divisor ``sum(w)``)."""
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    total = w.sum()
    if not total > 0:
        raise EstimationError("zero weight mass")
    mean = float(np.dot(w, x) / total)
    var = float(np.dot(w, (x - mean) ** 2) / total)
    return mean, math.sqrt(max(var, 0.0))


@dataclass
class BalanceRow:
    covariate: str
    stratum: str
    mode: BalanceMode
    mean_t: float
    mean_c: float
    sd_t: float
    sd_c: float
    delta: float
    defined: bool = True
    n_t: float = math.nan
    n_c: float = math.nan

    @classmethod
    def build(cls, covariate, stratum, mode, mean_t, mean_c, sd_t, sd_c, n_t=math.nan, n_c=math.nan):
        if sd_t == 0 and sd_c == 0:
            return cls(covariate, stratum, mode, mean_t, mean_c, sd_t, sd_c, math.nan, False, n_t, n_c)
        return cls(covariate, stratum, mode, mean_t, mean_c, sd_t, sd_c,
                   normalized_difference(mean_t, mean_c, sd_t, sd_c), True, n_t, n_c)


_MODES = {
    "a": BalanceMode.PREDICTED_VS_OBSERVED,
    "c": BalanceMode.PREDICTED_VS_PREDICTED,
    "n": BalanceMode.OBSERVED_VS_PREDICTED,
}


def balance_report_twosided(dataset: Dataset, scores: PrincipalScoreSet) -> list[BalanceRow]:
    """Treated versus control covariate moments within each stratum.

    Both arms are weighted by the stratum's weak-PI weights, so observed
    strata (never-takers under treatment, always-takers under control) enter
    with weight one and the mixture cells are split by the scores.  Strata
    with no weight in either arm are skipped.
    """
    if dataset.design is not Design.TWO_SIDED:
        raise ValueError("balance_report_twosided needs a two-sided dataset")
    w = twosided_weights(dataset, scores)
    t, c = dataset.z == 1, dataset.z == 0
    rows = []
    for s in "acn":
        ws = w[s]
        if ws[t].sum() == 0 and ws[c].sum() == 0:
            continue
        for j, name in enumerate(dataset.covariate_names):
            mt, st = weighted_moments(dataset.x[t, j], ws[t])
            mc, sc = weighted_moments(dataset.x[c, j], ws[c])
            rows.append(BalanceRow.build(name, s, _MODES[s], mt, mc, st, sc, float(ws[t].sum()),
                                         float(ws[c].sum())))
    return rows


def balance_within_bins_onesided(dataset: Dataset, scores: PrincipalScoreSet, n_bins: int = 5) -> list[BalanceRow]:
    """Observed High versus Low Takers among treated units, within quantile bins of the score.

    Returns one row per covariate and bin (stratum ``"bin<k>"``) plus a pooled
    row per covariate (stratum ``"pooled"``) whose means, deviations and
    normalized difference are averages over the usable bins weighted by bin
    size.  Bins with fewer than two units at either dose are skipped with a
    warning.
    """
    if dataset.design is not Design.ONE_SIDED:
        raise ValueError("balance_within_bins_onesided needs a one-sided dataset")
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    treated = dataset.z == 1
    pi = scores.pi[treated]
    x = dataset.x[treated]
    high = dataset.d[treated] == 1
    edges = np.unique(np.quantile(pi, np.linspace(0, 1, n_bins + 1)))
    if len(edges) < 2:
        bins = np.zeros(len(pi), dtype=int)
    else:
        bins = np.clip(np.searchsorted(edges, pi, side="right") - 1, 0, len(edges) - 2)
    rows: list[BalanceRow] = []
    pooled: dict[str, list] = {name: [] for name in dataset.covariate_names}
    for b in np.unique(bins):
        in_bin = bins == b
        nh, nl = int((in_bin & high).sum()), int((in_bin & ~high).sum())
        if nh < 2 or nl < 2:
            warnings.warn(f"score bin {b} has {nh} High and {nl} Low Takers; skipped", SparseBinWarning,
                          stacklevel=2)
            continue
        for j, name in enumerate(dataset.covariate_names):
            xh, xl = x[in_bin & high, j], x[in_bin & ~high, j]
            row = BalanceRow.build(name, f"bin{b}", BalanceMode.OBSERVED_VS_OBSERVED, float(xh.mean()),
                                   float(xl.mean()), float(xh.std()), float(xl.std()), nh, nl)
            rows.append(row)
            pooled[name].append((nh + nl, row))
    for name, parts in pooled.items():
        if not parts:
            continue
        sizes = np.array([p[0] for p in parts], dtype=float)
        wts = sizes / sizes.sum()
        got = [p[1] for p in parts]
        defined = [r.defined for r in got]
        delta = float(sum(wi * r.delta for wi, r in zip(wts, got) if r.defined)
                      / max(sum(wi for wi, r in zip(wts, got) if r.defined), 1e-300)) if any(defined) else math.nan
        rows.append(BalanceRow(
            name, "pooled", BalanceMode.OBSERVED_VS_OBSERVED,
            float(sum(wi * r.mean_t for wi, r in zip(wts, got))),
            float(sum(wi * r.mean_c for wi, r in zip(wts, got))),
            float(sum(wi * r.sd_t for wi, r in zip(wts, got))),
            float(sum(wi * r.sd_c for wi, r in zip(wts, got))),
            delta, any(defined), float(sum(r.n_t for r in got)), float(sum(r.n_c for r in got)),
        ))
    return rows


def _fmt(v: float) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def write_balance_csv(rows: list[BalanceRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["covariate", "stratum", "mode", "mean_t", "mean_c", "sd_t", "sd_c", "delta", "defined"])
        for r in rows:
            writer.writerow([r.covariate, r.stratum, r.mode.value, _fmt(r.mean_t), _fmt(r.mean_c), _fmt(r.sd_t),
                             _fmt(r.sd_c), _fmt(r.delta), int(r.defined)])


def write_plot_data(rows: list[BalanceRow], path, threshold: float = 0.1) -> None:
    """Long-format normalized differences, one line per (stratum, covariate), for dot plots by stratum."""
    order = {name: i for i, name in enumerate(dict.fromkeys(r.covariate for r in rows))}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["panel", "covariate", "y_position", "delta", "abs_delta", "within_threshold"])
        for r in rows:
            within = "" if not r.defined else int(abs(r.delta) < threshold)
            writer.writerow([r.stratum, r.covariate, order[r.covariate], _fmt(r.delta),
                             _fmt(abs(r.delta)) if r.defined else "", within])
