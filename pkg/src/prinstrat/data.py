"""Core domain types: datasets, strata, assumption sets and estimate containers."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "AssumptionSet",
    "DataError",
    "Dataset",
    "Design",
    "EstimateSet",
    "EstimationError",
    "StratumEstimate",
    "StratumLabel",
    "Violation",
    "load_dataset",
    "save_dataset",
    "validate",
]

MISSING_D = -1


class DataError(ValueError):
    """Raised when an input file or dataset violates the data contract."""


class EstimationError(RuntimeError):
    """Raised when an estimator cannot be evaluated on the given data."""


class Design(str, enum.Enum):
    ONE_SIDED = "one-sided"
    TWO_SIDED = "two-sided"

    @classmethod
    def parse(cls, value: "Design | str") -> "Design":
        if isinstance(value, Design):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key or member.name.lower().replace("_", "-") == key:
                return member
        raise ValueError(f"unknown design {value!r}; expected one of {[m.value for m in cls]}")


class StratumLabel(str, enum.Enum):
    HIGH_TAKER = "h"
    LOW_TAKER = "l"
    ALWAYS_TAKER = "a"
    COMPLIER = "c"
    NEVER_TAKER = "n"

    @staticmethod
    def for_design(design: Design) -> tuple["StratumLabel", ...]:
        if Design.parse(design) is Design.ONE_SIDED:
            return (StratumLabel.HIGH_TAKER, StratumLabel.LOW_TAKER)
        return (StratumLabel.ALWAYS_TAKER, StratumLabel.COMPLIER, StratumLabel.NEVER_TAKER)


class AssumptionSet(str, enum.Enum):
    STRONG_PI = "strong-pi"
    WEAK_PI = "weak-pi"
    WEAK_PI_ER_NT = "weak-pi-er-nt"
    BOTH_ER = "both-er"

    @classmethod
    def parse(cls, value: "AssumptionSet | str") -> "AssumptionSet":
        if isinstance(value, AssumptionSet):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown assumption set {value!r}")

    def allowed(self, design: Design) -> bool:
        if self in (AssumptionSet.WEAK_PI_ER_NT, AssumptionSet.BOTH_ER):
            return Design.parse(design) is Design.TWO_SIDED
        return True

    def require(self, design: Design) -> None:
        if not self.allowed(design):
            raise ValueError(
                f"assumption {self.value!r} requires a two-sided design, got {Design.parse(design).value!r}"
            )


@dataclass(frozen=True)
class Violation:
    unit: int | None
    column: str
    message: str

    def __str__(self) -> str:
        where = "dataset" if self.unit is None else f"unit {self.unit}"
        return f"{where}, column {self.column!r}: {self.message}"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Per-unit assignment, receipt, outcome and covariates.

    ``d`` is coded 1/0 (H/L for one-sided, took/refused for two-sided) and
    ``-1`` where it is not defined (one-sided controls).  Arrays are stored
    read-only; use :func:`validate` to check the typed invariants.
    """

    design: Design
    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        design = Design.parse(self.design)
        z = np.asarray(self.z).astype(np.int64)
        d = np.asarray(self.d)
        if d.dtype.kind == "f":
            d = np.where(np.isnan(d), MISSING_D, d)
        d = d.astype(np.int64)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.size == 0:
            x = x.reshape(len(y), 0)
        names = tuple(self.covariate_names) if self.covariate_names else tuple(
            f"x{j + 1}" for j in range(x.shape[1])
        )
        n = len(y)
        if not (len(z) == len(d) == n == x.shape[0]):
            raise DataError("z, d, y and x must have the same number of units")
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} covariate names for {x.shape[1]} covariate columns")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "z", _readonly(z))
        object.__setattr__(self, "d", _readonly(d))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def k(self) -> int:
        return self.x.shape[1]

    def cell(self, z: int, d: int) -> np.ndarray:
        """Boolean mask of units with assignment ``z`` and receipt ``d``."""
        return (self.z == z) & (self.d == d)

    def cell_counts(self) -> dict[tuple[int, int], int]:
        return {(z, d): int(self.cell(z, d).sum()) for z in (0, 1) for d in (0, 1)}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.design, self.z[idx], self.d[idx], self.y[idx], self.x[idx], self.covariate_names)

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self.design, self.z, self.d, y, self.x, self.covariate_names)

    def to_frame(self):
        import pandas as pd

        frame = pd.DataFrame({"z": self.z, "d": self.d, "y": self.y})
        frame["d"] = frame["d"].where(frame["d"] != MISSING_D)
        for j, name in enumerate(self.covariate_names):
            frame[name] = self.x[:, j]
        return frame


def validate(dataset: Dataset) -> list[Violation]:
    """List every invariant violation; an empty list means the dataset is valid."""
    out: list[Violation] = []
    for i in np.flatnonzero(~np.isin(dataset.z, (0, 1))):
        out.append(Violation(int(i), "z", f"assignment must be 0 or 1, got {dataset.z[i]}"))
    for i in np.flatnonzero(~np.isfinite(dataset.y)):
        out.append(Violation(int(i), "y", "outcome is not finite"))
    bad_x = ~np.isfinite(dataset.x)
    for i, j in zip(*np.nonzero(bad_x)):
        out.append(Violation(int(i), dataset.covariate_names[j], "covariate is not finite"))
    if dataset.design is Design.ONE_SIDED:
        for i in np.flatnonzero((dataset.z == 0) & (dataset.d != MISSING_D)):
            out.append(Violation(int(i), "d", "dose must be empty for a one-sided control unit"))
        for i in np.flatnonzero((dataset.z == 1) & ~np.isin(dataset.d, (0, 1))):
            out.append(Violation(int(i), "d", "treated unit needs a dose (H/L or 1/0)"))
    else:
        for i in np.flatnonzero(~np.isin(dataset.d, (0, 1))):
            out.append(Violation(int(i), "d", "treatment received must be 0 or 1"))
    for arm in (0, 1):
        if not np.any(dataset.z == arm):
            out.append(Violation(None, "z", f"no units with z={arm}"))
    return out


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {column!r}: non-numeric value {text!r}") from None
    return value


def load_dataset(path, design: Design | str, min_per_arm: int = 2) -> Dataset:
    """Read and validate a ``z,d,y,x1..xk`` delimited text file.

    The delimiter is sniffed among comma, semicolon and tab.  One-sided files
    may code the dose as ``H``/``L`` or ``1``/``0``; controls leave ``d``
    empty.  Covariates must already be numeric 0/1 indicators or reals.
    """
    design = Design.parse(design)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        text = fh.read()
    try:
        dialect = csv.Sniffer().sniff(text.splitlines()[0] if text else "", delimiters=",;\t")
    except csv.Error:
        dialect = csv.excel
    rows = list(csv.reader(text.splitlines(), dialect))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for col in ("z", "y"):
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    if "d" not in header and design is Design.TWO_SIDED:
        raise DataError(f"{path}: missing column 'd'")
    covs = [h for h in header if h not in ("z", "d", "y")]
    pos = {h: i for i, h in enumerate(header)}

    z, d, y, x = [], [], [], []
    for r, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataError(f"row {r}: expected {len(header)} fields, got {len(row)}")
        zv = _parse_float(row[pos["z"]].strip(), r, "z")
        if zv not in (0.0, 1.0):
            raise DataError(f"row {r}, column 'z': assignment must be 0 or 1, got {row[pos['z']]!r}")
        z.append(int(zv))
        raw_d = row[pos["d"]].strip() if "d" in pos else ""
        if raw_d == "":
            if design is Design.TWO_SIDED or zv == 1:
                raise DataError(f"row {r}, column 'd': missing treatment received")
            d.append(MISSING_D)
        else:
            if design is Design.ONE_SIDED and zv == 0:
                raise DataError(f"row {r}, column 'd': dose present for a one-sided control unit")
            up = raw_d.upper()
            if design is Design.ONE_SIDED and up in ("H", "L"):
                d.append(1 if up == "H" else 0)
            else:
                dv = _parse_float(raw_d, r, "d")
                if dv not in (0.0, 1.0):
                    raise DataError(f"row {r}, column 'd': expected 0/1, got {raw_d!r}")
                d.append(int(dv))
        yv = _parse_float(row[pos["y"]].strip(), r, "y")
        if not math.isfinite(yv):
            raise DataError(f"row {r}, column 'y': outcome is not finite")
        y.append(yv)
        xr = []
        for c in covs:
            v = _parse_float(row[pos[c]].strip(), r, c)
            if not math.isfinite(v):
                raise DataError(f"row {r}, column {c!r}: covariate is not finite")
            xr.append(v)
        x.append(xr)

    z_arr = np.array(z, dtype=np.int64)
    for arm in (0, 1):
        if int((z_arr == arm).sum()) < min_per_arm:
            raise DataError(f"{path}: fewer than {min_per_arm} units with z={arm}")
    ds = Dataset(design, z_arr, np.array(d, dtype=np.int64), np.array(y, dtype=float),
                 np.array(x, dtype=float).reshape(len(y), len(covs)), tuple(covs))
    problems = validate(ds)
    if problems:
        raise DataError("; ".join(str(p) for p in problems))
    return ds


def save_dataset(dataset: Dataset, path) -> None:
    """Write ``dataset`` so that :func:`load_dataset` reproduces it bit for bit."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["z", "d", "y", *dataset.covariate_names])
        for i in range(dataset.n):
            di = int(dataset.d[i])
            writer.writerow([
                int(dataset.z[i]),
                "" if di == MISSING_D else di,
                repr(float(dataset.y[i])),
                *(repr(float(v)) for v in dataset.x[i]),
            ])


@dataclass
class StratumEstimate:
    mu1: float
    mu0: float
    itt: float
    se: float
    ci_lo: float
    ci_hi: float
    n_eff_1: float
    n_eff_0: float

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.__dict__.items()}


@dataclass
class EstimateSet:
    """Per-stratum means, impacts and intervals, tagged with how they were made."""

    strata: dict[str, StratumEstimate]
    assumption: AssumptionSet | None
    method: str
    level: float = 0.95
    ci_method: str = "analytic"
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> StratumEstimate:
        return self.strata[key]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "assumption": None if self.assumption is None else self.assumption.value,
            "level": self.level,
            "ci_method": self.ci_method,
            "strata": {s: e.as_dict() for s, e in self.strata.items()},
            "metadata": self.metadata,
        }

    def to_json(self, path=None, **extra) -> str:
        payload = self.to_dict()
        payload.update(extra)
        text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def flat_row(self) -> dict[str, float | str]:
        """Single flat record, e.g. for Monte Carlo aggregation."""
        row: dict[str, float | str] = {
            "method": self.method,
            "assumption": "" if self.assumption is None else self.assumption.value,
        }
        for s, e in self.strata.items():
            for k, v in e.as_dict().items():
                row[f"{s}_{k}"] = v
        return row

    def table(self) -> str:
        head = f"{'stratum':<8}{'mu1':>10}{'mu0':>10}{'itt':>10}{'se':>10}{'ci_lo':>10}{'ci_hi':>10}"
        lines = [f"method={self.method} assumption={self.to_dict()['assumption']} "
                 f"ci={self.ci_method} level={self.level}", head]
        for s, e in self.strata.items():
            lines.append(f"{s:<8}{e.mu1:>10.4f}{e.mu0:>10.4f}{e.itt:>10.4f}{e.se:>10.4f}"
                         f"{e.ci_lo:>10.4f}{e.ci_hi:>10.4f}")
        return "\n".join(lines)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, enum.Enum):
        return obj.value
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
