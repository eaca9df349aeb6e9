"""Baseline cumulative intensity functions (BCIF) and their derivatives (BIF).

Three parametric software-reliability families and a monotone I-spline
expansion share one small interface: ``cumulative(t)`` and ``intensity(t)``,
both vectorized over ``t`` in days.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Union

import numpy as np

from .splines import ispline_basis, knot_sequence, mspline_basis

MO_SERIES_THRESHOLD = 1e-10


class Family(str, Enum):
    MUSA_OKUMOTO = "musa-okumoto"
    GOMPERTZ = "gompertz"
    WEIBULL = "weibull"

    @property
    def n_params(self) -> int:
        return 2 if self is Family.MUSA_OKUMOTO else 3

    @classmethod
    def parse(cls, value: "Family | str") -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"mo": "musa-okumoto", "musaokumoto": "musa-okumoto"}
        return cls(aliases.get(key, key))


def _check_range(t, tau: float | None) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise ValueError("t must be >= 0")
    if tau is not None and np.any(arr > tau):
        raise ValueError(f"t must be <= tau={tau}")
    return arr


@dataclass(frozen=True, eq=False)
class ParametricModel:
    """One of the Musa-Okumoto, Gompertz or Weibull BCIFs.

    ``tau`` optionally bounds the evaluation range; without it the closed
    forms are evaluated for any ``t >= 0``.
    """

    family: Family
    theta: np.ndarray
    tau: float | None = None

    def __post_init__(self):
        fam = Family.parse(self.family)
        theta = np.array(self.theta, dtype=float)
        theta.setflags(write=False)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "theta", theta)
        if theta.shape != (fam.n_params,):
            raise ValueError(f"{fam.value} needs {fam.n_params} parameters, got {theta.tolist()}")
        if not np.all(np.isfinite(theta)):
            raise ValueError(f"non-finite parameters {theta.tolist()}")
        if fam is Family.MUSA_OKUMOTO:
            ok = theta[0] >= 0 and theta[1] > 0
        elif fam is Family.GOMPERTZ:
            ok = theta[0] > 0 and 0 < theta[1] < 1 and 0 < theta[2] < 1
        else:
            ok = bool(np.all(theta > 0))
        if not ok:
            raise ValueError(f"invalid {fam.value} parameters {theta.tolist()}")

    def cumulative(self, t) -> np.ndarray:
        t = _check_range(t, self.tau)
        th = self.theta
        if self.family is Family.MUSA_OKUMOTO:
            a, b = th
            if a < MO_SERIES_THRESHOLD:
                return b * t
            return np.log1p(b * a * t) / a
        if self.family is Family.GOMPERTZ:
            a, b, c = th
            # theta1 theta3 (theta3^(theta2^t - 1) - 1) through logs: no underflow and exactly 0 at t = 0
            return a * c * np.expm1(np.expm1(t * np.log(b)) * np.log(c))
        a, b, c = th
        return -a * np.expm1(-b * t**c)

    def intensity(self, t) -> np.ndarray:
        t = _check_range(t, self.tau)
        th = self.theta
        if self.family is Family.MUSA_OKUMOTO:
            a, b = th
            return b / (1.0 + b * a * t)
        if self.family is Family.GOMPERTZ:
            a, b, c = th
            lb, lc = np.log(b), np.log(c)
            pw = np.exp(t * lb)
            return a * pw * np.exp(pw * lc) * lb * lc
        a, b, c = th
        if c < 1 and np.any(t == 0):
            raise ValueError("Weibull intensity is infinite at t=0 when theta3 < 1")
        tc = t**c
        return a * b * c * t ** (c - 1) * np.exp(-b * tc)

    def to_dict(self) -> dict:
        out = {"family": self.family.value, "theta": [float(v) for v in self.theta]}
        if self.tau is not None:
            out["tau"] = float(self.tau)
        return out


@dataclass(frozen=True, eq=False)
class SplineModel:
    """``Lambda_0(t) = sum_q beta_q I_q(t)`` with non-negative ``beta``."""

    order: int
    interior_knots: np.ndarray
    coefficients: np.ndarray
    tau: float

    def __post_init__(self):
        knots = np.array(self.interior_knots, dtype=float).reshape(-1)
        coef = np.array(self.coefficients, dtype=float).reshape(-1)
        knots.setflags(write=False)
        coef.setflags(write=False)
        object.__setattr__(self, "interior_knots", knots)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "order", int(self.order))
        object.__setattr__(self, "tau", float(self.tau))
        knot_sequence(self.order, knots, self.tau)  # validates
        if coef.size != self.n_bases:
            raise ValueError(f"expected {self.n_bases} coefficients, got {coef.size}")
        if np.any(~np.isfinite(coef)) or np.any(coef < 0):
            raise ValueError("spline coefficients must be finite and >= 0")

    @property
    def n_bases(self) -> int:
        return self.order + self.interior_knots.size

    @cached_property
    def knot_seq(self) -> np.ndarray:
        return knot_sequence(self.order, self.interior_knots, self.tau)

    def cumulative(self, t) -> np.ndarray:
        return ispline_basis(self.order, self.knot_seq, t) @ self.coefficients

    def intensity(self, t) -> np.ndarray:
        return mspline_basis(self.order, self.knot_seq, t) @ self.coefficients

    def with_coefficients(self, coefficients) -> "SplineModel":
        return SplineModel(self.order, self.interior_knots, coefficients, self.tau)

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "interior_knots": [float(v) for v in self.interior_knots],
            "coefficients": [float(v) for v in self.coefficients],
            "tau": self.tau,
        }


BcifModel = Union[ParametricModel, SplineModel]


def model_from_dict(data: dict) -> BcifModel:
    if "family" in data:
        return ParametricModel(data["family"], data["theta"], data.get("tau"))
    return SplineModel(data["order"], data["interior_knots"], data["coefficients"], data["tau"])


def bcif_eval(model: BcifModel, t) -> np.ndarray | float:
    """Baseline cumulative intensity ``Lambda_0(t)``; ``Lambda_0(0) = 0``."""
    out = model.cumulative(t)
    return float(out) if np.ndim(out) == 0 else out


def bif_eval(model: BcifModel, t) -> np.ndarray | float:
    """Baseline intensity ``lambda_0(t) = dLambda_0/dt`` (events per k-mile at unit exposure)."""
    out = model.intensity(t)
    return float(out) if np.ndim(out) == 0 else out


def place_knots(event_days, n_interior: int, tau: float) -> np.ndarray:
    """Interior knots at the ``k/(b+1)`` sample quantiles of the pooled event days.

    Raises ``ValueError`` when ties collapse two knots or push one onto a
    boundary; a smaller ``n_interior`` is then needed.
    """
    days = np.sort(np.asarray(event_days, dtype=float))
    if days.size == 0:
        raise ValueError("cannot place knots without events")
    if n_interior < 1:
        raise ValueError("need at least one interior knot")
    levels = np.arange(1, n_interior + 1) / (n_interior + 1)
    knots = np.quantile(days, levels)
    if np.any(np.diff(knots) <= 0) or knots[0] <= 0 or knots[-1] >= tau:
        raise ValueError(
            f"{n_interior} interior knots collapse on tied event days {knots.tolist()}; use fewer knots"
        )
    return knots
