"""Window-observed recurrent events with monthly step-function exposure.

Time is measured in days since the study start. Each calendar month ``l``
covers the half-open interval ``(tau_{l-1}, tau_l]`` with ``tau_0 = 0``. A
unit's exposure is its daily driven distance (thousand miles per day), held
constant inside a month.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .models import BcifModel


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Calendar:
    """Month end days ``tau_1 < ... < tau_n``; the last entry is the follow-up ``tau``."""

    month_end_days: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "month_end_days", _frozen(self.month_end_days))
        if self.month_end_days.ndim != 1 or self.month_end_days.size < 1:
            raise ValueError("calendar needs at least one month")

    @property
    def tau(self) -> float:
        return float(self.month_end_days[-1])

    @property
    def n_months(self) -> int:
        return int(self.month_end_days.size)

    @cached_property
    def boundaries(self) -> np.ndarray:
        """``(tau_0, tau_1, ..., tau_n)`` with ``tau_0 = 0``."""
        return _frozen(np.concatenate([[0.0], self.month_end_days]))

    @cached_property
    def month_lengths(self) -> np.ndarray:
        return _frozen(np.diff(self.boundaries))

    def is_increasing(self) -> bool:
        return bool(np.all(np.diff(self.boundaries) > 0))

    def month_of(self, t) -> np.ndarray:
        """Zero-based month index ``l`` with ``tau_{l-1} < t <= tau_l``.

        Values outside ``(0, tau]`` map to -1 or ``n_months``.
        """
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.month_end_days, t, side="left")
        return np.where(t <= 0, -1, idx)

    def to_dict(self) -> dict:
        return {"month_end_days": [float(v) for v in self.month_end_days]}


def dmv_calendar() -> Calendar:
    """Twenty-four months from December 2017 through November 2019 (730 days)."""
    lengths = [31, 31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30] * 2
    return Calendar(np.cumsum(lengths))


@dataclass(frozen=True, eq=False)
class UnitHistory:
    """One unit: its event days and the daily exposure for every calendar month."""

    unit_id: str
    event_days: np.ndarray
    daily_kmiles: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "unit_id", str(self.unit_id))
        object.__setattr__(self, "event_days", _frozen(np.sort(np.asarray(self.event_days, dtype=float))))
        object.__setattr__(self, "daily_kmiles", _frozen(self.daily_kmiles))

    @property
    def n_events(self) -> int:
        return int(self.event_days.size)

    def to_dict(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "event_days": [float(v) for v in self.event_days],
            "daily_kmiles": [float(v) for v in self.daily_kmiles],
        }


@dataclass(frozen=True)
class Violation:
    unit_id: str | None
    location: str
    message: str

    def __str__(self) -> str:
        who = f"unit {self.unit_id}" if self.unit_id is not None else "calendar"
        return f"{who} @ {self.location}: {self.message}"


@dataclass(frozen=True, eq=False)
class Fleet:
    """A set of units sharing one calendar.

    Array views used by the likelihood code are computed lazily and cached;
    they never change because the fleet is immutable.
    """

    calendar: Calendar
    units: tuple[UnitHistory, ...]

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        if not self.units:
            raise ValueError("a fleet needs at least one unit")
        for u in self.units:
            if u.daily_kmiles.shape != (self.calendar.n_months,):
                raise ValueError(
                    f"unit {u.unit_id}: {u.daily_kmiles.size} exposure entries "
                    f"for {self.calendar.n_months} months"
                )

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def tau(self) -> float:
        return self.calendar.tau

    @cached_property
    def exposure(self) -> np.ndarray:
        """Daily exposure matrix, shape ``(n_units, n_months)``."""
        return _frozen(np.vstack([u.daily_kmiles for u in self.units]))

    @cached_property
    def event_days(self) -> np.ndarray:
        return _frozen(np.concatenate([u.event_days for u in self.units]) if self.n_events else [])

    @cached_property
    def event_unit(self) -> np.ndarray:
        counts = [u.n_events for u in self.units]
        return _frozen(np.repeat(np.arange(self.n_units), counts), dtype=int)

    @cached_property
    def event_rank(self) -> np.ndarray:
        """Position ``j = 0..n_i-1`` of each event within its unit."""
        return _frozen(np.concatenate([np.arange(u.n_events) for u in self.units]) if self.n_events else [], dtype=int)

    @cached_property
    def event_log_exposure(self) -> np.ndarray:
        months = self.calendar.month_of(self.event_days)
        months = np.clip(months, 0, self.calendar.n_months - 1)
        with np.errstate(divide="ignore"):
            return _frozen(np.log(self.exposure[self.event_unit, months]))

    @cached_property
    def events_per_unit(self) -> np.ndarray:
        return _frozen([u.n_events for u in self.units], dtype=int)

    @property
    def n_events(self) -> int:
        return int(sum(u.n_events for u in self.units))

    @cached_property
    def unit_kmiles(self) -> np.ndarray:
        """Total distance per unit over the follow-up."""
        return _frozen(self.exposure @ self.calendar.month_lengths)

    def pooled_event_days(self) -> np.ndarray:
        return np.sort(self.event_days)

    def with_units(self, units: Sequence[UnitHistory]) -> "Fleet":
        return Fleet(self.calendar, tuple(units))

    def to_dict(self) -> dict:
        return {"calendar": self.calendar.to_dict(), "units": [u.to_dict() for u in self.units]}

    @classmethod
    def from_dict(cls, data: dict) -> "Fleet":
        cal = Calendar(data["calendar"]["month_end_days"])
        units = [UnitHistory(u["unit_id"], u["event_days"], u["daily_kmiles"]) for u in data["units"]]
        return cls(cal, tuple(units))


@dataclass(frozen=True)
class FleetSummary:
    n_vehicles: int
    active_months: int
    active_months_per_vehicle: float
    n_events: int
    total_kmiles: float
    events_per_kmile: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _check_time(cal: Calendar, t: float, *, allow_zero: bool) -> float:
    t = float(t)
    lo_ok = t >= 0 if allow_zero else t > 0
    if not (lo_ok and t <= cal.tau) or np.isnan(t):
        interval = "[0, tau]" if allow_zero else "(0, tau]"
        raise ValueError(f"t={t} outside {interval} with tau={cal.tau}")
    return t


def exposure_at(unit: UnitHistory, cal: Calendar, t: float) -> float:
    """Daily exposure of ``unit`` on day ``t`` (month boundaries belong to the earlier month)."""
    t = _check_time(cal, t, allow_zero=False)
    return float(unit.daily_kmiles[int(cal.month_of(t))])


def month_increments(model: "BcifModel", cal: Calendar, t: float | None = None) -> np.ndarray:
    """``Lambda_0(min(t, tau_l)) - Lambda_0(min(t, tau_{l-1}))`` for every month ``l``."""
    edges = cal.boundaries if t is None else np.minimum(cal.boundaries, t)
    return np.diff(model.cumulative(edges))


def cif(unit: UnitHistory, cal: Calendar, model: "BcifModel", t: float) -> float:
    """Expected number of events for ``unit`` on ``(0, t]``.

    Uses the step structure of the exposure, so the integral of
    ``lambda_0(s) x(s)`` is an exact weighted sum of BCIF differences.
    """
    t = _check_time(cal, t, allow_zero=True)
    return float(unit.daily_kmiles @ month_increments(model, cal, t))


def summarize(fleet: Fleet) -> FleetSummary:
    x = fleet.exposure
    active = int(np.count_nonzero(x > 0))
    total = float(np.sum(fleet.unit_kmiles))
    n_events = fleet.n_events
    return FleetSummary(
        n_vehicles=fleet.n_units,
        active_months=active,
        active_months_per_vehicle=active / fleet.n_units,
        n_events=n_events,
        total_kmiles=total,
        events_per_kmile=n_events / total if total > 0 else 0.0,
    )


def validate(fleet: Fleet) -> list[Violation]:
    """Every violated data invariant; an empty list means the fleet is valid."""
    out: list[Violation] = []
    cal = fleet.calendar
    steps = np.diff(cal.boundaries)
    for l in np.flatnonzero(~(steps > 0)):
        out.append(Violation(None, f"month {l + 1}", f"calendar not strictly increasing ({cal.boundaries[l]} -> {cal.boundaries[l + 1]})"))
    tau = cal.tau
    for u in fleet.units:
        x = u.daily_kmiles
        for l in np.flatnonzero(~np.isfinite(x) | (x < 0)):
            out.append(Violation(u.unit_id, f"month {l + 1}", f"negative or non-finite exposure {x[l]}"))
        for t in u.event_days:
            if not (0 < t <= tau):
                out.append(Violation(u.unit_id, f"day {t:g}", f"event outside (0, {tau:g}]"))
                continue
            l = int(cal.month_of(t))
            if not x[l] > 0:
                out.append(Violation(u.unit_id, f"day {t:g}", f"event in inactive window (month {l + 1} has zero exposure)"))
    return out
