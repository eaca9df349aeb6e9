"""Fractional-random-weight bootstrap and confidence bands for the spline BCIF."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dataset import Fleet
from .estimation import (
    DEFAULT_CANDIDATE_B,
    DEFAULT_ORDER,
    ZERO_THRESHOLD,
    FitResult,
    SplineDesign,
    maximize_spline,
)
from .models import BcifModel, place_knots
from .splines import ispline_basis, knot_sequence

log = logging.getLogger(__name__)

MAX_RETRIES = 10
CHUNK = 1024


def default_grid(tau: float) -> np.ndarray:
    """Integer days ``1..tau``."""
    return np.arange(1.0, math.floor(tau) + 1.0)


def draw_weights(n: int, seed) -> np.ndarray:
    """``n`` independent Exp(1) weights; ``seed`` may be an int or a sequence of ints."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.random.default_rng(seed).exponential(1.0, size=n)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class BootstrapEnsemble:
    grid: np.ndarray
    curves: np.ndarray
    seeds: tuple[tuple[int, ...], ...]
    selected_b: np.ndarray
    weights: np.ndarray

    @property
    def n_boot(self) -> int:
        return self.curves.shape[0]

    def median_curve(self) -> np.ndarray:
        return np.median(self.curves, axis=0)


@dataclass(frozen=True, eq=False)
class Band:
    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    kind: str
    nominal_alpha: float
    achieved_alpha_p: float
    t_range: tuple[float, float] | None = None
    order_stats: tuple[int, int] | None = None

    def contains(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return (self.lower <= values) & (values <= self.upper)


def _design_table(fleet: Fleet, candidate_b: Iterable[int], order: int) -> dict[int, SplineDesign]:
    out = {}
    errors = []
    for b in candidate_b:
        try:
            knots = place_knots(fleet.event_days, b, fleet.tau)
        except ValueError as exc:
            errors.append(f"b={b}: {exc}")
            continue
        out[b] = SplineDesign.build(fleet, knots, order)
    if not out:
        raise ValueError("no feasible knot count: " + "; ".join(errors))
    return out


def _fit_batch(designs: dict[int, SplineDesign], weights: np.ndarray):
    """AIC-select a knot count per weight row; returns (b, beta) lists and a failure mask."""
    n_rep = weights.shape[0]
    best_aic = np.full(n_rep, np.inf)
    best_b = np.zeros(n_rep, dtype=int)
    best_beta: list = [None] * n_rep
    for b in sorted(designs):
        sol = maximize_spline(designs[b], weights)
        df = np.count_nonzero(sol.beta > ZERO_THRESHOLD, axis=1)
        crit = -2.0 * sol.loglik + 2.0 * df
        crit[~sol.converged | ~np.isfinite(crit)] = np.inf
        better = crit < best_aic
        for k in np.flatnonzero(better):
            best_aic[k], best_b[k], best_beta[k] = crit[k], b, sol.beta[k]
    failed = ~np.isfinite(best_aic)
    return best_b, best_beta, failed


def bootstrap_bcif(
    fleet: Fleet,
    n_boot: int,
    candidate_b: Sequence[int] = DEFAULT_CANDIDATE_B,
    seed: int = 0,
    *,
    order: int = DEFAULT_ORDER,
    grid=None,
    freeze_b: int | None = None,
) -> BootstrapEnsemble:
    """Bootstrap copies of the spline BCIF estimate on ``grid``.

    Every replicate draws Exp(1) unit weights from the stream ``(seed, k)``,
    re-selects the knot count by AIC on the re-weighted likelihood and
    evaluates the fitted BCIF. A replicate whose fit fails is redrawn from
    ``(seed, k, attempt)``. ``freeze_b`` skips the per-replicate selection.
    """
    if n_boot < 2:
        raise ValueError("need at least two bootstrap replicates")
    if fleet.n_events == 0:
        raise ValueError("fleet has no events")
    grid = default_grid(fleet.tau) if grid is None else np.asarray(grid, dtype=float)
    cands = [freeze_b] if freeze_b is not None else list(candidate_b)
    designs = _design_table(fleet, cands, order)
    basis_on_grid = {
        b: ispline_basis(order, knot_sequence(order, d.interior_knots, fleet.tau), grid) for b, d in designs.items()
    }
    n = fleet.n_units
    curves = np.empty((n_boot, grid.size))
    selected = np.zeros(n_boot, dtype=int)
    weights = np.empty((n_boot, n))
    seeds: list[tuple[int, ...]] = [(seed, k) for k in range(n_boot)]
    for k in range(n_boot):
        weights[k] = draw_weights(n, seeds[k])

    todo = np.arange(n_boot)
    for attempt in range(MAX_RETRIES + 1):
        if attempt:
            for k in todo:
                seeds[k] = (seed, int(k), attempt)
                weights[k] = draw_weights(n, seeds[k])
        still = []
        for start in range(0, todo.size, CHUNK):
            rows = todo[start : start + CHUNK]
            best_b, best_beta, failed = _fit_batch(designs, weights[rows])
            for j, k in enumerate(rows):
                if failed[j]:
                    still.append(k)
                    continue
                selected[k] = best_b[j]
                curves[k] = basis_on_grid[best_b[j]] @ best_beta[j]
        todo = np.array(still, dtype=int)
        if todo.size == 0:
            break
        log.warning("redrawing %d failed bootstrap replicates (attempt %d)", todo.size, attempt + 1)
    else:
        raise RuntimeError(f"{todo.size} bootstrap replicates failed after {MAX_RETRIES} redraws: {todo[:10].tolist()}")

    curves.setflags(write=False)
    return BootstrapEnsemble(grid=grid, curves=curves, seeds=tuple(seeds), selected_b=selected, weights=weights)


def order_stat_indices(n_boot: int, alpha_p: float) -> tuple[int, int]:
    """One-based order statistics ``([B alpha_p/2], [B(1 - alpha_p/2)])`` clamped to ``[1, B]``."""
    if not 0 < alpha_p < 1:
        raise ValueError("alpha_p must lie in (0, 1)")
    lo = round_half_up(n_boot * alpha_p / 2.0)
    if lo < 1:
        raise ValueError(f"alpha_p={alpha_p} too small for B={n_boot}; the minimum feasible alpha_p is {1.0 / n_boot:g}")
    hi = round_half_up(n_boot * (1.0 - alpha_p / 2.0))
    return min(lo, n_boot), min(max(hi, 1), n_boot)


def _restrict(ens: BootstrapEnsemble, t_lo: float | None, t_hi: float | None):
    grid = ens.grid
    mask = np.ones(grid.size, dtype=bool)
    if t_lo is not None:
        mask &= grid >= t_lo
    if t_hi is not None:
        mask &= grid <= t_hi
    if not np.any(mask):
        raise ValueError(f"no grid points inside [{t_lo}, {t_hi}]")
    return mask


def pointwise_band(ens: BootstrapEnsemble, alpha_p: float) -> Band:
    lo, hi = order_stat_indices(ens.n_boot, alpha_p)
    ordered = np.sort(ens.curves, axis=0)
    return Band(
        grid=ens.grid,
        lower=ordered[lo - 1],
        upper=ordered[hi - 1],
        kind="pointwise",
        nominal_alpha=alpha_p,
        achieved_alpha_p=alpha_p,
        order_stats=(lo, hi),
    )


def coverage_probability(ordered: np.ndarray, curves: np.ndarray, lo: int, hi: int) -> float:
    """Fraction of curves inside the ``(lo, hi)`` order-statistic band at every grid point."""
    inside = np.all((curves >= ordered[lo - 1]) & (curves <= ordered[hi - 1]), axis=1)
    return float(np.mean(inside))


def calibrate_scb(ens: BootstrapEnsemble, alpha: float, t_lo: float | None = None, t_hi: float | None = None) -> Band:
    """Equal-precision simultaneous band over ``[t_lo, t_hi]``.

    Searches the candidate levels ``alpha_p = m/B`` (each maps to one
    order-statistic pair) for the largest ``alpha_p`` whose bootstrap
    coverage of whole curves is still at least ``1 - alpha``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if t_lo is not None and t_hi is not None and t_lo > t_hi:
        raise ValueError("t_lo must not exceed t_hi")
    mask = _restrict(ens, t_lo, t_hi)
    curves = ens.curves[:, mask]
    ordered = np.sort(curves, axis=0)
    B = ens.n_boot
    target = 1.0 - alpha
    seen: dict[int, float] = {}

    def cp(m: int) -> float:
        if m not in seen:
            seen[m] = coverage_probability(ordered, curves, *order_stat_indices(B, m / B))
        return seen[m]

    if cp(1) < target:
        raise ValueError(f"even the widest band covers only {cp(1):.3f} < {target:.3f} of curves; increase B")
    good, bad = 1, B - 1
    if cp(bad) >= target:
        good = bad
    while bad - good > 1:
        mid = (good + bad) // 2
        if cp(mid) >= target:
            good = mid
        else:
            bad = mid
    ms = sorted(seen)
    vals = [seen[m] for m in ms]
    if any(b > a + 1e-12 for a, b in zip(vals, vals[1:])):
        raise RuntimeError(f"coverage not monotone in alpha_p: {list(zip(ms, vals))}")
    alpha_c = good / B
    lo, hi = order_stat_indices(B, alpha_c)
    return Band(
        grid=ens.grid[mask],
        lower=ordered[lo - 1],
        upper=ordered[hi - 1],
        kind="simultaneous",
        nominal_alpha=alpha,
        achieved_alpha_p=alpha_c,
        t_range=(float(ens.grid[mask][0]), float(ens.grid[mask][-1])),
        order_stats=(lo, hi),
    )


def band_contains_curve(band: Band, model: BcifModel) -> bool:
    return bool(np.all(band.contains(model.cumulative(band.grid))))


def parametric_adequacy(
    ens: BootstrapEnsemble,
    parametric_fit: FitResult | BcifModel,
    alpha: float = 0.05,
    t_lo: float | None = None,
    t_hi: float | None = None,
    *,
    band: Band | None = None,
) -> bool:
    """True when the fitted parametric BCIF stays inside the level-``alpha`` SCB on ``[t_lo, t_hi]``."""
    model = parametric_fit.model if isinstance(parametric_fit, FitResult) else parametric_fit
    if band is None:
        band = calibrate_scb(ens, alpha, t_lo, t_hi)
    return band_contains_curve(band, model)


def default_t_range(fleet: Fleet) -> tuple[float, float]:
    days = fleet.pooled_event_days()
    if days.size == 0:
        raise ValueError("fleet has no events")
    return float(days[0]), float(days[-1])


@dataclass(frozen=True, eq=False)
class ExpectedCurve:
    grid: np.ndarray
    expected: np.ndarray
    observed: np.ndarray


def expected_events_curve(fleet: Fleet, model: BcifModel, grid=None) -> ExpectedCurve:
    """Fleet-wide expected cumulative events ``sum_i Lambda_i(t)`` next to the observed count."""
    grid = default_grid(fleet.tau) if grid is None else np.asarray(grid, dtype=float)
    edges = fleet.calendar.boundaries
    clipped = np.minimum(edges[None, :], grid[:, None])
    lam = model.cumulative(clipped.ravel()).reshape(clipped.shape)
    increments = np.diff(lam, axis=1)
    expected = increments @ fleet.exposure.sum(axis=0)
    observed = np.searchsorted(fleet.pooled_event_days(), grid, side="right").astype(float)
    return ExpectedCurve(grid=grid, expected=expected, observed=observed)
