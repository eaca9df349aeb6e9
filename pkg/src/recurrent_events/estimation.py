"""Maximum likelihood for mileage-adjusted NHPP models.

The log-likelihood of window-observed events with step exposure is

    sum_ij w_i [log x_i(t_ij) + log lambda_0(t_ij)]
      - sum_i w_i sum_l x_il [Lambda_0(tau_l) - Lambda_0(tau_{l-1})]

with unit weights ``w_i = 1`` for the plain likelihood. Parametric families
are fitted by Nelder-Mead on an unconstrained reparameterization. The spline
likelihood is concave in the coefficients, so spline fits use a projected
Newton method with exact derivatives that runs many weight vectors at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from .dataset import Fleet
from .models import BcifModel, Family, ParametricModel, SplineModel, place_knots
from .splines import ispline_basis, knot_sequence, mspline_basis

ZERO_THRESHOLD = 1e-8
DEFAULT_CANDIDATE_B = tuple(range(1, 11))
DEFAULT_ORDER = 3
NM_MAX_EVALS = 5000
NM_XATOL = 1e-8


def aic(loglik: float, df: int) -> float:
    if df < 0:
        raise ValueError("df must be >= 0")
    return -2.0 * loglik + 2.0 * df


@dataclass(frozen=True, eq=False)
class FitResult:
    model: BcifModel
    loglik: float
    df: int
    aic: float
    converged: bool
    n_function_evals: int
    init: np.ndarray

    @property
    def is_spline(self) -> bool:
        return isinstance(self.model, SplineModel)

    @property
    def label(self) -> str:
        if self.is_spline:
            return f"spline(b={self.model.interior_knots.size})"
        return self.model.family.value

    def to_dict(self) -> dict:
        m = self.model
        if isinstance(m, SplineModel):
            kind, params = "spline", [float(v) for v in m.coefficients]
            knots = [float(v) for v in m.interior_knots]
        else:
            kind, params, knots = m.family.value, [float(v) for v in m.theta], None
        return {
            "family_or_spline": kind,
            "theta_or_coefficients": params,
            "knots": knots,
            "order": m.order if isinstance(m, SplineModel) else None,
            "tau": m.tau,
            "loglik": float(self.loglik),
            "df": int(self.df),
            "aic": float(self.aic),
            "converged": bool(self.converged),
        }


def _check_weights(fleet: Fleet, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (fleet.n_units,):
        raise ValueError(f"need {fleet.n_units} weights, got shape {w.shape}")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    return w


def weighted_log_likelihood(fleet: Fleet, model: BcifModel, w) -> float:
    """Re-weighted log-likelihood; every term of unit ``i`` is multiplied by ``w_i``.

    Returns ``-inf`` when the intensity vanishes at an event with positive weight.
    """
    w = _check_weights(fleet, w)
    increments = np.diff(model.cumulative(fleet.calendar.boundaries))
    exposure_term = float(w @ (fleet.exposure @ increments))
    if fleet.n_events == 0:
        return -exposure_term
    lam = np.asarray(model.intensity(fleet.event_days), dtype=float)
    with np.errstate(divide="ignore"):
        terms = fleet.event_log_exposure + np.log(lam)
    we = w[fleet.event_unit]
    terms = np.where(we != 0, we * terms, 0.0)
    return float(np.sum(terms)) - exposure_term


def log_likelihood(fleet: Fleet, model: BcifModel) -> float:
    return weighted_log_likelihood(fleet, model, np.ones(fleet.n_units))


# --------------------------------------------------------------------------
# spline likelihood


@dataclass(frozen=True, eq=False)
class SplineDesign:
    """Basis matrices of one knot layout evaluated on one fleet.

    ``event_m`` holds the M-spline rows at every event day; ``unit_a`` holds,
    per unit, the exposure-weighted I-spline increments so that the expected
    count of unit ``i`` is ``unit_a[i] @ beta``.
    """

    order: int
    interior_knots: np.ndarray
    tau: float
    event_m: np.ndarray
    unit_a: np.ndarray
    event_unit: np.ndarray
    event_log_exposure: np.ndarray
    unit_kmiles: np.ndarray

    @classmethod
    def build(cls, fleet: Fleet, interior_knots, order: int = DEFAULT_ORDER) -> "SplineDesign":
        tau = fleet.tau
        knots = knot_sequence(order, interior_knots, tau)
        if fleet.n_events:
            em = mspline_basis(order, knots, fleet.event_days)
        else:
            em = np.zeros((0, order + len(interior_knots)))
        inc = np.diff(ispline_basis(order, knots, fleet.calendar.boundaries), axis=0)
        return cls(
            order=order,
            interior_knots=np.asarray(interior_knots, dtype=float),
            tau=tau,
            event_m=em,
            unit_a=fleet.exposure @ inc,
            event_unit=np.asarray(fleet.event_unit),
            event_log_exposure=np.asarray(fleet.event_log_exposure),
            unit_kmiles=np.asarray(fleet.unit_kmiles),
        )

    @property
    def n_bases(self) -> int:
        return self.event_m.shape[1]

    def model(self, beta) -> SplineModel:
        return SplineModel(self.order, self.interior_knots, beta, self.tau)

    def _prepare(self, weights):
        w = np.atleast_2d(np.asarray(weights, dtype=float))
        return w[:, self.event_unit], w @ self.unit_a, w

    def loglik(self, beta, weights) -> np.ndarray:
        """Weighted log-likelihood for each row of ``beta`` / ``weights``."""
        we, a, _ = self._prepare(weights)
        beta = np.atleast_2d(beta)
        lam = beta @ self.event_m.T
        with np.errstate(divide="ignore", invalid="ignore"):
            ev = np.where(we != 0, we * (self.event_log_exposure + np.log(lam)), 0.0)
        return ev.sum(axis=1) - np.sum(a * beta, axis=1)

    def gradient(self, beta, weights) -> np.ndarray:
        we, a, _ = self._prepare(weights)
        beta = np.atleast_2d(beta)
        lam = beta @ self.event_m.T
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(we != 0, we / lam, 0.0)
        return r @ self.event_m - a


def spline_score(fleet: Fleet, model: SplineModel, weights=None) -> np.ndarray:
    """Analytic gradient of the (weighted) log-likelihood with respect to the coefficients."""
    w = np.ones(fleet.n_units) if weights is None else _check_weights(fleet, weights)
    design = SplineDesign.build(fleet, model.interior_knots, model.order)
    return design.gradient(model.coefficients, w)[0]


@dataclass
class SplineSolution:
    beta: np.ndarray
    loglik: np.ndarray
    converged: np.ndarray
    n_iter: np.ndarray
    n_evals: np.ndarray
    init: np.ndarray
    history: list = field(default_factory=list)


def default_spline_init(design: SplineDesign, weights: np.ndarray) -> np.ndarray:
    """Equal coefficients whose sum is the homogeneous-rate BCIF ``rate * tau``."""
    weights = np.atleast_2d(weights)
    events = weights[:, design.event_unit].sum(axis=1)
    kmiles = weights @ design.unit_kmiles
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(kmiles > 0, events / kmiles, 0.0)
    start = np.repeat((rate * design.tau / design.n_bases)[:, None], design.n_bases, axis=1)
    return np.maximum(start, 1e-12)


def maximize_spline(
    design: SplineDesign,
    weights,
    init=None,
    *,
    max_iter: int = 200,
    tol: float = 1e-9,
    record_history: bool = False,
) -> SplineSolution:
    """Maximize the weighted spline log-likelihood subject to ``beta >= 0``.

    Each row of ``weights`` is an independent problem; all rows advance
    together. The method is a two-metric projected Newton iteration: variables
    at the bound with a positive descent gradient are held there, the rest take
    a Newton step on their block of the exact Hessian, and an Armijo search
    along the projection arc keeps every iterate feasible and monotone.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    n_rep, ns = w.shape[0], design.n_bases
    we_all = w[:, design.event_unit]
    a_all = w @ design.unit_a
    em = design.event_m
    iu, ju = np.triu_indices(ns)
    pairs = em[:, iu] * em[:, ju]
    const = (we_all * np.where(np.isfinite(design.event_log_exposure), design.event_log_exposure, 0.0)).sum(axis=1)
    bad_const = np.any((we_all > 0) & ~np.isfinite(design.event_log_exposure), axis=1)

    if init is None:
        beta = default_spline_init(design, w)
    else:
        beta = np.array(np.broadcast_to(np.atleast_2d(init), (n_rep, ns)), dtype=float)
        if np.any(beta < 0):
            raise ValueError("initial coefficients must be >= 0")
    init_used = beta.copy()

    def objective(b, we, a):
        lam = b @ em.T
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.log(lam)
        bad = np.any((we > 0) & ~(lam > 0), axis=1)
        f = -np.sum(np.where(we > 0, we * logs, 0.0), axis=1) + np.sum(a * b, axis=1)
        f[bad] = np.inf
        return f, lam

    f, lam = objective(beta, we_all, a_all)
    n_evals = np.ones(n_rep, dtype=int)
    # an infeasible start (zero intensity at an event) is lifted to the default start
    infeasible = ~np.isfinite(f)
    if np.any(infeasible):
        beta[infeasible] = default_spline_init(design, w[infeasible])
        f[infeasible], lam[infeasible] = objective(beta[infeasible], we_all[infeasible], a_all[infeasible])
        n_evals[infeasible] += 1

    converged = np.zeros(n_rep, dtype=bool)
    n_iter = np.zeros(n_rep, dtype=int)
    history = [(-f + const).copy()] if record_history else []
    active_rows = np.flatnonzero(np.isfinite(f))
    scale = np.abs(a_all) + 1e-12 * (1.0 + np.abs(a_all).max(axis=1, keepdims=True))

    for it in range(max_iter):
        if active_rows.size == 0:
            break
        rows = active_rows
        b, we, a, lm = beta[rows], we_all[rows], a_all[rows], lam[rows]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(we > 0, we / lm, 0.0)
        g = -(r @ em) + a
        pg = b - np.maximum(0.0, b - g)
        done = np.max(np.abs(pg) / scale[rows], axis=1) <= tol
        converged[rows[done]] = True
        keep = ~done
        rows, b, we, a, lm, g = rows[keep], b[keep], we[keep], a[keep], lm[keep], g[keep]
        r = r[keep]
        if rows.size == 0:
            active_rows = rows
            break
        n_iter[rows] += 1

        hu = (r / lm) @ pairs
        h = np.zeros((rows.size, ns, ns))
        h[:, iu, ju] = hu
        h[:, ju, iu] = hu
        diag = np.einsum("bii->bi", h).copy()
        pgn = np.max(np.abs(b - np.maximum(0.0, b - g)), axis=1, keepdims=True)
        eps = np.minimum(1e-6 * (1.0 + b.max(axis=1, keepdims=True)), pgn)
        fixed = (b <= eps) & (g > 0)
        free = ~fixed
        hf = h * (free[:, :, None] & free[:, None, :])
        ridge = 1e-12 * (1.0 + diag.max(axis=1, keepdims=True))
        dvals = np.where(free, ridge, np.maximum(diag, ridge))
        idx = np.arange(ns)
        hf[:, idx, idx] += dvals
        try:
            d = -np.linalg.solve(hf, g[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            d = np.full_like(g, np.nan)
        slope = np.sum(g * d, axis=1)
        fallback = ~np.isfinite(slope) | ~(slope < 0) & np.any(free & (np.abs(g) > 0), axis=1)
        if np.any(fallback):
            d[fallback] = -g[fallback] / np.maximum(diag[fallback], ridge[fallback])

        f0 = f[rows]
        step = np.ones(rows.size)
        accepted = np.zeros(rows.size, dtype=bool)
        new_b = b.copy()
        new_f = f0.copy()
        new_lam = lm.copy()
        pending = np.arange(rows.size)
        for _ in range(60):
            cand = np.maximum(0.0, b[pending] + step[pending, None] * d[pending])
            fc, lc = objective(cand, we[pending], a[pending])
            n_evals[rows[pending]] += 1
            decrease = np.sum(g[pending] * (cand - b[pending]), axis=1)
            ok = np.isfinite(fc) & (fc <= f0[pending] + 1e-4 * decrease) & (decrease <= 0)
            hit = pending[ok]
            new_b[hit], new_f[hit], new_lam[hit] = cand[ok], fc[ok], lc[ok]
            accepted[hit] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            step[pending] *= 0.5
        # rows whose line search fails cannot improve further at working precision
        stalled = ~accepted
        if np.any(stalled):
            rel = np.max(np.abs(b[stalled] - np.maximum(0.0, b[stalled] - g[stalled])) / scale[rows[stalled]], axis=1)
            converged[rows[stalled]] = rel <= 1e-6
        ok_rows = rows[accepted]
        beta[ok_rows], f[ok_rows], lam[ok_rows] = new_b[accepted], new_f[accepted], new_lam[accepted]
        # no measurable improvement: the iterate sits at the optimum up to rounding
        tiny = accepted & (np.abs(f0 - new_f) <= 1e-15 * np.abs(f0))
        if np.any(tiny):
            pg_new = np.max(np.abs(new_b[tiny] - np.maximum(0.0, new_b[tiny] - g[tiny])) / scale[rows[tiny]], axis=1)
            converged[rows[tiny]] = pg_new <= 1e-6
        if record_history:
            history.append((-f + const).copy())
        active_rows = rows[accepted & ~tiny]

    ll = -f + const
    ll[bad_const] = -np.inf
    return SplineSolution(beta=beta, loglik=ll, converged=converged, n_iter=n_iter, n_evals=n_evals, init=init_used, history=history)


def _spline_fit_result(design: SplineDesign, sol: SplineSolution, row: int = 0) -> FitResult:
    beta = sol.beta[row]
    df = int(np.count_nonzero(beta > ZERO_THRESHOLD))
    ll = float(sol.loglik[row])
    return FitResult(
        model=design.model(beta),
        loglik=ll,
        df=df,
        aic=aic(ll, df),
        converged=bool(sol.converged[row]),
        n_function_evals=int(sol.n_evals[row]),
        init=sol.init[row].copy(),
    )


def _require_events(fleet: Fleet, weights=None):
    if fleet.n_events == 0:
        raise ValueError("fleet has no events; the maximum likelihood estimate does not exist")
    if weights is not None and not np.any(np.asarray(weights)[fleet.event_unit] > 0):
        raise ValueError("all units with events have zero weight")


def fit_spline(
    fleet: Fleet,
    n_interior: int,
    *,
    order: int = DEFAULT_ORDER,
    weights=None,
    init=None,
    knots=None,
) -> FitResult:
    """Fit the I-spline BCIF with ``n_interior`` quantile knots, coefficients >= 0."""
    _require_events(fleet, weights)
    if knots is None:
        knots = place_knots(fleet.event_days, n_interior, fleet.tau)
    design = SplineDesign.build(fleet, knots, order)
    w = np.ones(fleet.n_units) if weights is None else _check_weights(fleet, weights)
    sol = maximize_spline(design, w[None, :], init)
    return _spline_fit_result(design, sol)


@dataclass(frozen=True)
class CandidateOutcome:
    n_interior: int
    fit: FitResult | None
    error: str | None = None


def fit_spline_candidates(
    fleet: Fleet, candidate_b: Iterable[int] = DEFAULT_CANDIDATE_B, *, order: int = DEFAULT_ORDER, weights=None
) -> list[CandidateOutcome]:
    out = []
    for b in candidate_b:
        try:
            out.append(CandidateOutcome(b, fit_spline(fleet, b, order=order, weights=weights)))
        except ValueError as exc:
            out.append(CandidateOutcome(b, None, str(exc)))
    return out


def best_candidate(outcomes: Sequence[CandidateOutcome]) -> FitResult:
    best = None
    for oc in sorted(outcomes, key=lambda o: o.n_interior):
        if oc.fit is None or not np.isfinite(oc.fit.aic):
            continue
        if best is None or oc.fit.aic < best.aic:
            best = oc.fit
    if best is None:
        detail = "; ".join(f"b={o.n_interior}: {o.error or 'non-finite likelihood'}" for o in outcomes)
        raise ValueError(f"no spline candidate could be fitted ({detail})")
    return best


def select_spline(
    fleet: Fleet, candidate_b: Iterable[int] = DEFAULT_CANDIDATE_B, *, order: int = DEFAULT_ORDER, weights=None
) -> FitResult:
    """Spline fit with the smallest AIC over ``candidate_b`` interior-knot counts (ties: smaller b)."""
    candidate_b = list(candidate_b)
    if not candidate_b:
        raise ValueError("candidate list is empty")
    _require_events(fleet, weights)
    return best_candidate(fit_spline_candidates(fleet, candidate_b, order=order, weights=weights))


# --------------------------------------------------------------------------
# parametric families

# per-parameter transform: "log" for (0, inf), "logit" for (0, 1)
TRANSFORMS = {
    Family.MUSA_OKUMOTO: ("log", "log"),
    Family.GOMPERTZ: ("log", "logit", "logit"),
    Family.WEIBULL: ("log", "log", "log"),
}


def to_unconstrained(family: Family, theta) -> np.ndarray:
    out = []
    for kind, v in zip(TRANSFORMS[family], theta):
        out.append(math.log(v) if kind == "log" else float(logit(v)))
    return np.array(out)


def from_unconstrained(family: Family, z) -> np.ndarray:
    out = []
    for kind, v in zip(TRANSFORMS[family], z):
        out.append(math.exp(min(v, 700.0)) if kind == "log" else float(expit(v)))
    return np.array(out)


def moment_init(fleet: Fleet, family: Family, weights=None) -> np.ndarray:
    """Starting values matching the homogeneous-rate BCIF at ``tau``."""
    w = np.ones(fleet.n_units) if weights is None else np.asarray(weights, dtype=float)
    kmiles = float(w @ fleet.unit_kmiles)
    events = float(w @ fleet.events_per_unit)
    rate = events / kmiles if kmiles > 0 and events > 0 else 1.0
    tau = fleet.tau
    target = rate * tau
    if family is Family.MUSA_OKUMOTO:
        b = rate / math.log(2.0)
        return np.array([1.0 / (b * tau), b])
    if family is Family.GOMPERTZ:
        b, c = math.exp(-2.0 / tau), 0.5
        a = target / (c ** (b**tau) - c)
        return np.array([a, b, c])
    return np.array([target / (1.0 - math.exp(-1.0)), 1.0 / tau, 1.0])


class _ParametricObjective:
    """Negative weighted log-likelihood over transformed parameters."""

    def __init__(self, fleet: Fleet, family: Family, weights, fixed: dict[int, float]):
        self.family = family
        self.fixed = dict(fixed)
        self.free = [k for k in range(family.n_params) if k not in self.fixed]
        w = np.ones(fleet.n_units) if weights is None else weights
        self.edges = fleet.calendar.boundaries
        self.xw = w @ fleet.exposure
        self.days = fleet.event_days
        we = w[fleet.event_unit]
        self.we = we
        self.const = float(np.sum(np.where(we != 0, we * fleet.event_log_exposure, 0.0)))
        self.n_evals = 0

    def theta(self, z) -> np.ndarray:
        full = np.zeros(self.family.n_params)
        for k, v in self.fixed.items():
            full[k] = v
        if self.free:
            # transform free coordinates through the full-length transform table
            zz = np.zeros(self.family.n_params)
            zz[self.free] = z
            full[self.free] = from_unconstrained(self.family, zz)[self.free]
        return full

    def loglik(self, theta) -> float:
        try:
            model = ParametricModel(self.family, theta)
        except ValueError:
            return -np.inf
        with np.errstate(all="ignore"):
            inc = np.diff(model.cumulative(self.edges))
            lam = model.intensity(self.days) if self.days.size else np.zeros(0)
            ev = np.where(self.we != 0, self.we * np.log(lam), 0.0)
        val = self.const + float(np.sum(ev)) - float(self.xw @ inc)
        return val if np.isfinite(val) else -np.inf

    def __call__(self, z) -> float:
        self.n_evals += 1
        val = self.loglik(self.theta(z))
        return -val if np.isfinite(val) else np.inf


def nelder_mead(fun, x0, *, step: float = 0.25, max_evals: int = NM_MAX_EVALS, xatol: float = NM_XATOL, restarts: int = 5):
    """Nelder-Mead with restarts from the incumbent until the optimum stops moving.

    Convergence is declared when the simplex diameter drops below ``xatol``
    and a fresh restart does not improve the objective.
    """
    x = np.asarray(x0, dtype=float)
    n = x.size
    used = 0
    best_f = fun(x)
    used += 1
    converged = False
    for _ in range(restarts + 1):
        simplex = np.vstack([x] + [x + step * np.eye(n)[k] for k in range(n)])
        budget = max_evals - used
        if budget <= n + 1:
            break
        res = minimize(
            fun,
            x,
            method="Nelder-Mead",
            options={"maxfev": budget, "xatol": xatol, "fatol": np.inf, "initial_simplex": simplex},
        )
        used += int(res.nfev)
        improved = res.fun < best_f - 1e-12 * (1.0 + abs(best_f))
        if res.fun <= best_f:
            x, best_f = np.asarray(res.x, dtype=float), float(res.fun)
        if res.status != 0:
            converged = False
            break
        converged = True
        if not improved:
            break
        step = max(step * 0.5, 1e-3)
    return x, best_f, converged, used


def fit_parametric(
    fleet: Fleet,
    family: Family | str,
    init=None,
    *,
    weights=None,
    fixed: dict[int, float] | None = None,
) -> FitResult:
    """Maximum likelihood fit of one parametric family.

    ``fixed`` pins parameters by zero-based index, e.g. ``{0: 0.0}`` for the
    constant-rate Musa-Okumoto limit. ``df`` counts the free parameters.
    """
    family = Family.parse(family)
    if weights is not None:
        weights = _check_weights(fleet, weights)
    _require_events(fleet, weights)
    fixed = dict(fixed or {})
    obj = _ParametricObjective(fleet, family, weights, fixed)
    theta0 = np.asarray(init, dtype=float) if init is not None else moment_init(fleet, family, weights)
    for k, v in fixed.items():
        theta0[k] = v
    z0 = to_unconstrained(family, np.where(np.isin(np.arange(family.n_params), obj.free), theta0, 0.5))[obj.free]
    if obj.free:
        z, _, converged, _ = nelder_mead(obj, z0)
    else:
        z, converged = z0, True
    theta = obj.theta(z)
    ll = obj.loglik(theta)
    df = len(obj.free)
    return FitResult(
        model=ParametricModel(family, theta),
        loglik=ll,
        df=df,
        aic=aic(ll, df),
        converged=bool(converged),
        n_function_evals=obj.n_evals,
        init=theta0,
    )
