"""Mileage-adjusted NHPP reliability analysis for window-observed recurrent events."""

from .dataset import Calendar, Fleet, FleetSummary, UnitHistory, Violation, cif, dmv_calendar, exposure_at, summarize, validate
from .estimation import (
    FitResult,
    fit_parametric,
    fit_spline,
    log_likelihood,
    select_spline,
    spline_score,
    weighted_log_likelihood,
)
from .frailty import FrailtyFit, fit_frailty, heterogeneity_lrt, marginal_log_likelihood
from .inference import (
    Band,
    BootstrapEnsemble,
    bootstrap_bcif,
    calibrate_scb,
    expected_events_curve,
    parametric_adequacy,
    pointwise_band,
)
from .models import Family, ParametricModel, SplineModel, bcif_eval, bif_eval, place_knots
from .simulation import (
    ScenarioMetrics,
    ScenarioSpec,
    canonical_scenarios,
    rel_rmse,
    run_scenario,
    simulate_fleet,
    simulate_unit,
)
from .splines import ispline_basis, mspline_basis

__version__ = "0.1.0"
