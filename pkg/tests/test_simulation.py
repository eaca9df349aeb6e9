import numpy as np
import pytest
from scipy import stats

from builders import make_fleet, random_exposure
from recurrent_events.dataset import UnitHistory, dmv_calendar, summarize, validate
from recurrent_events.models import ParametricModel, SplineModel
from recurrent_events.simulation import (
    CANONICAL_COEFFICIENTS,
    ScenarioSpec,
    canonical_scenarios,
    invert_bcif,
    rel_rmse,
    run_scenario,
    scenario_spec,
    simulate_fleet,
    simulate_unit,
    synthetic_exposure_pool,
    synthetic_fleet,
)

TAU = 730.0
CAL = dmv_calendar()


def test_unit_and_fleet_agree_on_counts():
    model = canonical_scenarios()[2]
    x = random_exposure(1, 4).units[0].daily_kmiles
    rng = np.random.default_rng(2)
    single = np.array([simulate_unit(x, CAL, model, rng).size for _ in range(2000)])
    fleet = simulate_fleet(_clones(x, 2000), model, seed=2).events_per_unit
    # same Poisson law: compare means within 4 combined standard errors
    se = np.sqrt(single.var() / 2000 + fleet.var() / 2000)
    assert abs(single.mean() - fleet.mean()) < 4 * se


def test_zero_exposure_never_fires():
    model = ParametricModel("musa-okumoto", [0.0, 100.0])
    for seed in range(20):
        assert simulate_unit(np.zeros(24), CAL, model, seed).size == 0


def _clones(x, n):
    # n identical units sharing one exposure row
    return make_fleet(CAL.month_end_days, [([], np.asarray(x, dtype=float))] * n)


def test_poisson_mean_constant_rate():
    c, x, reps = 0.5, 0.02, 10_000
    model = ParametricModel("musa-okumoto", [0.0, c])
    counts = simulate_fleet(_clones(np.full(24, x), reps), model, seed=0).events_per_unit
    mean = c * x * TAU
    assert abs(counts.mean() - mean) <= 3 * np.sqrt(mean / reps)


def test_events_land_in_active_months():
    f = simulate_fleet(random_exposure(300, 3), canonical_scenarios()[1], seed=3)
    assert validate(f) == []
    assert np.all(f.event_days > 0) and np.all(f.event_days <= TAU)


def test_scenario_one_events_per_unit():
    pool = synthetic_exposure_pool()
    per_unit = [simulate_fleet(pool, canonical_scenarios()[1], seed=s).n_events / pool.n_units for s in range(20)]
    assert np.mean(per_unit) == pytest.approx(1.8, abs=0.15)


def test_month_counts_poisson_goodness_of_fit():
    # one month, fixed mean: counts should pass a chi-square GOF in >= 95% of runs
    model = canonical_scenarios()[2]
    cal_month = 5
    x = np.zeros(24)
    x[cal_month] = 0.2
    mean = x[cal_month] * float(np.diff(model.cumulative(CAL.boundaries[cal_month : cal_month + 2]))[0])
    pool = _clones(x, 10_000)
    passes = 0
    runs = 40
    for run in range(runs):
        counts = simulate_fleet(pool, model, seed=[11, run]).events_per_unit
        k_max = int(stats.poisson.ppf(0.999, mean))
        observed = np.bincount(np.minimum(counts, k_max), minlength=k_max + 1)
        probs = stats.poisson.pmf(np.arange(k_max + 1), mean)
        probs[-1] = stats.poisson.sf(k_max - 1, mean)
        expected = probs * counts.size
        # pool sparse cells
        keep = expected >= 5
        obs = np.append(observed[keep], observed[~keep].sum())
        exp = np.append(expected[keep], expected[~keep].sum())
        if exp[-1] == 0:
            obs, exp = obs[:-1], exp[:-1]
        p = stats.chisquare(obs, exp, ddof=0).pvalue
        passes += p >= 0.01
    assert passes >= 0.95 * runs


def test_within_month_placement_ks():
    model = canonical_scenarios()[3]
    l = 9
    lo, hi = CAL.boundaries[l], CAL.boundaries[l + 1]
    x = np.zeros(24)
    x[l] = 3.0
    lam_lo, lam_hi = model.cumulative([lo, hi])
    cdf = lambda t: (model.cumulative(np.clip(t, lo, hi)) - lam_lo) / (lam_hi - lam_lo)
    pool = _clones(x, 200)
    runs, passes = 40, 0
    for run in range(runs):
        days = simulate_fleet(pool, model, seed=[5, run]).event_days
        passes += stats.kstest(days, cdf).pvalue >= 0.01
    assert passes >= 0.95 * runs


def test_invert_bcif_accuracy():
    model = ParametricModel("gompertz", [102.2539, 0.9975, 0.1623])
    t = np.linspace(0.5, 729.5, 300)
    back = invert_bcif(model, model.cumulative(t), np.zeros_like(t), np.full_like(t, TAU))
    assert np.max(np.abs(back - t)) < 1e-9


def test_simulation_deterministic():
    exposure = random_exposure(50, 1)
    a = simulate_fleet(exposure, canonical_scenarios()[2], seed=9)
    b = simulate_fleet(exposure, canonical_scenarios()[2], seed=9)
    assert all(np.array_equal(u.event_days, v.event_days) for u, v in zip(a.units, b.units))


def test_frailty_inflates_dispersion():
    exposure = random_exposure(400, 2)
    model = canonical_scenarios()[1]
    plain = simulate_fleet(exposure, model, seed=1).events_per_unit
    mixed = simulate_fleet(exposure, model, seed=1, frailty_variance=2.0).events_per_unit
    assert mixed.var() > plain.var()


def test_canonical_truths():
    truths = canonical_scenarios()
    assert tuple(truths[1].coefficients) == (6, 16, 23, 11, 4)
    assert tuple(truths[2].coefficients) == (8, 12, 28, 0, 12)
    assert tuple(truths[3].coefficients) == (5, 25, 0, 30, 0)
    assert truths[3].coefficients[2] == 0 and truths[3].coefficients[4] == 0
    grid = np.arange(0.0, TAU + 1)
    for m in truths.values():
        assert m.order == 3 and m.interior_knots.tolist() == [TAU / 3, 2 * TAU / 3]
        vals = m.cumulative(grid)
        assert vals[0] == 0.0 and np.all(np.diff(vals) >= 0)
        assert vals[-1] == pytest.approx(sum(m.coefficients))
    assert set(CANONICAL_COEFFICIENTS) == {1, 2, 3}


def test_rel_rmse_cases():
    truth = np.array([1.0, 2.0, 4.0])
    assert np.array_equal(rel_rmse(np.tile(truth, (5, 1)), truth), np.zeros(3))
    assert np.allclose(rel_rmse(2 * truth, truth), 1.0)
    delta = 0.3
    est = np.array([truth + delta, truth - delta] * 3)
    assert np.allclose(rel_rmse(est, truth), delta / truth)


def test_rel_rmse_excludes_zero_truth():
    with pytest.warns(UserWarning, match="excluded"):
        out = rel_rmse(np.ones((2, 3)), np.array([0.0, 1.0, 2.0]))
    assert np.isnan(out[0]) and np.all(np.isfinite(out[1:]))


def test_synthetic_pool_totals():
    pool = synthetic_exposure_pool()
    s = summarize(pool)
    assert (s.n_vehicles, s.active_months) == (123, 1550)
    assert s.total_kmiles == pytest.approx(2710.136, rel=1e-12)
    assert s.active_months_per_vehicle == pytest.approx(12.602, abs=1e-3)


def test_synthetic_fleet_integer_days_valid():
    f = synthetic_fleet(23, 179, 190.871, 43, seed=1)
    assert validate(f) == []
    assert np.all(f.event_days == np.round(f.event_days))


def test_scenario_spec_validation():
    pool = synthetic_exposure_pool()
    truth = canonical_scenarios()[1]
    with pytest.raises(ValueError):
        ScenarioSpec(truth, 1, 5, 10, pool)
    with pytest.raises(ValueError):
        ScenarioSpec(truth, 10, 5, 10, pool, band_range="middle")


def test_run_scenario_small_and_deterministic():
    spec = scenario_spec(1, 40, 4, 60, seed=3)
    a = run_scenario(spec)
    b = run_scenario(spec)
    assert 0 <= a.cp <= 1 and 0 <= a.acceptance_prob <= 1
    assert np.all(a.rel_rmse[np.isfinite(a.rel_rmse)] >= 0)
    assert len(a.records) == 4 and a.n_excluded == 0
    assert np.array_equal(a.rel_rmse, b.rel_rmse) and a.records == b.records


def test_run_scenario_workers_do_not_change_results():
    spec = scenario_spec(2, 30, 3, 40, seed=8)
    serial = run_scenario(spec)
    parallel = run_scenario(spec, workers=2)
    assert np.array_equal(serial.rel_rmse, parallel.rel_rmse) and serial.records == parallel.records


def test_run_scenario_aborts_on_failures():
    # an all-zero pool cannot produce events, so every repeat fails
    dead = make_fleet(CAL.month_end_days, [([], np.zeros(24))] * 3)
    spec = ScenarioSpec(canonical_scenarios()[1], 5, 3, 10, dead)
    with pytest.raises(RuntimeError, match="repeats failed"):
        run_scenario(spec)
