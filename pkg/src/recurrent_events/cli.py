"""Command-line front end.

Every analysis command reads a fleet archive written by ``ingest`` and
writes its artifacts to ``--out``. Runs are pure functions of the inputs and
options (``--seed`` defaults to 0), so re-runs are byte-identical.

Exit codes: 0 success, 1 data or domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .dataset import Fleet, summarize, validate
from .estimation import DEFAULT_CANDIDATE_B, DEFAULT_ORDER, FitResult, fit_parametric, fit_spline, select_spline
from .frailty import heterogeneity_lrt
from .inference import (
    bootstrap_bcif,
    calibrate_scb,
    default_grid,
    default_t_range,
    expected_events_curve,
    parametric_adequacy,
    pointwise_band,
)
from .models import Family, model_from_dict
from .simulation import canonical_scenarios, run_scenario, scenario_spec, synthetic_exposure_pool

log = logging.getLogger("recurrent_events")

BAND_HEADER = ["t", "estimate", "pci_lo", "pci_hi", "scb_lo", "scb_hi", "expected_events", "observed_events"]
FAMILY_CHOICES = [f.value for f in Family] + ["spline", "auto"]


class UsageError(Exception):
    pass


def _knots(value: str):
    if value == "auto":
        return "auto"
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--knots must be 'auto' or a positive integer, got {value!r}") from None
    if k < 1:
        raise argparse.ArgumentTypeError("--knots must be >= 1")
    return k


def _unit_interval(value: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1), got {value!r}") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1), got {value}")
    return v


def _positive_int(value: str) -> int:
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spline_point_fit(fleet: Fleet, knots) -> FitResult:
    if knots == "auto":
        return select_spline(fleet, DEFAULT_CANDIDATE_B, order=DEFAULT_ORDER)
    return fit_spline(fleet, knots, order=DEFAULT_ORDER)


def _candidates(knots):
    return DEFAULT_CANDIDATE_B if knots == "auto" else (knots,)


def _print_table(rows: list[list[str]], file=None):
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths))), file=file)


# --------------------------------------------------------------------------
# commands

def cmd_ingest(args) -> int:
    fleet = io.read_fleet(args.months, args.events, args.exposure)
    problems = validate(fleet)
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        print(f"error: {len(problems)} validation violation(s); no archive written", file=sys.stderr)
        return 1
    out = _out_dir(args)
    io.write_archive(out / "archive.json", fleet)
    s = summarize(fleet)
    io.write_json(out / "summary.json", s.to_dict())
    _print_table(
        [
            ["vehicles", "active_months", "months_per_vehicle", "events", "total_kmiles", "events_per_kmile"],
            [
                str(s.n_vehicles),
                str(s.active_months),
                f"{s.active_months_per_vehicle:.3f}",
                str(s.n_events),
                f"{s.total_kmiles:.3f}",
                f"{s.events_per_kmile:.3f}",
            ],
        ]
    )
    return 0


def cmd_fit(args) -> int:
    fleet = io.read_archive(args.archive)
    if args.family == "auto":
        names = [f.value for f in Family] + ["spline"]
    else:
        names = [args.family]
    fits: dict[str, FitResult] = {}
    for name in names:
        if name == "spline":
            fits[name] = _spline_point_fit(fleet, args.knots)
        else:
            fits[name] = fit_parametric(fleet, name)
    out = _out_dir(args)
    io.write_json(out / "fit.json", {name: f.to_dict() for name, f in fits.items()})
    rows = [["model", "df", "loglik", "AIC", "converged"]]
    for name, f in fits.items():
        label = f"spline (b={f.model.interior_knots.size})" if name == "spline" else name
        rows.append([label, str(f.df), io.fmt(f.loglik), f"{f.aic:.2f}", "yes" if f.converged else "no"])
    _print_table(rows)
    parametric = {n: f for n, f in fits.items() if n != "spline"}
    if len(parametric) > 1:
        best = min(parametric, key=lambda n: parametric[n].aic)
        print(f"best parametric model by AIC: {best}")
    return 0


def _band_rows(grid, estimate, pci=None, scb=None, expected=None):
    rows = []
    for k, t in enumerate(grid):
        row = [t, estimate[k] if estimate is not None else None]
        row += [pci.lower[k], pci.upper[k]] if pci is not None else [None, None]
        if scb is not None and scb.t_range[0] <= t <= scb.t_range[1]:
            j = int(np.searchsorted(scb.grid, t))
            row += [scb.lower[j], scb.upper[j]]
        else:
            row += [None, None]
        row += [expected.expected[k], expected.observed[k]] if expected is not None else [None, None]
        rows.append(row)
    return rows


def _ensemble(fleet: Fleet, args, point: FitResult):
    freeze = point.model.interior_knots.size if args.freeze_b else None
    return bootstrap_bcif(fleet, args.B, _candidates(args.knots), args.seed, order=DEFAULT_ORDER, freeze_b=freeze)


def _ensemble_summary(ens, args) -> dict:
    counts = np.bincount(ens.selected_b)
    return {
        "B": ens.n_boot,
        "seed": args.seed,
        "knots": args.knots,
        "freeze_b": bool(args.freeze_b),
        "selected_b_counts": {str(b): int(c) for b, c in enumerate(counts) if c},
        "redrawn_replicates": sum(len(s) > 2 for s in ens.seeds),
    }


def cmd_bootstrap(args) -> int:
    fleet = io.read_archive(args.archive)
    point = _spline_point_fit(fleet, args.knots)
    ens = _ensemble(fleet, args, point)
    pci = pointwise_band(ens, args.alpha_p)
    out = _out_dir(args)
    summary = _ensemble_summary(ens, args)
    summary.update({"alpha_p": args.alpha_p, "order_stats": list(pci.order_stats), "point_fit": point.to_dict()})
    io.write_json(out / "bootstrap.json", summary)
    io.write_csv(out / "pci.csv", BAND_HEADER, _band_rows(ens.grid, point.model.cumulative(ens.grid), pci=pci))
    print(f"B={ens.n_boot} replicates; pointwise order statistics {pci.order_stats}")
    return 0


def cmd_scb(args) -> int:
    fleet = io.read_archive(args.archive)
    t_lo, t_hi = default_t_range(fleet)
    t_lo = t_lo if args.tl is None else args.tl
    t_hi = t_hi if args.tu is None else args.tu
    point = _spline_point_fit(fleet, args.knots)
    ens = _ensemble(fleet, args, point)
    pci = pointwise_band(ens, args.alpha_p)
    scb = calibrate_scb(ens, args.alpha, t_lo, t_hi)
    expected = expected_events_curve(fleet, point.model, ens.grid)
    adequacy = {}
    for fam in Family:
        try:
            fit = fit_parametric(fleet, fam)
        except ValueError as exc:
            log.warning("%s fit failed: %s", fam.value, exc)
            continue
        adequacy[fam.value] = {"aic": fit.aic, "inside_scb": parametric_adequacy(ens, fit, band=scb)}
    out = _out_dir(args)
    io.write_csv(out / "band.csv", BAND_HEADER, _band_rows(ens.grid, point.model.cumulative(ens.grid), pci, scb, expected))
    summary = _ensemble_summary(ens, args)
    summary.update(
        {
            "alpha": args.alpha,
            "alpha_p": args.alpha_p,
            "alpha_c": scb.achieved_alpha_p,
            "scb_order_stats": list(scb.order_stats),
            "t_range": list(scb.t_range),
            "point_fit": point.to_dict(),
            "parametric_inside_scb": adequacy,
        }
    )
    io.write_json(out / "band.json", summary)
    print(f"SCB on [{io.fmt(scb.t_range[0])}, {io.fmt(scb.t_range[1])}]: calibrated alpha_p={io.fmt(scb.achieved_alpha_p)}")
    for name, a in adequacy.items():
        print(f"  {name}: {'inside' if a['inside_scb'] else 'outside'} the SCB (AIC {a['aic']:.2f})")
    return 0


def cmd_frailty(args) -> int:
    fleet = io.read_archive(args.archive)
    families = [f.value for f in Family] if args.family == "auto" else [args.family]
    if "spline" in families:
        raise UsageError("frailty needs a parametric family (or auto for the best by AIC)")
    if len(families) > 1:
        fits = {f: fit_parametric(fleet, f) for f in families}
        families = [min(fits, key=lambda f: fits[f].aic)]
    res = heterogeneity_lrt(fleet, families[0], boundary_mix=args.boundary_mix)
    out = _out_dir(args)
    data = res.to_dict()
    data["null_theta"] = [float(v) for v in res.null.model.theta]
    data["null_loglik"] = res.null.loglik
    data["boundary_mix"] = args.boundary_mix
    io.write_json(out / "frailty.json", data)
    _print_table(
        [["model", "phi", "LRT", "p-value"], [families[0], f"{res.phi:.4f}", io.fmt(res.lrt_statistic), f"{res.p_value:.4f}"]]
    )
    return 0


def cmd_expected(args) -> int:
    fleet = io.read_archive(args.archive)
    if args.model:
        import json

        model = model_from_dict(json.loads(Path(args.model).read_text(encoding="utf-8")))
        label = "user"
    elif args.family in ("auto", "spline"):
        fit = _spline_point_fit(fleet, args.knots)
        if args.family == "auto":
            cands = [fit] + [fit_parametric(fleet, f) for f in Family]
            fit = min(cands, key=lambda f: f.aic)
        model, label = fit.model, fit.label
    else:
        fit = fit_parametric(fleet, args.family)
        model, label = fit.model, fit.label
    grid = default_grid(fleet.tau)
    curve = expected_events_curve(fleet, model, grid)
    out = _out_dir(args)
    io.write_csv(out / "expected.csv", BAND_HEADER, _band_rows(grid, model.cumulative(grid), expected=curve))
    print(f"{label}: expected {io.fmt(curve.expected[-1])} events by day {io.fmt(grid[-1])}, observed {int(curve.observed[-1])}")
    return 0


def cmd_simulate(args) -> int:
    pool = io.read_archive(args.pool) if args.pool else synthetic_exposure_pool()
    if args.scenario not in canonical_scenarios():
        raise UsageError(f"unknown scenario {args.scenario}")
    family = Family.GOMPERTZ if args.family in ("auto", "spline") else Family.parse(args.family)
    workers = args.threads or os.cpu_count() or 1
    records, curves, summary = [], [], {}
    for n in args.n:
        spec = scenario_spec(
            args.scenario,
            n,
            args.repeats,
            args.B,
            seed=args.seed,
            pool=pool,
            parametric_family_under_test=family,
            alpha=args.alpha,
            band_range=args.band_range,
        )
        m = run_scenario(spec, workers=min(workers, args.repeats))
        for r in m.records:
            records.append(
                [str(args.scenario), n, r.repeat]
                + ([r.covered, r.accepted, r.selected_b] if r.ok else [None, None, None])
            )
        curves.extend([str(args.scenario), n, t, v] for t, v in zip(m.grid, m.rel_rmse))
        summary[str(n)] = {
            "cp": m.cp,
            "acceptance_prob": m.acceptance_prob,
            "median_rel_rmse": float(np.nanmedian(m.rel_rmse)),
            "median_rel_rmse_parametric": float(np.nanmedian(m.rel_rmse_parametric)),
            "n_excluded": m.n_excluded,
        }
    out = _out_dir(args)
    io.write_csv(out / "simulation.csv", ["scenario", "n", "repeat", "covered", "accepted", "selected_b"], records)
    io.write_csv(out / "rel_rmse.csv", ["scenario", "n", "t", "rel_rmse"], curves)
    io.write_json(
        out / "simulation.json",
        {"scenario": args.scenario, "repeats": args.repeats, "B": args.B, "seed": args.seed, "family": family.value, "by_n": summary},
    )
    rows = [["n", "CP", "acceptance", "median RelRMSE", "excluded"]]
    for n, s in summary.items():
        rows.append([n, f"{s['cp']:.3f}", f"{s['acceptance_prob']:.3f}", io.fmt(s["median_rel_rmse"]), str(s["n_excluded"])])
    _print_table(rows)
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--threads", type=_positive_int, default=None, help="worker processes (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    fam = argparse.ArgumentParser(add_help=False)
    fam.add_argument("--family", choices=FAMILY_CHOICES, default="auto")
    fam.add_argument("--knots", type=_knots, default="auto", help="interior knot count, or auto (AIC over 1..10)")

    boot = argparse.ArgumentParser(add_help=False)
    boot.add_argument("--B", type=_positive_int, default=1000, help="bootstrap replicates (default 1000)")
    boot.add_argument("--alpha-p", type=_unit_interval, default=0.05, help="pointwise level (default 0.05)")
    boot.add_argument("--freeze-b", action="store_true", help="reuse the point estimate's knot count in every replicate")

    p = argparse.ArgumentParser(prog="recurrent-events", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="validate CSV inputs and write a fleet archive")
    s.add_argument("months")
    s.add_argument("events")
    s.add_argument("exposure")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit", parents=[common, fam], help="fit parametric and spline BCIFs, compare AIC")
    s.add_argument("archive")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("bootstrap", parents=[common, fam, boot], help="bootstrap ensemble and pointwise intervals")
    s.add_argument("archive")
    s.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("scb", parents=[common, fam, boot], help="calibrated simultaneous confidence band")
    s.add_argument("archive")
    s.add_argument("--alpha", type=_unit_interval, default=0.05)
    s.add_argument("--tl", type=float, default=None, help="band start day (default: first event)")
    s.add_argument("--tu", type=float, default=None, help="band end day (default: last event)")
    s.set_defaults(func=cmd_scb)

    s = sub.add_parser("frailty", parents=[common, fam], help="gamma frailty heterogeneity test")
    s.add_argument("archive")
    s.add_argument("--boundary-mix", action="store_true", help="use the 50:50 chi2_0/chi2_1 null mixture")
    s.set_defaults(func=cmd_frailty)

    s = sub.add_parser("expected", parents=[common, fam], help="expected vs observed cumulative fleet events")
    s.add_argument("archive")
    s.add_argument("--model", default=None, help="JSON model file instead of fitting")
    s.set_defaults(func=cmd_expected)

    s = sub.add_parser("simulate", parents=[common, fam], help="Monte Carlo coverage and acceptance study")
    s.add_argument("--scenario", type=int, choices=sorted(canonical_scenarios()), default=1)
    s.add_argument("--n", type=_positive_int, nargs="+", default=[200], help="units per simulated fleet")
    s.add_argument("--repeats", type=_positive_int, default=200)
    s.add_argument("--B", type=_positive_int, default=500)
    s.add_argument("--alpha", type=_unit_interval, default=0.05)
    s.add_argument("--band-range", choices=["events", "full"], default="events")
    s.add_argument("--pool", default=None, help="fleet archive whose exposure histories are resampled")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if getattr(args, "tl", None) is not None and getattr(args, "tu", None) is not None and args.tl > args.tu:
        parser.error("--tl must not exceed --tu")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, FloatingPointError, KeyError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
