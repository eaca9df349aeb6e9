import csv
import json

import numpy as np
import pytest

from recurrent_events import io
from recurrent_events.cli import main
from recurrent_events.dataset import summarize
from recurrent_events.simulation import synthetic_fleet


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def raw_inputs(tmp_path):
    months = _write(tmp_path / "months.csv", "month_index,end_day\n1,31\n2,59\n")
    events = _write(tmp_path / "events.csv", "unit_id,day\nA,3\nA,40\nB,31\n")
    exposure = _write(
        tmp_path / "exposure.csv",
        "unit_id,month_index,miles,days_in_month\nA,1,3100,31\nA,2,560,28\nB,1,310,31\n",
    )
    return months, events, exposure


@pytest.fixture(scope="module")
def zoox_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("zoox")
    fleet = synthetic_fleet(32, 280, 97.780, 58, seed=3)
    io.write_fleet_csvs(fleet, d / "in")
    assert main(["ingest", *(str(d / "in" / n) for n in ("months.csv", "events.csv", "exposure.csv")), "--out", str(d / "a")]) == 0
    return d


def test_miles_conversion(raw_inputs):
    fleet = io.read_fleet(*raw_inputs)
    a = fleet.units[0]
    assert a.unit_id == "A"
    assert a.daily_kmiles[0] == pytest.approx(0.1, rel=1e-15)
    assert a.daily_kmiles[1] == pytest.approx(0.02, rel=1e-15)
    assert fleet.units[1].daily_kmiles.tolist() == [pytest.approx(0.01), 0.0]


def test_daily_kmiles_header_detected(tmp_path, raw_inputs):
    months, events, _ = raw_inputs
    exp = _write(tmp_path / "x.csv", "unit_id,month_index,daily_kmiles\nA,1,0.1\nA,2,0.02\nB,1,0.01\n")
    fleet = io.read_fleet(months, events, exp)
    assert fleet.units[0].daily_kmiles.tolist() == [0.1, 0.02]


def test_unknown_unit_names_row(tmp_path, raw_inputs, capsys):
    months, _, exposure = raw_inputs
    events = _write(tmp_path / "ev.csv", "unit_id,day\nA,3\nZ,9\n")
    with pytest.raises(io.DataError, match=r"ev\.csv:3: .*'Z'"):
        io.read_fleet(months, events, exposure)
    assert main(["ingest", str(months), str(events), str(exposure), "--out", str(tmp_path / "o")]) == 1
    assert "ev.csv:3" in capsys.readouterr().err


@pytest.mark.parametrize(
    "name, text, fragment",
    [
        ("months.csv", "month_index,end_day\n1,31\n2,abc\n", "months.csv:3"),
        ("months.csv", "month_index,end_day\n1,31\n3,59\n", "months.csv:3"),
        ("months.csv", "month_index,end_day\n1,31\n2,20\n", "does not exceed"),
        ("months.csv", "month,end\n1,31\n", "missing column"),
        ("exposure.csv", "unit_id,month_index,miles,days_in_month\nA,1,3100,31\nA,1,5,31\n", "duplicate"),
        ("exposure.csv", "unit_id,month_index,miles,days_in_month\nA,7,3100,31\n", "exposure.csv:2"),
        ("exposure.csv", "unit_id,month_index,miles,days_in_month\nA,1,-3,31\n", "negative"),
        ("events.csv", "unit_id,day\nA,nan\n", "not finite"),
    ],
)
def test_parse_errors_carry_line_numbers(tmp_path, raw_inputs, name, text, fragment):
    paths = {p.name: p for p in raw_inputs}
    _write(paths[name], text)
    with pytest.raises(io.DataError, match=fragment):
        io.read_fleet(paths["months.csv"], paths["events.csv"], paths["exposure.csv"])


def test_validation_violation_blocks_archive(tmp_path, raw_inputs, capsys):
    months, _, exposure = raw_inputs
    # unit B has no exposure in month 2
    events = _write(tmp_path / "ev.csv", "unit_id,day\nB,45\n")
    out = tmp_path / "o"
    assert main(["ingest", str(months), str(events), str(exposure), "--out", str(out)]) == 1
    assert "event in inactive window" in capsys.readouterr().err
    assert not (out / "archive.json").exists()


def test_waymo_summary_printed(tmp_path, capsys):
    fleet = synthetic_fleet(123, 1550, 2710.136, 224, seed=0)
    io.write_fleet_csvs(fleet, tmp_path / "in")
    assert main(["ingest", *(str(tmp_path / "in" / n) for n in ("months.csv", "events.csv", "exposure.csv")), "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out.splitlines()[1].split()
    assert line == ["123", "1550", "12.602", "224", "2710.136", "0.083"]
    assert json.loads((tmp_path / "summary.json").read_text())["n_events"] == 224


def test_ingest_round_trip(tmp_path, zoox_dir):
    archive = (zoox_dir / "a" / "archive.json").read_bytes()
    fleet = io.read_archive(zoox_dir / "a" / "archive.json")
    io.write_fleet_csvs(fleet, tmp_path / "again")
    assert main(["ingest", *(str(tmp_path / "again" / n) for n in ("months.csv", "events.csv", "exposure.csv")), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "archive.json").read_bytes() == archive
    assert summarize(fleet).n_events == 58


def test_archive_rejects_other_json(tmp_path):
    p = _write(tmp_path / "x.json", '{"format": "something"}')
    with pytest.raises(io.DataError):
        io.read_archive(p)
    with pytest.raises(io.DataError, match="invalid JSON"):
        io.read_archive(_write(tmp_path / "y.json", "{"))


def test_fmt_six_significant_digits():
    assert io.fmt(np.pi) == "3.14159"
    assert io.fmt(1234567.0) == "1.23457e+06"
    assert io.fmt(np.nan) == "" and io.fmt(None) == ""
    assert io.fmt(True) == "1" and io.fmt(np.int64(7)) == "7"


def test_fit_auto_prints_aic_table(zoox_dir, tmp_path, capsys):
    assert main(["fit", str(zoox_dir / "a" / "archive.json"), "--family", "auto", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for name in ("musa-okumoto", "gompertz", "weibull", "spline (b="):
        assert name in out
    assert "best parametric model by AIC" in out
    fits = json.loads((tmp_path / "fit.json").read_text())
    assert set(fits) == {"musa-okumoto", "gompertz", "weibull", "spline"}
    for f in fits.values():
        assert f["aic"] == -2 * f["loglik"] + 2 * f["df"]


def test_fit_single_family_and_fixed_knots(zoox_dir, tmp_path):
    assert main(["fit", str(zoox_dir / "a" / "archive.json"), "--family", "spline", "--knots", "2", "--out", str(tmp_path)]) == 0
    fits = json.loads((tmp_path / "fit.json").read_text())
    assert list(fits) == ["spline"] and len(fits["spline"]["knots"]) == 2


def test_scb_band_csv(zoox_dir, tmp_path):
    assert main(["scb", str(zoox_dir / "a" / "archive.json"), "--B", "200", "--seed", "7", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "band.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["t", "estimate", "pci_lo", "pci_hi", "scb_lo", "scb_hi", "expected_events", "observed_events"]
    assert len(rows) == 730
    meta = json.loads((tmp_path / "band.json").read_text())
    t_lo, t_hi = meta["t_range"]
    for r in rows:
        t = float(r["t"])
        inside = t_lo <= t <= t_hi
        assert (r["scb_lo"] != "") == inside
        if inside:
            assert float(r["scb_lo"]) <= float(r["pci_lo"]) <= float(r["pci_hi"]) <= float(r["scb_hi"])
    assert set(meta["parametric_inside_scb"]) == {"musa-okumoto", "gompertz", "weibull"}


def test_bootstrap_and_expected_and_frailty(zoox_dir, tmp_path, capsys):
    archive = str(zoox_dir / "a" / "archive.json")
    assert main(["bootstrap", archive, "--B", "50", "--freeze-b", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "bootstrap.json").read_text())
    assert summary["B"] == 50 and len(summary["selected_b_counts"]) == 1
    assert main(["expected", archive, "--family", "musa-okumoto", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "expected.csv", newline="") as fh:
        last = list(csv.DictReader(fh))[-1]
    assert float(last["observed_events"]) == 58 and last["pci_lo"] == ""
    assert main(["frailty", archive, "--family", "gompertz", "--boundary-mix", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "frailty.json").read_text())
    assert 0 <= res["p_value"] <= 1 and res["boundary_mix"] is True


def test_expected_with_model_file(zoox_dir, tmp_path):
    model = _write(tmp_path / "m.json", json.dumps({"family": "musa-okumoto", "theta": [0.0, 58 / 97.780]}))
    assert main(["expected", str(zoox_dir / "a" / "archive.json"), "--model", str(model), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "expected.csv", newline="") as fh:
        last = list(csv.DictReader(fh))[-1]
    assert float(last["expected_events"]) == pytest.approx(58, rel=1e-5)


def test_simulate_emits_columns(tmp_path, capsys):
    assert main(["simulate", "--scenario", "1", "--n", "20", "--repeats", "3", "--B", "40", "--threads", "1", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "simulation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["scenario", "n", "repeat", "covered", "accepted", "selected_b"] and len(rows) == 3
    with open(tmp_path / "rel_rmse.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["scenario", "n", "t", "rel_rmse"]
    out = capsys.readouterr().out
    assert "CP" in out and "acceptance" in out


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fit"],
        ["fit", "x.json", "--knots", "zero"],
        ["scb", "x.json", "--alpha", "1.5"],
        ["scb", "x.json", "--tl", "500", "--tu", "100"],
        ["simulate", "--scenario", "4"],
        ["frobnicate"],
    ],
)
def test_usage_errors_exit_two(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_domain_errors_exit_one(tmp_path, capsys, zoox_dir):
    assert main(["fit", str(tmp_path / "missing.json")]) == 1
    assert main(["scb", str(zoox_dir / "a" / "archive.json"), "--B", "20", "--tl", "800", "--tu", "900", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "error: fit:" in err and "error: scb:" in err


def test_frailty_rejects_spline_family(zoox_dir, tmp_path):
    assert main(["frailty", str(zoox_dir / "a" / "archive.json"), "--family", "spline", "--out", str(tmp_path)]) == 2
