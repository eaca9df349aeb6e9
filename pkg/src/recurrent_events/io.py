"""Canonical file formats: normalized CSV inputs, JSON archives and CSV outputs.

Inputs (UTF-8, comma separated, header row required)::

    months.csv    month_index,end_day          month_index runs 1..L
    events.csv    unit_id,day
    exposure.csv  unit_id,month_index,miles,days_in_month
              or  unit_id,month_index,daily_kmiles

Units are defined by the exposure file; unit-months without a row have zero
exposure. Raw monthly miles are converted to thousand miles per day.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Calendar, Fleet, UnitHistory

ARCHIVE_FORMAT = "recurrent-events-archive/1"


class DataError(ValueError):
    """Malformed input file; the message names the file and line."""


def _rows(path: Path, required: Sequence[str]):
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing column(s) {', '.join(missing)} in header {header}")
        reader.fieldnames = header
        for row in reader:
            yield reader.line_num, {k: (v or "").strip() for k, v in row.items() if k is not None}


def _number(path, line, row, key, kind=float):
    raw = row.get(key, "")
    try:
        val = kind(raw)
    except ValueError:
        raise DataError(f"{path}:{line}: {key}={raw!r} is not a valid {kind.__name__}") from None
    if kind is float and not math.isfinite(val):
        raise DataError(f"{path}:{line}: {key}={raw!r} is not finite")
    return val


def read_months(path) -> Calendar:
    entries = []
    for line, row in _rows(path, ("month_index", "end_day")):
        entries.append((_number(path, line, row, "month_index", int), _number(path, line, row, "end_day"), line))
    if not entries:
        raise DataError(f"{path}: no months")
    entries.sort()
    for k, (idx, _, line) in enumerate(entries, start=1):
        if idx != k:
            raise DataError(f"{path}:{line}: month_index {idx} breaks the sequence 1..{len(entries)}")
    ends = [e for _, e, _ in entries]
    for (_, prev, _), (idx, end, line) in zip(entries, entries[1:]):
        if not end > prev:
            raise DataError(f"{path}:{line}: end_day {end:g} of month {idx} does not exceed {prev:g}")
    if not ends[0] > 0:
        raise DataError(f"{path}:{entries[0][2]}: first end_day must be > 0")
    return Calendar(ends)


def read_exposure(path, calendar: Calendar) -> dict[str, np.ndarray]:
    """Daily k-miles per unit, in order of first appearance."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh), [])]
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from None
    if "daily_kmiles" in header:
        required = ("unit_id", "month_index", "daily_kmiles")
    else:
        required = ("unit_id", "month_index", "miles", "days_in_month")
    out: dict[str, np.ndarray] = {}
    seen: dict[tuple[str, int], int] = {}
    for line, row in _rows(path, required):
        uid = row["unit_id"]
        if not uid:
            raise DataError(f"{path}:{line}: empty unit_id")
        month = _number(path, line, row, "month_index", int)
        if not 1 <= month <= calendar.n_months:
            raise DataError(f"{path}:{line}: month_index {month} outside 1..{calendar.n_months}")
        if (uid, month) in seen:
            raise DataError(f"{path}:{line}: duplicate row for unit {uid} month {month} (first at line {seen[uid, month]})")
        seen[uid, month] = line
        if "daily_kmiles" in required:
            x = _number(path, line, row, "daily_kmiles")
        else:
            miles = _number(path, line, row, "miles")
            days = _number(path, line, row, "days_in_month")
            if not days > 0:
                raise DataError(f"{path}:{line}: days_in_month must be > 0")
            x = miles / 1000.0 / days
        if x < 0:
            raise DataError(f"{path}:{line}: negative exposure")
        out.setdefault(uid, np.zeros(calendar.n_months))[month - 1] = x
    if not out:
        raise DataError(f"{path}: no exposure rows")
    return out


def read_events(path, unit_ids: Iterable[str]) -> dict[str, list[float]]:
    known = set(unit_ids)
    out: dict[str, list[float]] = {u: [] for u in unit_ids}
    for line, row in _rows(path, ("unit_id", "day")):
        uid = row["unit_id"]
        if uid not in known:
            raise DataError(f"{path}:{line}: event references unknown unit_id {uid!r} (not in the exposure file)")
        out[uid].append(_number(path, line, row, "day"))
    return out


def read_fleet(months, events, exposure) -> Fleet:
    cal = read_months(months)
    x = read_exposure(exposure, cal)
    ev = read_events(events, x.keys())
    return Fleet(cal, tuple(UnitHistory(u, ev[u], x[u]) for u in x))


def write_fleet_csvs(fleet: Fleet, directory) -> tuple[Path, Path, Path]:
    """Inverse of :func:`read_fleet`; exposure is written as ``daily_kmiles`` at full precision."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    months, events, exposure = d / "months.csv", d / "events.csv", d / "exposure.csv"
    write_csv(months, ["month_index", "end_day"], [[l + 1, repr(float(e))] for l, e in enumerate(fleet.calendar.month_end_days)])
    write_csv(events, ["unit_id", "day"], [[u.unit_id, repr(float(t))] for u in fleet.units for t in u.event_days])
    rows = [[u.unit_id, l + 1, repr(float(x))] for u in fleet.units for l, x in enumerate(u.daily_kmiles) if x != 0]
    write_csv(exposure, ["unit_id", "month_index", "daily_kmiles"], rows)
    return months, events, exposure


# --------------------------------------------------------------------------
# output

def fmt(x) -> str:
    """Six significant digits; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return f"{x:.6g}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, data) -> Path:
    """JSON with shortest round-trip floats (non-finite values become null)."""
    path = Path(path)
    path.write_text(json.dumps(_plain(data), indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return path


def write_archive(path, fleet: Fleet) -> Path:
    return write_json(path, {"format": ARCHIVE_FORMAT, **fleet.to_dict()})


def read_archive(path) -> Fleet:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if data.get("format") != ARCHIVE_FORMAT:
        raise DataError(f"{path}: not a fleet archive (format={data.get('format')!r})")
    return Fleet.from_dict(data)
