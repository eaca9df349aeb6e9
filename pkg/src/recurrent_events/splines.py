"""M-spline and I-spline bases on ``[0, tau]``.

M-splines follow the usual recursion on a knot sequence with ``h`` repeated
boundary knots at each end. I-splines are their integrals from 0; they are
evaluated exactly as tail sums of normalized B-splines of order ``h + 1`` on
the knot sequence padded by one extra boundary knot on each side.

The half-open supports ``[t_q, t_{q+h})`` would zero every basis at
``t = tau``; values there are taken as left limits, so ``I_q(tau) = 1``.
"""

from __future__ import annotations

import numpy as np


def knot_sequence(order: int, interior_knots, tau: float) -> np.ndarray:
    """Full knot sequence ``0 = t_1 = ... = t_h < interior < t_{h+b+1} = ... = tau``."""
    if order < 1:
        raise ValueError(f"spline order must be >= 1, got {order}")
    interior = np.asarray(interior_knots, dtype=float)
    if interior.size and (np.any(np.diff(interior) <= 0) or interior[0] <= 0 or interior[-1] >= tau):
        raise ValueError(f"interior knots must be strictly increasing inside (0, {tau}): {interior.tolist()}")
    return np.concatenate([np.zeros(order), interior, np.full(order, float(tau))])


def _order_one(knots: np.ndarray, t: np.ndarray) -> np.ndarray:
    # (len(t), len(knots) - 1); the last non-empty interval is closed on the right
    lo, hi = knots[:-1], knots[1:]
    width = hi - lo
    tt = t[:, None]
    inside = (lo <= tt) & (tt < hi)
    last = np.flatnonzero(width > 0)
    if last.size:
        q = last[-1]
        inside[:, q] |= t == hi[q]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(width > 0, 1.0 / width, 0.0)
    return inside * val


def _mspline_all(order: int, knots: np.ndarray, t: np.ndarray) -> np.ndarray:
    m = _order_one(knots, t)
    tt = t[:, None]
    for h in range(2, order + 1):
        nq = knots.size - h
        lo, hi = knots[:nq], knots[h : h + nq]
        span = hi - lo
        num = h * ((tt - lo) * m[:, :nq] + (hi - tt) * m[:, 1 : nq + 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            m = np.where(span > 0, num / ((h - 1) * span), 0.0)
    return m


def _as_times(t, tau: float) -> tuple[np.ndarray, bool]:
    arr = np.asarray(t, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > tau):
        raise ValueError(f"spline evaluation outside [0, {tau}]")
    return arr, scalar


def mspline_basis(order: int, knot_seq, t) -> np.ndarray:
    """M-spline values ``M_q^{(h)}(t)``, ``q = 1..b+h``.

    Returns shape ``(b + h,)`` for scalar ``t`` and ``(len(t), b + h)`` otherwise.
    Each basis integrates to one over ``[0, tau]``.
    """
    knots = np.asarray(knot_seq, dtype=float)
    arr, scalar = _as_times(t, knots[-1])
    out = _mspline_all(order, knots, arr)
    return out[0] if scalar else out


def ispline_basis(order: int, knot_seq, t) -> np.ndarray:
    """I-spline values ``I_q^{(h)}(t) = int_0^t M_q^{(h)}(u) du``.

    Same shape convention as :func:`mspline_basis`. Every column is
    non-decreasing, zero at 0 and one at ``tau``.
    """
    knots = np.asarray(knot_seq, dtype=float)
    arr, scalar = _as_times(t, knots[-1])
    padded = np.concatenate([knots[:1], knots, knots[-1:]])
    m = _mspline_all(order + 1, padded, arr)
    n_b = m.shape[1]
    widths = padded[order + 1 : order + 1 + n_b] - padded[:n_b]
    bspl = m * (widths / (order + 1))
    # I_q = sum_{j >= q} B_j over the padded index j = 1..b+h; near one use
    # the complement 1 - sum_{j < q} B_j so rounding cannot break monotonicity
    tail = np.cumsum(bspl[:, ::-1], axis=1)[:, ::-1][:, 1:]
    head = np.cumsum(bspl, axis=1)[:, :-1]
    out = np.clip(np.where(tail > 0.5, 1.0 - head, tail), 0.0, 1.0)
    out[arr[:, None] >= knots[order : order + out.shape[1]]] = 1.0
    return out[0] if scalar else out
