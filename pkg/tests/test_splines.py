import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from recurrent_events.splines import ispline_basis, knot_sequence, mspline_basis

TAU = 730.0


def _layouts():
    return [
        (1, [100.0, 400.0]),
        (2, [365.0]),
        (3, [TAU / 2]),
        (3, [TAU / 3, 2 * TAU / 3]),
        (3, [50.0, 120.0, 300.0, 301.0, 650.0]),
        (4, [200.0, 500.0]),
    ]


def _quad_m(order, seq, q, a, b):
    # integrate piece by piece between knots so quad sees smooth integrands
    pts = np.unique(np.concatenate([[a, b], seq[(seq > a) & (seq < b)]]))
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        val, _ = quad(lambda s: mspline_basis(order, seq, min(s, TAU))[q], lo, hi, epsabs=1e-14, epsrel=1e-13)
        total += val
    return total


def test_knot_sequence_layout():
    seq = knot_sequence(3, [243.0, 487.0], TAU)
    assert seq.tolist() == [0, 0, 0, 243, 487, TAU, TAU, TAU]


@pytest.mark.parametrize("interior", [[0.0], [TAU], [300.0, 300.0], [400.0, 300.0]])
def test_knot_sequence_rejects_bad_interior(interior):
    with pytest.raises(ValueError):
        knot_sequence(3, interior, TAU)


def test_order_one_value():
    seq = np.array([0.0, 2.0, 5.0])
    for t in (0.0, 0.5, 1.999):
        assert mspline_basis(1, seq, t)[0] == 0.5
    assert mspline_basis(1, seq, 0.5)[1] == 0.0


def test_shapes_and_domain():
    seq = knot_sequence(3, [TAU / 3, 2 * TAU / 3], TAU)
    assert ispline_basis(3, seq, 10.0).shape == (5,)
    assert ispline_basis(3, seq, [1.0, 2.0, 3.0]).shape == (3, 5)
    for bad in (-1e-9, TAU + 1e-9, np.nan):
        with pytest.raises(ValueError):
            ispline_basis(3, seq, bad)
        with pytest.raises(ValueError):
            mspline_basis(3, seq, bad)


@pytest.mark.parametrize("order, interior", _layouts())
def test_ispline_endpoints(order, interior):
    seq = knot_sequence(order, interior, TAU)
    assert np.all(ispline_basis(order, seq, 0.0) == 0.0)
    assert np.allclose(ispline_basis(order, seq, TAU), 1.0, atol=1e-12, rtol=0)


@pytest.mark.parametrize("order, interior", _layouts())
def test_mspline_unit_integral(order, interior):
    seq = knot_sequence(order, interior, TAU)
    for q in range(order + len(interior)):
        assert _quad_m(order, seq, q, 0.0, TAU) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("order, interior", _layouts())
def test_ispline_is_integral_of_mspline(order, interior):
    seq = knot_sequence(order, interior, TAU)
    for t in (TAU / 2, 37.3, 611.0):
        i_vals = ispline_basis(order, seq, t)
        for q in range(i_vals.size):
            assert i_vals[q] == pytest.approx(_quad_m(order, seq, q, 0.0, t), abs=1e-8)


def test_mspline_is_derivative_of_ispline():
    seq = knot_sequence(3, [TAU / 3, 2 * TAU / 3], TAU)
    rng = np.random.default_rng(0)
    t = rng.uniform(1, TAU - 1, size=50)
    h = 1e-4
    fd = (ispline_basis(3, seq, t + h) - ispline_basis(3, seq, t - h)) / (2 * h)
    assert np.allclose(fd, mspline_basis(3, seq, t), rtol=1e-6, atol=1e-10)


@pytest.mark.parametrize("order, interior", _layouts())
def test_mspline_support(order, interior):
    seq = knot_sequence(order, interior, TAU)
    t = np.linspace(0, TAU, 2001)
    m = mspline_basis(order, seq, t)
    assert np.all(m >= 0)
    for q in range(m.shape[1]):
        outside = (t < seq[q]) | (t > seq[q + order])
        assert np.all(m[outside, q] == 0)


@pytest.mark.parametrize("order, interior", _layouts())
def test_ispline_monotone_on_day_grid(order, interior):
    seq = knot_sequence(order, interior, TAU)
    vals = ispline_basis(order, seq, np.arange(0.0, TAU + 1))
    assert np.all(np.diff(vals, axis=0) >= -1e-15)
    assert np.all((vals >= 0) & (vals <= 1 + 1e-12))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0, 100, allow_nan=False), min_size=5, max_size=5),
    st.floats(1, 364),
    st.floats(366, 729),
)
def test_nonnegative_combination_monotone(beta, k1, k2):
    seq = knot_sequence(3, [k1, k2], TAU)
    curve = ispline_basis(3, seq, np.arange(0.0, TAU + 1)) @ np.array(beta)
    assert curve[0] == 0.0
    assert np.all(np.diff(curve) >= -1e-9 * max(1.0, curve[-1]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.lists(st.floats(0.5, 729.5), max_size=7, unique=True))
def test_ispline_exactly_monotone_on_fine_grid(order, interior):
    # rounding near one must not produce tiny decreases
    interior = sorted(interior)
    if np.any(np.diff(interior) < 1e-6):
        return
    basis = ispline_basis(order, knot_sequence(order, interior, TAU), np.linspace(0, TAU, 20001))
    assert np.all(np.diff(basis, axis=0) >= 0)
    assert np.all(basis[-1] == 1.0)
