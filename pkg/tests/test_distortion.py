import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mesostitch import distortion as D


def random_monotone(rng, n=30, delta=5.0):
    """Random piecewise model with r*M(r) strictly increasing."""
    while True:
        m = 1.0 + np.cumsum(rng.normal(0, 0.01, n))
        model = D.RadialUndistortion(m / m.max(), delta, rng.uniform(-5, 5, 2))
        if model.is_invertible():
            return model


def bisection_inverse(model, rho, iters=200):
    lo, hi = 0.0, 10.0 * rho + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid * model.magnification_at(mid) < rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_magnification_examples():
    ident = D.RadialUndistortion.identity((100, 100))
    assert np.allclose(ident.magnification_at([0.0, 3.3, 70.0]), 1.0)
    m = D.RadialUndistortion(np.array([1.0, 0.9, 0.8, 0.95]), 2.0)
    assert m.magnification_at(4.0) == pytest.approx(0.8)
    assert m.magnification_at(3.0) == pytest.approx(0.85)


def test_clamp_counted_and_strict():
    m = D.RadialUndistortion(np.array([1.0, 0.9, 0.8]), 1.0)
    assert m.magnification_at(7.0) == pytest.approx(0.8)
    assert m.clamp_count == 1
    with pytest.raises(D.OutOfRange):
        m.magnification_at([0.5, 2.5], strict=True)


def test_undistort_examples():
    ident = D.RadialUndistortion.identity((50, 60))
    p = np.array([[3.0, 4.0], [-7.0, 1.0]])
    assert np.allclose(ident.undistort(p), p)
    half = D.RadialUndistortion(np.full(5, 0.5), 10.0, np.array([2.0, 2.0]))
    assert np.allclose(half.undistort([2.0, 2.0]), [2.0, 2.0])
    assert np.allclose(half.undistort([6.0, 2.0]), [4.0, 2.0])


def test_distort_identity():
    ident = D.RadialUndistortion.identity((50, 60))
    p = np.array([[3.0, 4.0], [0.0, 0.0]])
    assert np.allclose(ident.distort(p), p)


def test_kink_segment_selection():
    m = D.RadialUndistortion(np.array([1.0, 1.0, 0.9, 0.9]), 10.0)
    for rho in (9.0, 10.0, 17.5, 19.0, 25.0):
        r = np.hypot(*m.distort([rho, 0.0]))
        assert r == pytest.approx(bisection_inverse(m, rho), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip(seed):
    rng = np.random.default_rng(seed)
    model = random_monotone(rng)
    p = rng.uniform(-150, 150, (50, 2))
    assert np.max(np.abs(model.distort(model.undistort(p)) - p)) < 1e-9
    assert np.max(np.abs(model.undistort(model.distort(p)) - p)) < 1e-9


def test_not_invertible():
    m = D.RadialUndistortion(np.array([1.0, 0.2, 0.05]), 1.0)
    assert not m.is_invertible()
    with pytest.raises(D.NotInvertible):
        m.distort([1.0, 1.0])


def test_normalize():
    m = D.RadialUndistortion(np.array([1.0, 1.1, 1.05]), 1.0)
    assert m.normalize() == pytest.approx(1.1)
    assert m.samples.max() == 1.0


def test_polynomial_round_trip():
    poly = D.PolynomialUndistortion([0.03, -0.01], 150.0, [1.0, -2.0])
    p = np.random.default_rng(1).uniform(-120, 120, (40, 2))
    assert np.allclose(poly.distort(poly.undistort(p)), p, atol=1e-9)
    assert poly.order == 4


def test_identity_report_flat():
    rep = D.fit_report(D.RadialUndistortion.identity((189, 252)))
    assert np.allclose(rep["magnification"], 1.0)
    assert np.allclose(rep["center"], 0.0)


@pytest.mark.parametrize("model", [
    D.RadialUndistortion(np.linspace(1.0, 0.96, 30), 5.7, np.array([17.5, -9.6])),
    D.PolynomialUndistortion([0.01, -0.002], 157.0, [17.5, -9.6]),
])
def test_profile_serialization(model):
    back = D.parse_profile(D.format_profile(model))
    assert type(back) is type(model)
    assert np.array_equal(back.center, [17.5, -9.6])
    r = np.linspace(0, 150, 17)
    assert np.allclose(back.magnification_at(r), model.magnification_at(r), rtol=0, atol=1e-15)


def test_parse_rejects_headerless():
    with pytest.raises(D.DistortionError):
        D.parse_profile("0 1\n1 1\n")
