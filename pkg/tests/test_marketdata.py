from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from ccpxva.marketdata import (CdsCurve, MarketDataError, PiecewiseHazard, SwaptionVolSurface,
                               UnarbitrageableQuoteError, YieldCurve, bootstrap_hazard, build_yield_curve,
                               cds_legs, cds_par_spread, load_market_data, year_fraction)


def test_discount_at_origin_is_one(md):
    assert md.curve.discount(0.0) == 1.0


def test_ten_year_pillar(md):
    t = year_fraction(date(2009, 5, 26), date(2019, 5, 28))
    assert t == pytest.approx(3654 / 360)
    assert md.curve.discount(t) == pytest.approx(np.exp(-0.0366 * t), rel=1e-14)


def test_pillars_reprice_exactly(md):
    c = md.curve
    np.testing.assert_allclose(c.zero_rate(c.times), c.zero_rates, rtol=0, atol=1e-12)


def test_midpoint_interpolates_log_discount(md):
    c = md.curve
    t0, t1 = c.times[20], c.times[21]
    r0, r1 = c.zero_rates[20], c.zero_rates[21]
    mid = 0.5 * (t0 + t1)
    expected = np.exp(0.5 * (-r0 * t0 - r1 * t1))
    assert c.discount(mid) == pytest.approx(expected, rel=1e-14)


def test_flat_zero_rate_beyond_last_pillar(md):
    c = md.curve
    assert c.zero_rate(c.times[-1] + 7.0) == pytest.approx(c.zero_rates[-1], rel=1e-14)


def test_curve_rejects_bad_pillars():
    anchor = date(2009, 5, 26)
    with pytest.raises(MarketDataError):
        build_yield_curve([(date(2010, 1, 1), 0.01), (date(2009, 12, 1), 0.01)], anchor)
    with pytest.raises(MarketDataError):
        build_yield_curve([(date(2009, 1, 1), 0.01)], anchor)
    with pytest.raises(MarketDataError):
        YieldCurve(np.array([1.0]), np.array([0.01])).discount(-1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=4000), min_size=2, max_size=12, unique=True),
       st.lists(st.floats(min_value=-0.01, max_value=0.08), min_size=12, max_size=12))
def test_curve_exact_at_pillars_and_continuous(days, rates):
    anchor = date(2009, 5, 26)
    days = sorted(days)
    pillars = [(anchor + timedelta(days=d), r) for d, r in zip(days, rates)]
    c = build_yield_curve(pillars, anchor)
    np.testing.assert_allclose(c.zero_rate(c.times), c.zero_rates, atol=1e-12)
    eps = 1e-12   # forwards are bounded by ~330, so a jump would show above 1e-9
    for t in c.times:
        assert abs(c.log_discount(t + eps) - c.log_discount(t - eps)) < 1e-9
        assert c.discount(t) > 0.0


def test_swaption_surface_validation():
    with pytest.raises(MarketDataError):
        SwaptionVolSurface(np.array([1.0, 2.0]), np.array([1.0]), np.array([[0.2], [0.0]]))
    with pytest.raises(MarketDataError):
        SwaptionVolSurface(np.array([1.0]), np.array([1.0, 2.0]), np.array([[0.2]]))


def test_cds_curve_validation():
    with pytest.raises(MarketDataError):
        CdsCurve(np.array([1.0, 2.0]), np.array([100.0, -1.0]))
    with pytest.raises(MarketDataError):
        CdsCurve(np.array([2.0, 1.0]), np.array([100.0, 100.0]))
    with pytest.raises(MarketDataError):
        CdsCurve(np.array([1.0]), np.array([100.0]), recovery=1.0)


@pytest.mark.parametrize("name", ["mid", "high"])
def test_cds_bootstrap_round_trip(md, name):
    cds = md.cds[name]
    hz = bootstrap_hazard(cds, md.curve)
    assert np.all(hz.rates >= 0.0)
    for m, s in zip(cds.maturities, cds.spreads):
        implied = cds_par_spread(hz, md.curve, m, cds.recovery) * 1e4
        assert implied == pytest.approx(s, rel=1e-10)


def test_credit_triangle_flat_spread():
    # zero rates and flat hazard: premium leg with accrual equals the survival integral
    curve = YieldCurve(np.array([1.0, 30.0]), np.array([0.0, 0.0]))
    cds = CdsCurve(np.array([5.0]), np.array([150.0]), 0.4)
    hz = bootstrap_hazard(cds, curve)
    assert hz.rates[0] == pytest.approx(0.015 / 0.6, rel=1e-12)


def _oracle_legs(knots, rates, curve, maturity, recovery, freq=4):
    """Premium and protection legs by adaptive quadrature, independent of the closed-form legs."""
    def lam(u):
        return rates[min(np.searchsorted(knots, u, side="left"), len(rates) - 1)]

    def cum(u):
        out, prev = 0.0, 0.0
        for k, r in zip(knots, rates):
            seg = min(u, k) - prev
            if seg <= 0:
                break
            out += r * seg
            prev = k
        if u > knots[-1]:
            out += rates[-1] * (u - knots[-1])
        return out

    def ds(u):
        return float(curve.discount(u)) * np.exp(-cum(u))

    pay = np.arange(1, int(round(maturity * freq)) + 1) / freq
    breaks = sorted(set(list(curve.times[curve.times < maturity]) + list(knots[knots < maturity])))
    premium, protection = 0.0, 0.0
    start = 0.0
    for end in pay:
        premium += (end - start) * ds(end)
        pts = [b for b in breaks if start < b < end]
        premium += quad(lambda u: (u - start) * lam(u) * ds(u), start, end, points=pts or None,
                        epsabs=1e-15, epsrel=1e-13, limit=200)[0]
        protection += (1 - recovery) * quad(lambda u: lam(u) * ds(u), start, end, points=pts or None,
                                            epsabs=1e-15, epsrel=1e-13, limit=200)[0]
        start = end
    return premium, protection


def _bisect(f, lo, hi, tol=1e-13):
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def test_two_pillar_bootstrap_matches_bisection_oracle(md):
    cds = CdsCurve(np.array([1.0, 3.0]), np.array([80.0, 140.0]), 0.4)
    hz = bootstrap_hazard(cds, md.curve)
    knots = cds.maturities
    found = []
    for n, (m, s) in enumerate(zip(knots, cds.spreads)):
        def mismatch(lam, n=n, m=m, s=s):
            rates = found + [lam] * (len(knots) - n)
            prem, prot = _oracle_legs(knots, rates, md.curve, m, cds.recovery)
            return s * 1e-4 * prem - prot
        found.append(_bisect(mismatch, 0.0, 1.0))
    np.testing.assert_allclose(hz.rates, found, rtol=1e-8)


def test_closed_form_legs_match_quadrature(md):
    hz = PiecewiseHazard(np.array([1.0, 2.5, 7.0]), np.array([0.01, 0.03, 0.02]))
    ann, prot = cds_legs(hz, md.curve, 7.0, 0.35)
    oa, op = _oracle_legs(hz.knots, list(hz.rates), md.curve, 7.0, 0.35)
    assert ann == pytest.approx(oa, rel=1e-9)
    assert prot == pytest.approx(op, rel=1e-9)


def test_negative_hazard_reported(md):
    cds = CdsCurve(np.array([1.0, 2.0]), np.array([600.0, 50.0]), 0.4, "inverted")
    with pytest.raises(UnarbitrageableQuoteError):
        bootstrap_hazard(cds, md.curve)


def test_builtin_market_data_shape():
    md = load_market_data("builtin")
    assert md.swaptions.vols.shape == (md.swaptions.expiries.size, md.swaptions.tenors.size)
    assert set(md.cds) == {"mid", "high"}
    assert md.cir_sets["mid"] == {"y0": 0.01, "kappa": 0.8, "mu": 0.02, "nu": 0.2}
    assert md.cir_sets["high"] == {"y0": 0.03, "kappa": 0.5, "mu": 0.05, "nu": 0.5}


def test_malformed_market_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"anchor_date": "2009-05-26"}')
    with pytest.raises(MarketDataError):
        load_market_data(p)
