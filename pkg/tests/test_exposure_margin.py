import numpy as np
import pytest
from conftest import credit, g2_default, make_paths, market
from hypothesis import given, settings
from hypothesis import strategies as st

from ccpxva.exposure_margin import (MarginConfig, TradeSpec, exposure, exposure_delayed, exposure_on_paths,
                                    exposure_profile_paths, gap_components, gap_whole, im_stddev,
                                    initial_margin, realized_flow, resolve_trade, variation_margin)
from ccpxva.models.correlation import CorrelationSpec, solve_driver_correlations
from ccpxva.models.g2 import G2Params
from ccpxva.simulation import build_grid, generate_paths


def _inner(state, t0, t1, n, seed, g2=None, trade=None, dt=1 / 12):
    g2 = g2 or g2_default()
    ev = trade.event_times if trade is not None else ()
    grid = build_grid(t1, dt, ev, start=t0)
    corr = solve_driver_correlations(0.0, 0.0, g2)
    return generate_paths(g2, market().curve, credit("H/M"), corr, grid, n, seed, initial_state=state)


# ---------------------------------------------------------------------------
# Trade and close-out amount
# ---------------------------------------------------------------------------

def test_schedule_and_flip():
    t = TradeSpec("payer", 2.0)
    np.testing.assert_allclose(t.fixed_times, [1.0, 2.0])
    np.testing.assert_allclose(t.float_resets, [0.0, 0.5, 1.0, 1.5])
    assert t.sign == -1.0 and t.flipped().sign == 1.0 and t.flipped().flipped() == t
    with pytest.raises(ValueError):
        TradeSpec("straddle", 2.0)
    with pytest.raises(ValueError):
        TradeSpec("payer", 2.3)


def test_par_strike_matches_annuity_formula(md, g2, receiver):
    curve = md.curve
    annuity = float(np.sum(curve.discount(receiver.fixed_times)))
    assert receiver.fixed_rate == pytest.approx((1.0 - curve.discount(10.0)) / annuity, rel=1e-12)
    assert float(exposure(receiver, curve, g2, 0.0, 0.0, 0.0)) == pytest.approx(0.0, abs=1e-14)


def test_off_market_value_closed_form(md, g2):
    curve = md.curve
    k = 0.05
    for d, s in (("receiver", 1.0), ("payer", -1.0)):
        tr = TradeSpec(d, 5.0, fixed_rate=k, notional=2.0)
        expected = 2.0 * s * (k * np.sum(curve.discount(tr.fixed_times)) - (1.0 - curve.discount(5.0)))
        assert float(exposure(tr, curve, g2, 0.0, 0.0, 0.0)) == pytest.approx(expected, rel=1e-12)


def test_exposure_needs_strike_and_fixing(md, g2):
    with pytest.raises(ValueError):
        exposure(TradeSpec("receiver", 5.0), md.curve, g2, 0.0, 0.0, 0.0)
    tr = resolve_trade(TradeSpec("receiver", 5.0), md.curve, g2)
    with pytest.raises(ValueError):
        exposure(tr, md.curve, g2, 0.25, 0.0, 0.0)
    with pytest.raises(ValueError):
        exposure(tr, md.curve, g2, 6.0, 0.0, 0.0)


def test_exposure_profile_endpoints(receiver):
    ps = make_paths(300, seed=2)
    prof = exposure_profile_paths(receiver, ps)
    assert np.all(prof[-1] == 0.0)
    np.testing.assert_allclose(prof[0], 0.0, atol=1e-14)
    assert np.all(np.isfinite(prof))


def test_exposure_matches_nested_monte_carlo(receiver):
    """Closed-form swap value at t=5 vs discounted simulated flows from the same state."""
    g2 = g2_default()
    state = (0.004, -0.006, 0.03, 0.01)
    inner = _inner(state, 5.0, 10.0, 40_000, seed=77, trade=receiver)
    ie = inner.cumulative_rate_integral()
    pv = np.zeros(inner.n_paths)
    pays = np.union1d(receiver.fixed_times, receiver.float_times)
    for T in pays[pays > 5.0 + 1e-9]:
        pv += realized_flow(receiver, inner, T) * np.exp(-ie[inner.grid.index_of(T)])
    closed = float(exposure(receiver, market().curve, g2, 5.0, state[0], state[1]))
    se = pv.std(ddof=1) / np.sqrt(pv.size)
    assert abs(pv.mean() - closed) < 3 * se, (pv.mean(), closed, se)


def test_delayed_exposure_without_delay_is_the_exposure(receiver):
    ps = make_paths(200, seed=4)
    for i in (0, 7, 60, 119):
        np.testing.assert_array_equal(exposure_delayed(receiver, ps, i, i), exposure_on_paths(receiver, ps, i))
    with pytest.raises(ValueError):
        exposure_delayed(receiver, ps, 5, 4)


def test_delayed_exposure_is_exact_without_volatility(md):
    g2 = G2Params(0.1, 0.3, 0.0, 0.0, 0.0)
    tr = resolve_trade(TradeSpec("payer", 5.0), md.curve, g2)
    grid = build_grid(5.0, 1 / 12, tr.event_times, delta=30 / 360)
    ps = generate_paths(g2, md.curve, credit("H/M"), CorrelationSpec(np.eye(4)), grid, 3, 1)
    for t in (0.9, 1.0, 2.45):
        i = grid.index_of(grid.times[np.argmin(np.abs(grid.times - t))])
        j = grid.index_of(min(grid.times[i] + 30 / 360, 5.0))
        np.testing.assert_allclose(exposure_delayed(tr, ps, i, j), exposure_on_paths(tr, ps, i),
                                   rtol=1e-12, atol=1e-15)


def test_delayed_exposure_is_a_martingale(receiver):
    delta = 10 / 360
    grid = build_grid(10.0, 1 / 12, receiver.event_times, delta=delta)
    g2 = g2_default()
    ps = generate_paths(g2, market().curve, credit("H/M"), solve_driver_correlations(0, 0, g2), grid,
                        20_000, 13)
    i = grid.index_of(2.0)
    j = grid.index_of(2.0 + delta)
    diff = exposure_delayed(receiver, ps, i, j) - exposure_on_paths(receiver, ps, i)
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / np.sqrt(diff.size)


@pytest.mark.parametrize("t,days", [(1.0, 10), (4.5, 5), (3.0, 30)])
def test_im_volatility_matches_nested_monte_carlo(receiver, t, days):
    g2 = g2_default()
    delta = days / 360
    for state in ((0.0, 0.0, 0.03, 0.01), (0.006, -0.004, 0.03, 0.01)):
        inner = _inner(state, t, t + delta, 50_000, seed=int(100 * t) + days, dt=1 / 360)
        nested = np.std(exposure_delayed(receiver, inner, 0, len(inner.grid) - 1), ddof=1)
        nu = float(im_stddev(receiver, market().curve, g2, t, delta, state[0], state[1]))
        assert nu == pytest.approx(nested, rel=0.10), (t, days, state, nu, nested)


def test_im_volatility_grows_with_horizon(md, g2, receiver):
    nus = [float(im_stddev(receiver, md.curve, g2, 2.0, d / 360, 0.001, 0.0)) for d in (0, 1, 5, 10, 30)]
    assert nus[0] == 0.0
    assert np.all(np.diff(nus) > 0)
    assert float(im_stddev(receiver, md.curve, g2, 9.99, 10 / 360, 0.0, 0.0)) < nus[3]


# ---------------------------------------------------------------------------
# Margins and gap risk
# ---------------------------------------------------------------------------

def test_margin_config_conventions():
    m = MarginConfig("ccp", 1.0, 0.99, 5)
    assert m.delta == pytest.approx(5 / 360)
    assert m.has_im and not m.im_symmetric
    assert MarginConfig("uncollateralized", 0.7).vm_fraction == 0.0
    np.testing.assert_allclose(variation_margin(MarginConfig("csa_vm_only", 0.4), [1.0, -2.0]), [0.4, -0.8])
    for bad in (dict(mode="x"), dict(alpha=1.2), dict(q=1.0), dict(q=0.0), dict(delta_days=-1)):
        with pytest.raises(ValueError):
            MarginConfig(**bad)


def test_initial_margin_examples():
    nu = np.array([10e-4])
    nc, ni = initial_margin(MarginConfig("csa_vm_im", 1.0, 0.99), nu)
    assert nc[0] * 1e4 == pytest.approx(23.2635, abs=1e-4)
    assert ni[0] == -nc[0]
    nc, ni = initial_margin(MarginConfig("ccp", 1.0, 0.99), nu)
    assert ni[0] == 0.0 and nc[0] > 0
    nc, ni = initial_margin(MarginConfig("ccp", 1.0, 0.5), nu)
    assert nc[0] == 0.0
    nc, ni = initial_margin(MarginConfig("csa_vm_only", 1.0, 0.99), nu)
    assert nc[0] == 0.0 and ni[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.5, 0.999), st.floats(0.5, 0.999), st.floats(0.0, 0.05))
def test_initial_margin_monotone_in_quantile(q1, q2, nu):
    lo, hi = sorted((q1, q2))
    a = initial_margin(MarginConfig("csa_vm_im", 1.0, lo), np.array([nu]))[0][0]
    b = initial_margin(MarginConfig("csa_vm_im", 1.0, hi), np.array([nu]))[0][0]
    assert 0.0 <= a <= b


@settings(max_examples=200, deadline=None)
@given(*[st.floats(-1.0, 1.0) for _ in range(6)])
def test_gap_components_add_up(pre, at, post, m, nc, nm):
    parts = gap_components(pre, at, post, m, nc, nm)
    assert sum(parts) == pytest.approx(gap_whole(post, m, nc + nm), abs=1e-12)
