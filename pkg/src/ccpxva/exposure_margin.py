"""Swap close-out amounts, delayed close-outs, margins and gap-risk split.

All values are from the investor's side per unit notional.  The swap is
valued single-curve: floating legs telescope to bond prices, and a running
floating coupon needs the discount bond fixed at its reset.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtri

from .marketdata import DAYS_PER_YEAR, YieldCurve
from .models.g2 import G2Params, bfun, g2_zcb, log_bond_intercept, ou_covariance

TIME_TOL = 1e-9
MODES = ("uncollateralized", "csa_vm_only", "csa_vm_im", "ccp")


# ---------------------------------------------------------------------------
# Trade
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TradeSpec:
    """Plain vanilla swap starting today.

    ``fixed_rate=None`` means "struck at par" and is resolved by
    :func:`resolve_trade`.  Schedules are regular in model years.
    """

    direction: str = "receiver"
    maturity: float = 10.0
    fixed_rate: float | None = None
    notional: float = 1.0
    fixed_frequency: int = 1
    float_frequency: int = 2

    def __post_init__(self):
        if self.direction not in ("receiver", "payer"):
            raise ValueError("direction must be 'receiver' or 'payer'")
        if self.maturity <= 0:
            raise ValueError("maturity must be positive")
        for f in (self.fixed_frequency, self.float_frequency):
            n = self.maturity * f
            if f <= 0 or abs(n - round(n)) > 1e-9:
                raise ValueError("maturity must be a whole number of payment periods")

    @property
    def sign(self) -> float:
        return 1.0 if self.direction == "receiver" else -1.0

    def flipped(self) -> "TradeSpec":
        return replace(self, direction="payer" if self.direction == "receiver" else "receiver")

    @property
    def fixed_times(self) -> np.ndarray:
        n = int(round(self.maturity * self.fixed_frequency))
        return np.arange(1, n + 1) / self.fixed_frequency

    @property
    def float_times(self) -> np.ndarray:
        n = int(round(self.maturity * self.float_frequency))
        return np.arange(1, n + 1) / self.float_frequency

    @property
    def float_resets(self) -> np.ndarray:
        return self.float_times - 1.0 / self.float_frequency

    @property
    def event_times(self) -> np.ndarray:
        return np.union1d(self.fixed_times, self.float_resets)


def _current_float_period(trade: TradeSpec, t: float):
    """``(reset, pay)`` of the floating period running at ``t``, or None after maturity."""
    pays = trade.float_times
    k = int(np.searchsorted(pays, t + TIME_TOL, side="left"))
    if k >= pays.size:
        return None
    return trade.float_resets[k], pays[k]


def _static_flows(trade: TradeSpec, t: float, fixing):
    """Remaining flows as ``(times, coefficients)`` with value ``sum c_k P(t, T_k)``.

    Coefficients may be per-path arrays (running coupon) and flows at ``t``
    itself are excluded.  ``fixing`` is ``P(reset, pay)`` of the running
    period and is only needed strictly inside a period; ``"par"`` treats the
    running leg as if it had just reset.
    """
    if trade.fixed_rate is None:
        raise ValueError("trade strike is unresolved; call resolve_trade first")
    s = trade.sign * trade.notional
    times, coefs = [], []
    acc = 1.0 / trade.fixed_frequency
    for T in trade.fixed_times[trade.fixed_times > t + TIME_TOL]:
        times.append(T)
        coefs.append(s * trade.fixed_rate * acc)
    period = _current_float_period(trade, t)
    if period is not None:
        reset, pay = period
        if abs(reset - t) <= TIME_TOL or (isinstance(fixing, str) and fixing == "par"):
            const = -s   # leg at par on its reset date
        else:
            if fixing is None:
                raise ValueError(f"running coupon at t={t} needs the fixing P({reset}, {pay})")
            times.append(pay)
            coefs.append(-s / np.asarray(fixing, dtype=float))
            const = 0.0
        times.append(trade.maturity)
        coefs.append(s)
    else:
        const = 0.0
    return np.asarray(times, dtype=float), coefs, const


def exposure(trade: TradeSpec, curve: YieldCurve, g2: G2Params, t: float, x1, x2, fixing=None):
    """Close-out amount ``eps_t(t, T)``: value of the remaining flows at state ``(x1, x2)``."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if t > trade.maturity + TIME_TOL:
        raise ValueError("valuation time after maturity")
    times, coefs, const = _static_flows(trade, t, fixing)
    out = np.full(np.broadcast(x1, x2).shape, const, dtype=float)
    for T, c in zip(times, coefs):
        out = out + c * g2_zcb(g2, curve, t, T, x1, x2)
    return out


def par_rate(trade: TradeSpec, curve: YieldCurve, g2: G2Params) -> float:
    """Fixed rate giving zero initial value, by root finding on the strike."""
    def value(k):
        return float(exposure(replace(trade, fixed_rate=k), curve, g2, 0.0, 0.0, 0.0))
    return brentq(value, -1.0, 1.0, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)


def resolve_trade(trade: TradeSpec, curve: YieldCurve, g2: G2Params) -> TradeSpec:
    if trade.fixed_rate is not None:
        return trade
    return replace(trade, fixed_rate=par_rate(trade, curve, g2))


# ---------------------------------------------------------------------------
# Pathwise close-outs
# ---------------------------------------------------------------------------

def _fixings(trade: TradeSpec, paths, i: int):
    """Per-path fixing ``P(reset, pay)`` of the period running at grid time ``i``."""
    t = paths.times[i]
    period = _current_float_period(trade, t)
    if period is None or abs(period[0] - t) <= TIME_TOL:
        return None
    reset, pay = period
    if not paths.grid.has(reset):
        raise ValueError(f"reset date {reset} is missing from the simulation grid")
    r = paths.grid.index_of(reset)
    return g2_zcb(paths.g2, paths.curve, reset, pay, paths.x1[r], paths.x2[r])


def exposure_on_paths(trade: TradeSpec, paths, i: int):
    """``eps_{t_i}(t_i, T)`` on every path."""
    t = paths.times[i]
    if t >= trade.maturity - TIME_TOL:
        return np.zeros(paths.n_paths)
    return exposure(trade, paths.curve, paths.g2, t, paths.x1[i], paths.x2[i], _fixings(trade, paths, i))


def exposure_profile_paths(trade: TradeSpec, paths) -> np.ndarray:
    return np.array([exposure_on_paths(trade, paths, i) for i in range(len(paths.grid))])


def realized_flow(trade: TradeSpec, paths, T: float):
    """Cash flow paid at ``T`` on every path (zero if ``T`` is not a pay date)."""
    s = trade.sign * trade.notional
    out = np.zeros(paths.n_paths)
    if np.any(np.abs(trade.fixed_times - T) <= TIME_TOL):
        out += s * trade.fixed_rate / trade.fixed_frequency
    k = np.flatnonzero(np.abs(trade.float_times - T) <= TIME_TOL)
    if k.size:
        reset = trade.float_resets[k[0]]
        r = paths.grid.index_of(reset)
        fix = g2_zcb(paths.g2, paths.curve, reset, T, paths.x1[r], paths.x2[r])
        out -= s * (1.0 / fix - 1.0)
    return out


def exposure_delayed(trade: TradeSpec, paths, i: int, j: int):
    """``eps_{t_j}(t_i, T)``: flows in ``(t_i, t_j]`` and the residual value at ``t_j``, discounted to ``t_i``."""
    if j < i:
        raise ValueError("delayed index precedes the start index")
    t, s = paths.times[i], paths.times[j]
    ie = paths.cumulative_rate_integral()
    out = exposure_on_paths(trade, paths, j) * np.exp(-(ie[j] - ie[i]))
    pays = np.union1d(trade.fixed_times, trade.float_times)
    for T in pays[(pays > t + TIME_TOL) & (pays <= s + TIME_TOL)]:
        k = paths.grid.index_of(T)
        out = out + realized_flow(trade, paths, T) * np.exp(-(ie[k] - ie[i]))
    return out


# ---------------------------------------------------------------------------
# Initial-margin volatility
# ---------------------------------------------------------------------------

def im_stddev(trade: TradeSpec, curve: YieldCurve, g2: G2Params, t: float, delta: float, x1, x2,
              fixing=None):
    """Conditional standard deviation of ``eps_{t+delta}(t, T)`` given the state at ``t``.

    First-order propagation: the residual value at ``t + delta`` is
    linearized in ``x(t + delta)`` around its conditional mean and the exact
    OU covariance over ``delta`` is applied.  The discount back to ``t`` is
    frozen at its bond value, and a floating coupon resetting inside the
    window is treated as fixed at par.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    shape = np.broadcast(x1, x2).shape
    s = min(t + delta, trade.maturity)
    if delta <= 0.0 or s <= t or max(g2.sigma1, g2.sigma2) == 0.0:
        return np.zeros(shape)
    period = _current_float_period(trade, s)
    if period is not None and abs(period[0] - s) > TIME_TOL:
        reset, pay = period
        if reset > t + TIME_TOL:
            fixing = "par"   # resets inside the window
        elif abs(reset - t) <= TIME_TOL:
            fixing = g2_zcb(g2, curve, t, pay, x1, x2)
    times, coefs, _ = _static_flows(trade, s, fixing)
    if times.size == 0:
        return np.zeros(shape)
    m1 = x1 * np.exp(-g2.a1 * (s - t))
    m2 = x2 * np.exp(-g2.a2 * (s - t))
    disc = g2_zcb(g2, curve, t, s, x1, x2)
    g1 = np.zeros(shape)
    g2v = np.zeros(shape)
    for T, c in zip(times, coefs):
        tau = T - s
        p = np.exp(log_bond_intercept(g2, curve, s, T) - bfun(g2.a1, tau) * m1 - bfun(g2.a2, tau) * m2)
        g1 = g1 - c * bfun(g2.a1, tau) * p
        g2v = g2v - c * bfun(g2.a2, tau) * p
    g1 = g1 * disc
    g2v = g2v * disc
    cov = ou_covariance(g2, s - t)
    var = cov[0, 0] * g1 * g1 + 2.0 * cov[0, 1] * g1 * g2v + cov[1, 1] * g2v * g2v
    return np.sqrt(np.maximum(var, 0.0))


def im_stddev_on_paths(trade: TradeSpec, paths, i: int, delta: float):
    t = paths.times[i]
    if t >= trade.maturity - TIME_TOL:
        return np.zeros(paths.n_paths)
    return im_stddev(trade, paths.curve, paths.g2, t, delta, paths.x1[i], paths.x2[i],
                     _fixings(trade, paths, i))


# ---------------------------------------------------------------------------
# Margins
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarginConfig:
    """Collateral set-up.

    ``delta_days`` is the margin period of risk in calendar days (converted
    with the 360-day year).  ``alpha`` is ignored when uncollateralized.
    """

    mode: str = "csa_vm_only"
    alpha: float = 1.0
    q: float = 0.99
    delta_days: float = 10.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown margin mode {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if self.delta_days < 0:
            raise ValueError("delta_days must be non-negative")

    @property
    def delta(self) -> float:
        return self.delta_days / DAYS_PER_YEAR

    @property
    def vm_fraction(self) -> float:
        return 0.0 if self.mode == "uncollateralized" else self.alpha

    @property
    def has_im(self) -> bool:
        return self.mode in ("csa_vm_im", "ccp")

    @property
    def im_symmetric(self) -> bool:
        return self.mode == "csa_vm_im"


def variation_margin(config: MarginConfig, eps):
    return config.vm_fraction * np.asarray(eps, dtype=float)


def initial_margin(config: MarginConfig, nu):
    """``(N^C, N^I)`` from the normal approximation of the ``delta``-horizon P&L."""
    nu = np.asarray(nu, dtype=float)
    if not 0.0 < config.q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if not config.has_im:
        zero = np.zeros_like(nu)
        return zero, zero.copy()
    nc = np.maximum(nu * ndtri(config.q), 0.0)
    ni = -nc if config.im_symmetric else np.zeros_like(nc)
    return nc, ni


# ---------------------------------------------------------------------------
# Gap risk
# ---------------------------------------------------------------------------

def gap_components(eps_pre, eps_at, eps_post, m_pre, n_contagion=0.0, n_mtm=0.0):
    """``(mismatch, contagion, mtm)`` gap-risk terms fixed before, at and after default."""
    mismatch = np.asarray(eps_pre) - m_pre
    contagion = np.asarray(eps_at) - eps_pre - n_contagion
    mtm = np.asarray(eps_post) - eps_at - n_mtm
    return mismatch, contagion, mtm


def gap_whole(eps_post, m_pre, n_pre):
    return np.asarray(eps_post) - n_pre - m_pre
