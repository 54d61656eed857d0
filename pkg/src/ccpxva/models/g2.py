"""Two-factor shifted Gaussian short-rate model (G2++).

The short rate is ``e_t = phi(t) + x1_t + x2_t`` with
``dx_i = -a_i x_i dt + sigma_i dW_i`` and ``d<W1, W2> = rho12 dt``.  The
shift ``phi`` is never built explicitly: bond prices are reconstructed from
the initial curve, which fits it by construction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.optimize import least_squares
from scipy.special import ndtr, ndtri

from ..marketdata import SwaptionVolSurface, YieldCurve

A_BOUNDS = (1e-4, 2.0)
SIGMA_BOUNDS = (1e-5, 0.2)
RHO_BOUNDS = (-0.99, 0.99)


@dataclass(frozen=True)
class G2Params:
    """G2++ parameters.

    ``phi_sigma1`` / ``phi_sigma2`` are the volatilities the shift was fitted
    with.  They default to ``sigma1`` / ``sigma2``; scaling the volatilities
    afterwards (see :meth:`with_vol_multiplier`) keeps the original shift.
    """

    a1: float
    a2: float
    sigma1: float
    sigma2: float
    rho12: float
    phi_sigma1: float | None = None
    phi_sigma2: float | None = None

    def __post_init__(self):
        if not (self.a1 > 0 and self.a2 > 0):
            raise ValueError("mean reversions must be positive")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("volatilities must be non-negative")
        if abs(self.rho12) > 1:
            raise ValueError("rho12 must lie in [-1, 1]")

    @property
    def shift_sigmas(self) -> tuple[float, float]:
        s1 = self.sigma1 if self.phi_sigma1 is None else self.phi_sigma1
        s2 = self.sigma2 if self.phi_sigma2 is None else self.phi_sigma2
        return s1, s2

    def with_vol_multiplier(self, m: float) -> "G2Params":
        """Scale both factor volatilities, keeping the shift fitted to the originals."""
        s1, s2 = self.shift_sigmas
        return replace(self, sigma1=self.sigma1 * m, sigma2=self.sigma2 * m,
                       phi_sigma1=s1, phi_sigma2=s2)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "G2Params":
        keys = ("a1", "a2", "sigma1", "sigma2", "rho12", "phi_sigma1", "phi_sigma2")
        return cls(**{k: float(d[k]) for k in keys if k in d})


def bfun(a, tau):
    """``(1 - exp(-a tau)) / a``."""
    return -np.expm1(-a * np.asarray(tau, dtype=float)) / a


def _variance(a1, a2, s1, s2, rho, tau):
    tau = np.asarray(tau, dtype=float)

    def term(ai, aj):
        return (tau - bfun(ai, tau) - bfun(aj, tau) + bfun(ai + aj, tau)) / (ai * aj)

    return (s1 * s1 * term(a1, a1) + s2 * s2 * term(a2, a2)
            + 2.0 * rho * s1 * s2 * term(a1, a2))


def integrated_variance(p: G2Params, tau):
    """Variance of ``int_t^{t+tau} (x1 + x2) du`` given the state at ``t``."""
    return _variance(p.a1, p.a2, p.sigma1, p.sigma2, p.rho12, tau)


def _shift_variance(p: G2Params, tau):
    s1, s2 = p.shift_sigmas
    return _variance(p.a1, p.a2, s1, s2, p.rho12, tau)


def log_bond_intercept(p: G2Params, curve: YieldCurve, t, T):
    """``log A(t, T)`` so that ``P(t,T) = A exp(-B(a1) x1 - B(a2) x2)``."""
    t = np.asarray(t, dtype=float)
    T = np.asarray(T, dtype=float)
    return (curve.log_discount(T) - curve.log_discount(t)
            + 0.5 * (integrated_variance(p, T - t) - _shift_variance(p, T) + _shift_variance(p, t)))


def g2_zcb(p: G2Params, curve: YieldCurve, t, T, x1, x2):
    """Zero-coupon bond price ``P(t, T)`` at state ``(x1, x2)``."""
    t = np.asarray(t, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(T < t):
        raise ValueError("bond maturity precedes the valuation time")
    tau = T - t
    return np.exp(log_bond_intercept(p, curve, t, T) - bfun(p.a1, tau) * x1 - bfun(p.a2, tau) * x2)


def shift_integral(p: G2Params, curve: YieldCurve, t0, t1):
    """``int_{t0}^{t1} phi(u) du``, exact from the curve."""
    return (curve.log_discount(t0) - curve.log_discount(t1)
            + 0.5 * (_shift_variance(p, t1) - _shift_variance(p, t0)))


def phi(p: G2Params, curve: YieldCurve, t):
    """Shift function samples (diagnostic output only)."""
    t = np.asarray(t, dtype=float)
    s1, s2 = p.shift_sigmas
    b1 = bfun(p.a1, t)
    b2 = bfun(p.a2, t)
    return (curve.forward_rate(t) + 0.5 * s1 * s1 * b1 * b1 + 0.5 * s2 * s2 * b2 * b2
            + p.rho12 * s1 * s2 * b1 * b2)


def ou_covariance(p: G2Params, dt: float) -> np.ndarray:
    """Covariance of ``(x1, x2)`` increments over ``dt`` (exact OU transition)."""
    a = np.array([p.a1, p.a2])
    s = np.array([p.sigma1, p.sigma2])
    rho = np.array([[1.0, p.rho12], [p.rho12, 1.0]])
    asum = a[:, None] + a[None, :]
    return rho * np.outer(s, s) * bfun(asum, dt)


# ---------------------------------------------------------------------------
# Swaptions
# ---------------------------------------------------------------------------

_Z_MAX = 10.0
_MIN_NODES, _MAX_NODES = 201, 4001


def _outer_nodes(slope: float):
    """Trapezoid nodes and normal-density weights on ``[-10, 10]``.

    The outer integrand is analytic but turns steeply where the exercise
    boundary crosses the conditional mean of the second factor; ``slope``
    bounds the rate of that turn in standard units and sets the step.  The
    trapezoid rule converges geometrically once the step resolves it.
    """
    h = min(0.1, 2.0 / max(slope, 1e-12))
    n = int(np.clip(np.ceil(2.0 * _Z_MAX / h) + 1, _MIN_NODES, _MAX_NODES))
    z = np.linspace(-_Z_MAX, _Z_MAX, n)
    return z, np.exp(-0.5 * z * z) * (z[1] - z[0]) / np.sqrt(2.0 * np.pi)


def _solve_ybar(loglam, bb, mask, iters=60):
    """Root of ``sum_i exp(loglam_i - bb_i y) = 1`` along the last axis.

    The log-sum-exp is convex and decreasing in ``y``; Newton from a point
    where it is non-negative converges monotonically.
    """
    ratio = np.where(mask, loglam / bb, -np.inf)
    y = ratio.max(axis=-1)
    for _ in range(iters):
        z = np.where(mask, loglam - bb * y[..., None], -np.inf)
        zmax = z.max(axis=-1, keepdims=True)
        w = np.exp(z - zmax)
        s = w.sum(axis=-1)
        h = np.log(s) + zmax[..., 0]
        dh = -(w * bb).sum(axis=-1) / s
        step = h / dh
        y = y - step
        if np.all(np.abs(step) <= 1e-14 * np.maximum(1.0, np.abs(y))):
            break
    return y


def swaption_price(p: G2Params, curve: YieldCurve, expiry, pay_times, accruals, strike, omega=1.0):
    """European swaption prices under G2++ (unit notional).

    The expectation over the first factor is taken by trapezoid quadrature
    on a step adapted to the correlation of the factors; for each node the
    exercise boundary in the second factor is solved exactly, which reduces
    the inner expectation to normal CDFs.

    Parameters
    ----------
    expiry : (n,) exercise times
    pay_times, accruals : (n, m) fixed-leg schedule, padded with ``accruals=0``
    strike : (n,) fixed rates
    omega : +1 payer, -1 receiver
    """
    T = np.atleast_1d(np.asarray(expiry, dtype=float))
    ti = np.atleast_2d(np.asarray(pay_times, dtype=float))
    tau = np.atleast_2d(np.asarray(accruals, dtype=float))
    K = np.broadcast_to(np.asarray(strike, dtype=float), T.shape)
    a, b, s, e, r = p.a1, p.a2, p.sigma1, p.sigma2, p.rho12

    mask = tau > 0.0
    last = mask.sum(axis=1) - 1
    c = K[:, None] * tau
    c[np.arange(T.size), last] += 1.0
    ti_safe = np.where(mask, ti, T[:, None] + 1.0)

    # moments of (x1, x2) at expiry under the expiry-forward measure
    eaT, ebT = np.exp(-a * T), np.exp(-b * T)
    mux = (-(s * s / (a * a) + r * s * e / (a * b)) * (1 - eaT)
           + s * s / (2 * a * a) * (1 - eaT ** 2) + r * s * e / (b * (a + b)) * (1 - ebT * eaT))
    muy = (-(e * e / (b * b) + r * s * e / (a * b)) * (1 - ebT)
           + e * e / (2 * b * b) * (1 - ebT ** 2) + r * s * e / (a * (a + b)) * (1 - ebT * eaT))
    sx = s * np.sqrt(bfun(2 * a, T))
    sy = e * np.sqrt(bfun(2 * b, T))
    rxy = r * s * e * bfun(a + b, T) / (sx * sy)
    sq = np.sqrt(1.0 - rxy * rxy)

    Ti = T[:, None]
    logA = log_bond_intercept(p, curve, Ti, ti_safe)
    ba = bfun(a, ti_safe - Ti)
    bb = bfun(b, ti_safe - Ti)

    ratio = np.max(np.where(mask, ba / np.where(mask, bb, 1.0), 0.0), axis=1)
    slope = float(np.max(sx * ratio / (sy * sq) + np.abs(rxy) / sq))
    nodes, weights = _outer_nodes(slope)
    z = nodes[None, :]
    x = mux[:, None] + sx[:, None] * z                                # (n, q)
    with np.errstate(divide="ignore"):
        loglam = np.log(np.where(mask, c, 1.0))[:, None, :] + logA[:, None, :] - ba[:, None, :] * x[..., None]
    m3 = np.broadcast_to(mask[:, None, :], loglam.shape)
    bb3 = np.broadcast_to(bb[:, None, :], loglam.shape)
    ybar = _solve_ybar(loglam, bb3, m3)

    h1 = ((ybar - muy[:, None]) / (sy[:, None] * sq[:, None]) - rxy[:, None] * z / sq[:, None])
    h2 = h1[..., None] + bb3 * (sy * sq)[:, None, None]
    kappa = -bb3 * (muy[:, None, None] - 0.5 * (sq * sq * sy * sy)[:, None, None] * bb3
                    + (rxy * sy)[:, None, None] * z[..., None])
    inner = ndtr(-omega * h1) - np.sum(np.where(m3, np.exp(loglam + kappa) * ndtr(-omega * h2), 0.0), axis=-1)
    p0T = g2_zcb(p, curve, 0.0, T, 0.0, 0.0)
    return omega * p0T * (inner @ weights)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SwaptionSet:
    """Annual-fixed ATM swaptions derived from a vol surface."""

    expiry: np.ndarray
    tenor: np.ndarray
    pay_times: np.ndarray
    accruals: np.ndarray
    annuity: np.ndarray
    forward: np.ndarray
    market_vol: np.ndarray


def atm_swaptions(surface: SwaptionVolSurface, curve: YieldCurve) -> SwaptionSet:
    quotes = surface.quotes()
    n = len(quotes)
    m = int(round(max(q[1] for q in quotes)))
    pay = np.zeros((n, m))
    acc = np.zeros((n, m))
    for k, (ex, ten, _) in enumerate(quotes):
        nk = int(round(ten))
        pay[k, :nk] = ex + np.arange(1, nk + 1)
        acc[k, :nk] = 1.0
    expiry = np.array([q[0] for q in quotes])
    tenor = np.array([q[1] for q in quotes])
    vols = np.array([q[2] for q in quotes])
    df = np.where(acc > 0, curve.discount(np.where(acc > 0, pay, 0.0)), 0.0)
    annuity = np.sum(acc * df, axis=1)
    end = expiry + tenor
    forward = (curve.discount(expiry) - curve.discount(end)) / annuity
    return SwaptionSet(expiry, tenor, pay, acc, annuity, forward, vols)


def black_atm_price(annuity, forward, vol, expiry):
    return annuity * forward * (2.0 * ndtr(0.5 * vol * np.sqrt(expiry)) - 1.0)


def black_atm_vol(price, annuity, forward, expiry):
    """Closed-form inversion of the ATM Black formula."""
    u = np.clip(0.5 * (price / (annuity * forward) + 1.0), 0.5, 1.0 - 1e-16)
    return 2.0 * ndtri(u) / np.sqrt(expiry)


def model_atm_vols(p: G2Params, curve: YieldCurve, sw: SwaptionSet) -> np.ndarray:
    prices = swaption_price(p, curve, sw.expiry, sw.pay_times, sw.accruals, sw.forward, 1.0)
    return black_atm_vol(prices, sw.annuity, sw.forward, sw.expiry)


@dataclass(frozen=True)
class CalibrationResult:
    params: G2Params
    rmse_vol_points: float
    success: bool
    message: str
    model_vols: np.ndarray
    market_vols: np.ndarray


DEFAULT_STARTS = (
    (0.06, 0.25, 0.014, 0.0067, -0.98),
    (0.5, 0.05, 0.010, 0.008, -0.7),
    (1.0, 0.03, 0.020, 0.008, -0.9),
    (0.2, 0.01, 0.008, 0.005, -0.5),
    (1.5, 0.10, 0.030, 0.015, -0.95),
)


def _vec(p: G2Params):
    return np.array([p.a1, p.a2, p.sigma1, p.sigma2, p.rho12])


def calibrate_g2(surface: SwaptionVolSurface, curve: YieldCurve, starts=DEFAULT_STARTS,
                 max_nfev: int = 400) -> CalibrationResult:
    """Least-squares fit of G2++ ATM swaption vols to the market surface.

    Residuals are model minus market implied Black vols; the ATM Black
    formula inverts in closed form so this costs one pricing per quote.
    Non-convergence is reported through ``success``; the best point found is
    always returned.
    """
    sw = atm_swaptions(surface, curve)
    lo = np.array([A_BOUNDS[0], A_BOUNDS[0], SIGMA_BOUNDS[0], SIGMA_BOUNDS[0], RHO_BOUNDS[0]])
    hi = np.array([A_BOUNDS[1], A_BOUNDS[1], SIGMA_BOUNDS[1], SIGMA_BOUNDS[1], RHO_BOUNDS[1]])

    def resid(v):
        with np.errstate(all="ignore"):
            out = model_atm_vols(G2Params(*v), curve, sw) - sw.market_vol
        return np.where(np.isfinite(out), out, 1.0)

    best = None
    for x0 in starts:
        x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
        try:
            fit = least_squares(resid, x0, bounds=(lo, hi), x_scale=np.array([0.1, 0.01, 0.005, 0.005, 0.1]),
                                max_nfev=max_nfev, xtol=1e-12, ftol=1e-12, gtol=1e-12)
        except (ValueError, FloatingPointError) as exc:   # pragma: no cover - defensive
            if best is None:
                best = (np.inf, x0, False, str(exc))
            continue
        cost = float(np.mean(fit.fun ** 2))
        if best is None or cost < best[0]:
            best = (cost, fit.x, bool(fit.success), fit.message)
    cost, x, ok, msg = best
    params = G2Params(*x)
    vols = model_atm_vols(params, curve, sw)
    rmse = float(np.sqrt(np.mean((vols - sw.market_vol) ** 2)) * 100.0)
    return CalibrationResult(params, rmse, ok, msg, vols, sw.market_vol)


def save_g2_params(p: G2Params, curve: YieldCurve, path, rmse: float | None = None) -> None:
    doc = p.to_dict()
    times = curve.times
    doc["phi_samples"] = {"times": times.tolist(), "values": phi(p, curve, times).tolist()}
    if rmse is not None:
        doc["rmse_vol_points"] = rmse
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_g2_params(path) -> G2Params:
    with open(path) as fh:
        return G2Params.from_dict(json.load(fh))
