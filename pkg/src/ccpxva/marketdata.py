"""Market term structures: zero curve, swaption volatilities and CDS quotes.

All times are ACT/360 year fractions measured from the curve anchor date.
Term structures are immutable once built and can be shared across threads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

DAYS_PER_YEAR = 360.0


class MarketDataError(ValueError):
    """Raised for malformed or inconsistent market data."""


class UnarbitrageableQuoteError(MarketDataError):
    """Raised when a CDS quote can only be matched by a negative hazard rate."""


def year_fraction(start: date, end: date) -> float:
    """ACT/360 year fraction between two dates."""
    return (end - start).days / DAYS_PER_YEAR


# ---------------------------------------------------------------------------
# Yield curve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class YieldCurve:
    """Zero curve with linear interpolation in log-discount.

    Parameters
    ----------
    times : array of pillar times (years, strictly increasing, > 0)
    zero_rates : continuously-compounded zero rates at the pillars
    anchor_date : valuation date the times are measured from

    Between the origin and the first pillar the log-discount is interpolated
    from ``log P(0) = 0``; beyond the last pillar the zero rate is held flat.
    """

    times: np.ndarray
    zero_rates: np.ndarray
    anchor_date: date | None = None
    _nodes: np.ndarray = field(init=False, repr=False, compare=False)
    _logdf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        r = np.asarray(self.zero_rates, dtype=float)
        if t.ndim != 1 or t.shape != r.shape or t.size == 0:
            raise MarketDataError("pillar times and rates must be 1-d arrays of equal length")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(r)):
            raise MarketDataError("pillar times and rates must be finite")
        if t[0] <= 0.0:
            raise MarketDataError("pillar times must be positive")
        if np.any(np.diff(t) <= 0.0):
            raise MarketDataError("pillar times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "zero_rates", r)
        object.__setattr__(self, "_nodes", np.concatenate(([0.0], t)))
        object.__setattr__(self, "_logdf", np.concatenate(([0.0], -r * t)))

    def log_discount(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0):
            raise MarketDataError("negative time")
        inside = np.interp(t, self._nodes, self._logdf)
        beyond = -self.zero_rates[-1] * t
        return np.where(t > self.times[-1], beyond, inside)

    def discount(self, t):
        return np.exp(self.log_discount(t))

    def zero_rate(self, t):
        t = np.asarray(t, dtype=float)
        safe = np.where(t > 0.0, t, 1.0)
        z = -self.log_discount(safe) / safe
        return np.where(t > 0.0, z, self.zero_rates[0])

    def forward_rate(self, t):
        """Instantaneous forward rate (right limit at the nodes)."""
        t = np.asarray(t, dtype=float)
        nodes = self._nodes
        slopes = -np.diff(self._logdf) / np.diff(nodes)
        k = np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, len(slopes) - 1)
        return np.where(t >= self.times[-1], self.zero_rates[-1], slopes[k])

    @property
    def nodes(self) -> np.ndarray:
        """Knot times (including the origin) where the forward rate may jump."""
        return self._nodes


def build_yield_curve(raw_pillars: Sequence[tuple[date, float]], anchor_date: date) -> YieldCurve:
    """Build a :class:`YieldCurve` from ``(date, zero_rate)`` pairs."""
    dates = [d for d, _ in raw_pillars]
    if any(b <= a for a, b in zip(dates, dates[1:])):
        raise MarketDataError("pillar dates must be strictly increasing")
    times = np.array([year_fraction(anchor_date, d) for d in dates])
    if np.any(times <= 0.0):
        raise MarketDataError("pillar dates must fall after the anchor date")
    rates = np.array([float(r) for _, r in raw_pillars])
    return YieldCurve(times, rates, anchor_date)


# ---------------------------------------------------------------------------
# Swaption volatilities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SwaptionVolSurface:
    """ATM lognormal (Black) swaption volatilities on an expiry x tenor grid."""

    expiries: np.ndarray
    tenors: np.ndarray
    vols: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.expiries, dtype=float)
        b = np.asarray(self.tenors, dtype=float)
        v = np.asarray(self.vols, dtype=float)
        if v.shape != (e.size, b.size):
            raise MarketDataError("volatility grid must be expiries x tenors")
        if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
            raise MarketDataError("all swaption vols must be positive")
        object.__setattr__(self, "expiries", e)
        object.__setattr__(self, "tenors", b)
        object.__setattr__(self, "vols", v)

    def quotes(self):
        """Flat list of ``(expiry, tenor, vol)`` triples in row-major order."""
        return [(float(e), float(b), float(self.vols[i, j]))
                for i, e in enumerate(self.expiries) for j, b in enumerate(self.tenors)]


# ---------------------------------------------------------------------------
# CDS quotes and hazard curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CdsCurve:
    """Par CDS spreads (basis points) by maturity (years)."""

    maturities: np.ndarray
    spreads: np.ndarray
    recovery: float = 0.4
    name: str = ""

    def __post_init__(self):
        m = np.asarray(self.maturities, dtype=float)
        s = np.asarray(self.spreads, dtype=float)
        if m.shape != s.shape or m.ndim != 1:
            raise MarketDataError("CDS maturities and spreads must match")
        if np.any(np.diff(m) <= 0.0) or m[0] <= 0.0:
            raise MarketDataError("CDS maturities must be positive and strictly increasing")
        if np.any(s <= 0.0):
            raise MarketDataError("CDS spreads must be positive")
        if not 0.0 <= self.recovery < 1.0:
            raise MarketDataError("recovery must lie in [0, 1)")
        object.__setattr__(self, "maturities", m)
        object.__setattr__(self, "spreads", s)


@dataclass(frozen=True)
class PiecewiseHazard:
    """Piecewise-constant hazard rate, ``rates[k]`` on ``(knots[k-1], knots[k]]``.

    The last rate is extended flat beyond the final knot.
    """

    knots: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        r = np.asarray(self.rates, dtype=float)
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "rates", r)
        starts = np.concatenate(([0.0], k[:-1]))
        cum = np.concatenate(([0.0], np.cumsum(r * (k - starts))))
        object.__setattr__(self, "_cum", cum)

    def intensity(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.knots, t, side="left"), 0, self.rates.size - 1)
        return self.rates[idx]

    def cumulative(self, t):
        """Integrated hazard from 0 to ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.knots, t, side="left"), 0, self.rates.size - 1)
        start = np.where(idx > 0, self.knots[np.maximum(idx - 1, 0)], 0.0)
        return self._cum[idx] + self.rates[idx] * (t - start)

    def survival(self, t):
        return np.exp(-self.cumulative(t))


def _phi1(k, h):
    """(1 - exp(-k h)) / k, stable as k -> 0."""
    kh = k * h
    return np.where(np.abs(kh) > 1e-8, -np.expm1(-kh) / np.where(k == 0.0, 1.0, k), h * (1.0 - 0.5 * kh))


def _phi2(k, h):
    """Integral of v exp(-k v) over [0, h], stable as k -> 0."""
    kh = k * h
    kk = np.where(k == 0.0, 1.0, k)
    exact = (-np.expm1(-kh) - kh * np.exp(-kh)) / (kk * kk)
    series = h * h * (0.5 - kh / 3.0 + kh * kh / 8.0)
    return np.where(np.abs(kh) > 1e-4, exact, series)


def cds_legs(hazard: PiecewiseHazard, curve: YieldCurve, maturity: float, recovery: float,
             frequency: int = 4) -> tuple[float, float]:
    """Risky annuity and protection-leg value of a CDS.

    Premiums are paid ``frequency`` times a year with accrual on default; the
    protection pays ``1 - recovery`` at the default time.  Discount and
    hazard are both piecewise flat, so every sub-interval integral is exact.

    Returns
    -------
    (annuity, protection) : premium-leg value per unit spread, protection value
    """
    pay = np.arange(1, int(round(maturity * frequency)) + 1) / frequency
    pay[-1] = maturity
    cuts = np.unique(np.concatenate((
        [0.0], pay,
        curve.nodes[curve.nodes < maturity],
        hazard.knots[hazard.knots < maturity])))
    a, b = cuts[:-1], cuts[1:]
    h = b - a
    mid = 0.5 * (a + b)
    lam = hazard.intensity(mid)
    r = (curve.log_discount(a) - curve.log_discount(b)) / h
    start_ps = curve.discount(a) * hazard.survival(a)
    k = r + lam
    # accrual start of the premium period containing each sub-interval
    period = np.searchsorted(pay, mid, side="left")
    acc_start = np.where(period > 0, pay[np.maximum(period - 1, 0)], 0.0)
    ps_int = start_ps * _phi1(k, h)
    protection = (1.0 - recovery) * np.sum(lam * ps_int)
    accrued = np.sum(lam * start_ps * ((a - acc_start) * _phi1(k, h) + _phi2(k, h)))
    tau = np.diff(np.concatenate(([0.0], pay)))
    annuity = np.sum(tau * curve.discount(pay) * hazard.survival(pay)) + accrued
    return float(annuity), float(protection)


def bootstrap_hazard(cds: CdsCurve, curve: YieldCurve, frequency: int = 4) -> PiecewiseHazard:
    """Sequentially bootstrap a piecewise-constant hazard from par CDS spreads.

    Raises
    ------
    UnarbitrageableQuoteError
        If a quote can only be matched with a negative hazard on some segment.
    """
    knots = cds.maturities
    rates = np.zeros(knots.size)
    for n, (mat, spread_bp) in enumerate(zip(knots, cds.spreads)):
        s = spread_bp * 1e-4

        def mismatch(lam):
            trial = rates.copy()
            trial[n:] = lam
            ann, prot = cds_legs(PiecewiseHazard(knots, trial), curve, mat, cds.recovery, frequency)
            return s * ann - prot

        if mismatch(0.0) < 0.0:
            raise UnarbitrageableQuoteError(
                f"CDS {cds.name or ''} {mat:g}y at {spread_bp:g}bp needs a negative hazard")
        hi = max(4.0 * s / (1.0 - cds.recovery), 1e-4)
        while mismatch(hi) > 0.0:
            hi *= 2.0
        rates[n:] = brentq(mismatch, 0.0, hi, xtol=1e-16, rtol=1e-15, maxiter=200)
    return PiecewiseHazard(knots, rates)


def cds_par_spread(hazard: PiecewiseHazard, curve: YieldCurve, maturity: float, recovery: float,
                   frequency: int = 4) -> float:
    """Par spread (decimal) implied by a hazard curve."""
    ann, prot = cds_legs(hazard, curve, maturity, recovery, frequency)
    return prot / ann


# ---------------------------------------------------------------------------
# JSON loading
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarketData:
    """Bundle of the three market inputs plus the tabulated CIR parameter sets."""

    curve: YieldCurve
    swaptions: SwaptionVolSurface
    cds: dict
    cir_sets: dict


def _parse_market(doc: dict) -> MarketData:
    try:
        anchor = date.fromisoformat(doc["anchor_date"])
        pillars = [(date.fromisoformat(p["date"]), float(p["rate"])) for p in doc["yield_pillars"]]
        curve = build_yield_curve(pillars, anchor)
        quotes = doc["swaption_vols"]
        expiries = sorted({float(q["expiry"]) for q in quotes})
        tenors = sorted({float(q["tenor"]) for q in quotes})
        grid = np.full((len(expiries), len(tenors)), np.nan)
        for q in quotes:
            grid[expiries.index(float(q["expiry"])), tenors.index(float(q["tenor"]))] = float(q["vol"])
        if np.isnan(grid).any():
            raise MarketDataError("swaption vol grid is incomplete")
        surface = SwaptionVolSurface(np.array(expiries), np.array(tenors), grid)
        cds, cir_sets = {}, {}
        for entry in doc["cds_curves"]:
            name = entry["name"]
            mats = [float(q["maturity"]) for q in entry["quotes"]]
            spreads = [float(q["spread_bp"]) for q in entry["quotes"]]
            cds[name] = CdsCurve(np.array(mats), np.array(spreads), float(entry.get("recovery", 0.4)), name)
            if "cir" in entry:
                cir_sets[name] = dict(entry["cir"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, MarketDataError):
            raise
        raise MarketDataError(f"malformed market data: {exc}") from exc
    return MarketData(curve, surface, cds, cir_sets)


def load_market_data(path: str | Path | None = None) -> MarketData:
    """Load market data from JSON; ``None`` loads the bundled 26-May-2009 set."""
    if path is None or str(path) == "builtin":
        text = resources.files("ccpxva.data").joinpath("market_2009.json").read_text()
    else:
        text = Path(path).read_text()
    return _parse_market(json.loads(text))
