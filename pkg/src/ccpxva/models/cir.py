"""Shifted square-root (CIR++) default intensity.

``lambda_t = y_t + psi(t)`` with ``dy = kappa (mu - y) dt + nu sqrt(y) dW``.
The shift ``psi`` makes the model survival curve match the bootstrapped
market hazard exactly.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

_DETERMINISTIC_NU = 1e-7


class HazardCurve(Protocol):
    def intensity(self, t): ...

    def cumulative(self, t): ...


@dataclass(frozen=True)
class CirParams:
    y0: float
    kappa: float
    mu: float
    nu: float

    def __post_init__(self):
        if min(self.y0, self.kappa, self.mu, self.nu) < 0:
            raise ValueError("CIR parameters must be non-negative")

    @property
    def feller_satisfied(self) -> bool:
        return 2.0 * self.kappa * self.mu >= self.nu ** 2


def _cir_terms(p: CirParams, tau):
    """``(log A, B)`` of the CIR bond ``E[exp(-int y)] = A exp(-B y)``."""
    tau = np.asarray(tau, dtype=float)
    if p.nu < _DETERMINISTIC_NU:
        # noise-free limit: y follows its ODE
        b = tau if p.kappa == 0.0 else -np.expm1(-p.kappa * tau) / p.kappa
        return -p.mu * (tau - b), b
    h = np.sqrt(p.kappa ** 2 + 2.0 * p.nu ** 2)
    em1 = np.expm1(h * tau)
    denom = 2.0 * h + (p.kappa + h) * em1
    b = 2.0 * em1 / denom
    log_a = (2.0 * p.kappa * p.mu / p.nu ** 2) * (np.log(2.0 * h) + 0.5 * (p.kappa + h) * tau - np.log(denom))
    return log_a, b


def cir_bond(p: CirParams, tau, y):
    """``E[exp(-int_t^{t+tau} y_u du) | y_t = y]`` in closed form."""
    log_a, b = _cir_terms(p, tau)
    return np.exp(log_a - b * np.asarray(y, dtype=float))


def cir_forward(p: CirParams, t):
    """Instantaneous forward intensity ``-d/dt log E[exp(-int_0^t y)]``."""
    t = np.asarray(t, dtype=float)
    if p.nu < _DETERMINISTIC_NU:
        return p.mu + (p.y0 - p.mu) * np.exp(-p.kappa * t)
    h = np.sqrt(p.kappa ** 2 + 2.0 * p.nu ** 2)
    em1 = np.expm1(h * t)
    denom = 2.0 * h + (p.kappa + h) * em1
    return 2.0 * p.kappa * p.mu * em1 / denom + p.y0 * 4.0 * h * h * (em1 + 1.0) / denom ** 2


@dataclass(frozen=True)
class CirShift:
    """Deterministic shift ``psi`` stored through the hazard it reproduces."""

    params: CirParams
    hazard: HazardCurve

    def __call__(self, t):
        return self.hazard.intensity(t) - cir_forward(self.params, t)

    def integral(self, t0, t1):
        """``int_{t0}^{t1} psi(u) du``, exact."""
        p = self.params
        la0, b0 = _cir_terms(p, t0)
        la1, b1 = _cir_terms(p, t1)
        log_p0 = la0 - b0 * p.y0
        log_p1 = la1 - b1 * p.y0
        return self.hazard.cumulative(t1) - self.hazard.cumulative(t0) + log_p1 - log_p0


@dataclass(frozen=True)
class CirPlusPlus:
    """CIR++ intensity model: parameters plus fitted shift."""

    params: CirParams
    shift: CirShift

    def survival(self, t, T, y_t):
        """``E_t[exp(-int_t^T lambda)]`` given ``y_t``, capped at one.

        A negative shift can push the raw value above one; it is clipped so the
        result stays a probability.
        """
        t = np.asarray(t, dtype=float)
        T = np.asarray(T, dtype=float)
        if np.any(T < t):
            raise ValueError("survival horizon precedes the valuation time")
        raw = cir_bond(self.params, T - t, np.maximum(y_t, 0.0)) * np.exp(-self.shift.integral(t, T))
        return np.minimum(raw, 1.0)

    def intensity(self, t, y_t):
        return np.maximum(y_t, 0.0) + self.shift(t)


def fit_cir_shift(params: CirParams, hazard: HazardCurve, check_times=None) -> CirPlusPlus:
    """Fit the shift so model survival at time 0 equals the market survival.

    A warning is issued when the shift turns negative on ``check_times``
    (default: a monthly grid over the hazard knots).
    """
    shift = CirShift(params, hazard)
    if check_times is None:
        knots = getattr(hazard, "knots", np.array([10.0]))
        check_times = np.linspace(0.0, float(np.max(knots)), int(12 * np.max(knots)) + 1)
    psi = shift(np.asarray(check_times, dtype=float))
    if np.any(psi < 0.0):
        warnings.warn(f"CIR++ shift is negative (min {psi.min():.3g}); intensities may go negative",
                      RuntimeWarning, stacklevel=2)
    return CirPlusPlus(params, shift)


def save_cir_params(models: dict, path, sample_times) -> None:
    doc = {}
    for name, m in models.items():
        entry = asdict(m.params)
        entry["psi_samples"] = {"times": list(map(float, sample_times)),
                                "values": m.shift(np.asarray(sample_times, dtype=float)).tolist()}
        if hasattr(m.shift.hazard, "knots"):
            entry["hazard"] = {"knots": m.shift.hazard.knots.tolist(), "rates": m.shift.hazard.rates.tolist()}
        doc[name] = entry
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
