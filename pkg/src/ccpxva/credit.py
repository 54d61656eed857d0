"""Default-time algebra: intensities over the margin period and close-out cash flows.

Cash flows are seen from the investor ("I"); the counterparty is "C".
``x^+ = max(x, 0)`` and ``x^- = min(x, 0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

VARIANTS = ("explicit", "rehyp", "norehyp", "ccp")
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pos(x):
    return np.maximum(x, 0.0)


def _neg(x):
    return np.minimum(x, 0.0)


@dataclass(frozen=True)
class CreditConfig:
    """Recoveries on the exposure (``R``) and on re-hypothecated collateral (``R'``).

    Unset collateral recoveries default to ``R`` when re-hypothecation is
    allowed and to one otherwise.
    """

    R_C: float = 0.4
    R_I: float = 0.4
    R_C_prime: float | None = None
    R_I_prime: float | None = None
    rehypothecation: bool = True

    def __post_init__(self):
        for name in ("R_C", "R_I"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name, base in (("R_C_prime", self.R_C), ("R_I_prime", self.R_I)):
            v = getattr(self, name)
            if v is None:
                object.__setattr__(self, name, base if self.rehypothecation else 1.0)
            elif not base <= v <= 1.0:
                raise ValueError(f"{name} must lie in [{name[:3]}, 1]")

    @property
    def lgd_c(self) -> float:
        return 1.0 - self.R_C

    @property
    def lgd_i(self) -> float:
        return 1.0 - self.R_I

    @property
    def lgd_c_prime(self) -> float:
        return 1.0 - self.R_C_prime

    @property
    def lgd_i_prime(self) -> float:
        return 1.0 - self.R_I_prime

    def mirrored(self) -> "CreditConfig":
        return CreditConfig(self.R_I, self.R_C, self.R_I_prime, self.R_C_prime, self.rehypothecation)


# ---------------------------------------------------------------------------
# Intensities over the margin period of risk
# ---------------------------------------------------------------------------

def lambda_delta(lam_c, lam_i, surv_c, surv_i):
    """Intensities of each name defaulting first or within ``delta`` of the other's default.

    ``surv_k`` is the survival factor of name ``k`` over ``(t, t + delta]``.
    """
    lam_c = np.asarray(lam_c, dtype=float)
    lam_i = np.asarray(lam_i, dtype=float)
    return lam_c + lam_i * (1.0 - surv_c), lam_i + lam_c * (1.0 - surv_i)


def lambda_delta_on_paths(paths, i: int, delta: float):
    """``(lambda^C, lambda^I, lambda^{delta,C}, lambda^{delta,I})`` at grid time ``i``."""
    t = paths.times[i]
    lam = {k: paths.intensity(k, i) for k in ("C", "I")}
    if delta <= 0.0:
        return lam["C"], lam["I"], lam["C"], lam["I"]
    surv = {k: np.minimum(paths.credit[k].survival(t, t + delta, paths.y(k)[i]), 1.0) for k in ("C", "I")}
    lc, li = lambda_delta(lam["C"], lam["I"], surv["C"], surv["I"])
    return lam["C"], lam["I"], lc, li


# ---------------------------------------------------------------------------
# Close-out cash flows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DefaultScenario:
    """Inputs of the close-out at the end of the margin period.

    ``epsilon`` is the delayed close-out amount, ``M``, ``NC`` and ``NI`` the
    margin accounts just before default.  Fields may be arrays.
    """

    epsilon: object
    M: object
    NC: object
    NI: object
    counterparty_first: object = True
    survivor_defaults_within_delta: object = False

    def indicators(self):
        """``(1{tau_C < tau_I + delta}, 1{tau_I < tau_C + delta})``."""
        cf = np.asarray(self.counterparty_first, dtype=bool)
        w = np.asarray(self.survivor_defaults_within_delta, dtype=bool)
        return cf | w, ~cf | w


def _counterparty_first_flows(eps, M, NC, NI, within, cr: CreditConfig):
    """Cash flows at the end of the margin period when C defaults first.

    Each branch follows the sign combination of exposure and variation
    margin; the investor defaulting inside the period only matters where the
    investor still holds something the counterparty is owed.
    """
    eps, M, NC, NI = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (eps, M, NC, NI)))
    within = np.broadcast_to(np.asarray(within, dtype=bool), eps.shape)
    R_C, R_I, Rp_C, Rp_I = cr.R_C, cr.R_I, cr.R_C_prime, cr.R_I_prime
    d = eps - M
    e_pos, m_pos = eps >= 0.0, M >= 0.0
    out = np.zeros_like(eps)

    # exposure >= 0, margin >= 0
    c = e_pos & m_pos
    b1 = c & (d >= NC)
    out = np.where(b1, R_C * (d - NC) - NI, out)
    b2 = c & (d >= 0.0) & (d < NC)
    out = np.where(b2, d - NC - NI, out)
    b3 = c & (d < 0.0)
    a = d - NI
    out = np.where(b3 & ~within, d - NC - NI, out)
    out = np.where(b3 & within, _pos(a) + Rp_I * _neg(a) - NC, out)

    # exposure >= 0, margin < 0
    c = e_pos & ~m_pos
    out = np.where(c & (eps >= NC), R_C * (eps - NC) - Rp_C * M - NI, out)
    g = d - NC
    out = np.where(c & (eps < NC), _neg(g) + Rp_C * _pos(g) - NI, out)

    # exposure < 0, margin >= 0
    c = ~e_pos & m_pos
    out = np.where(c & ~within, d - NC - NI, out)
    h = _pos(eps - NI) - M
    out = np.where(c & within, R_I * _neg(eps - NI) + Rp_I * _neg(h) + _pos(h) - NC, out)

    # exposure < 0, margin < 0
    c = ~e_pos & ~m_pos
    out = np.where(c & (d >= NC), Rp_C * (d - NC) - NI, out)
    out = np.where(c & (d >= 0.0) & (d < NC), d - NC - NI, out)
    b3 = c & (d < 0.0)
    out = np.where(b3 & ~within, d - NC - NI, out)
    out = np.where(b3 & within, _pos(a) + R_I * _neg(a) - NC, out)
    return out


def closeout_casewise(scenario: DefaultScenario, credit: CreditConfig):
    """Close-out value from the case-by-case cash flows.

    Returns the cash flows plus the margin accounts held just before default,
    which is the quantity the compact formulas describe.  Investor-first
    scenarios reuse the counterparty-first cases with names exchanged and
    all signs reversed.
    """
    eps, M, NC, NI = (np.asarray(v, dtype=float) for v in (scenario.epsilon, scenario.M, scenario.NC, scenario.NI))
    within = scenario.survivor_defaults_within_delta
    cf = np.asarray(scenario.counterparty_first, dtype=bool)
    direct = _counterparty_first_flows(eps, M, NC, NI, within, credit)
    mirror = -_counterparty_first_flows(-eps, -M, -NI, -NC, within, credit.mirrored())
    return np.where(cf, direct, mirror) + M + NC + NI


def closeout_compact(scenario: DefaultScenario, credit: CreditConfig, variant: str = "explicit"):
    """Pathwise close-out integrand of the compact formulas."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown close-out variant {variant!r}")
    eps, M, NC, NI = (np.asarray(v, dtype=float) for v in (scenario.epsilon, scenario.M, scenario.NC, scenario.NI))
    ind_c, ind_i = scenario.indicators()
    if variant == "ccp":
        NI = np.zeros_like(NI)
    if variant in ("rehyp", "ccp"):
        loss_c = credit.lgd_c * _pos(eps - NC - M)
        loss_i = credit.lgd_i * _neg(eps - NI - M)
    else:
        loss_c = credit.lgd_c * _pos(_pos(eps - NC) - _pos(M))
        loss_i = credit.lgd_i * _neg(_neg(eps - NI) - _neg(M))
        if variant == "explicit":
            loss_c = loss_c + credit.lgd_c_prime * _pos(_neg(eps - NC) - _neg(M))
            loss_i = loss_i + credit.lgd_i_prime * _neg(_pos(eps - NI) - _pos(M))
    return eps - np.where(ind_c, loss_c, 0.0) - np.where(ind_i, loss_i, 0.0)


# ---------------------------------------------------------------------------
# Gaussian expectations of the loss terms
# ---------------------------------------------------------------------------

def normal_call(m, nu):
    """``E[(Z + m)^+]`` for ``Z ~ N(0, nu^2)``; exact ``max(m, 0)`` when ``nu = 0``."""
    m = np.asarray(m, dtype=float)
    nu = np.asarray(nu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = m / nu
        val = nu * _INV_SQRT_2PI * np.exp(-0.5 * z * z) + m * ndtr(z)
    return np.where(nu > 0.0, val, _pos(m))


def normal_put(m, nu):
    """``E[(Z + m)^-]``; the put-call parity ``m - E[(Z + m)^+]``."""
    m = np.asarray(m, dtype=float)
    nu = np.asarray(nu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = m / nu
        val = m * ndtr(-z) - nu * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return np.where(nu > 0.0, val, _neg(m))


def expected_losses(eps, nu, M, NC, NI, credit: CreditConfig, variant: str = "rehyp"):
    """Expected loss terms ``(L_C >= 0, L_I <= 0)`` with ``eps_{t+delta} ~ eps + N(0, nu^2)``.

    ``L_C`` multiplies ``lambda^{delta,C}`` and ``L_I`` multiplies
    ``lambda^{delta,I}`` in the coupon process.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown close-out variant {variant!r}")
    eps, nu, M, NC, NI = (np.asarray(v, dtype=float) for v in (eps, nu, M, NC, NI))
    if variant == "ccp":
        NI = np.zeros_like(NI)
    if variant in ("rehyp", "ccp"):
        return (credit.lgd_c * normal_call(eps - NC - M, nu),
                credit.lgd_i * normal_put(eps - NI - M, nu))
    mp, mm = _pos(M), _neg(M)
    loss_c = credit.lgd_c * normal_call(eps - NC - mp, nu)
    loss_i = credit.lgd_i * normal_put(eps - NI - mm, nu)
    if variant == "explicit":
        # (a^- - b)^+ = (a - b)^+ - a^+ for b <= 0, and its mirror for the investor
        loss_c = loss_c + credit.lgd_c_prime * (normal_call(eps - NC - mm, nu) - normal_call(eps - NC, nu))
        loss_i = loss_i + credit.lgd_i_prime * (normal_put(eps - NI - mp, nu) - normal_put(eps - NI, nu))
    return loss_c, loss_i
