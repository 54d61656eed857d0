"""Funding-cost-free price, FVA backward scheme and the five-way price decomposition.

Conventions
-----------
Everything is computed from the investor's side on a swap of unit notional.
For the counterparty perspective the investor-side equations are evaluated
on the opposite trade with the counterparty's liquidity bases, then the
results are negated and the CVA/DVA labels exchanged.

Amounts are in units of notional; :meth:`ValuationResult.in_bp` converts.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .credit import CreditConfig, expected_losses, lambda_delta
from .exposure_margin import (MarginConfig, TradeSpec, exposure_on_paths, im_stddev_on_paths,
                              initial_margin)
from .simulation import Regressor

PERSPECTIVES = ("investor", "counterparty")
COMPONENTS = ("mtm", "cva", "dva", "mva", "fva")
MIN_BATCH = 150
BP = 1e4


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FundingConfig:
    """Liquidity multipliers ``beta^+`` (borrowing) and ``beta^-`` (lending)."""

    beta_plus: float = 1.0
    beta_minus: float = 1.0
    perspective: str = "investor"

    def __post_init__(self):
        for name in ("beta_plus", "beta_minus"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.perspective not in PERSPECTIVES:
            raise ValueError(f"unknown perspective {self.perspective!r}")

    def bases(self, lam_c, lam_i):
        """``(l^+, l^-, l^{N^C}, l^{N^I})`` scaled by the calculating party's intensity."""
        if self.perspective == "investor":
            lp, lm = self.beta_plus * lam_i, self.beta_minus * lam_i
            return lp, lm, np.zeros_like(lp), lp
        lp, lm = self.beta_plus * lam_c, self.beta_minus * lam_c
        return lp, lm, lm, np.zeros_like(lp)


@dataclass(frozen=True)
class PricingConfig:
    """One scenario point: margining, recoveries and funding."""

    margin: MarginConfig = field(default_factory=MarginConfig)
    credit: CreditConfig = field(default_factory=CreditConfig)
    funding: FundingConfig = field(default_factory=FundingConfig)
    closeout: str | None = None

    @property
    def variant(self) -> str:
        if self.closeout is not None:
            return self.closeout
        return "ccp" if self.margin.mode == "ccp" else "explicit"


@dataclass
class ValuationResult:
    """Price split into mark-to-market and the four adjustments, with batch standard errors."""

    mtm: float
    cva: float
    dva: float
    mva: float
    fva: float
    se: dict
    n_paths: int
    seed: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.mtm + self.cva + self.dva + self.mva + self.fva

    def components(self) -> dict:
        return {k: getattr(self, k) for k in COMPONENTS}

    def in_bp(self) -> dict:
        out = {k: v * BP for k, v in self.components().items()}
        out["total"] = self.total * BP
        out.update({f"se_{k}": v * BP for k, v in self.se.items()})
        return out


# ---------------------------------------------------------------------------
# Per-path inputs shared across scenario points
# ---------------------------------------------------------------------------

class ExposureCube:
    """Close-out amounts, intensities and step discounts on every path and step.

    Quantities depending on the margin period (IM volatility and modified
    intensities) are cached per ``delta``; regressors per path batch.
    """

    def __init__(self, paths, trade: TradeSpec):
        if trade.fixed_rate is None:
            raise ValueError("trade strike is unresolved; call resolve_trade first")
        self.paths = paths
        self.trade = trade
        n = len(paths.grid) - 1
        self.n_steps = n
        self.dt = paths.grid.dt
        self.eps = np.array([exposure_on_paths(trade, paths, i) for i in range(n)])
        self.lam_c = np.array([paths.intensity("C", i) for i in range(n)])
        self.lam_i = np.array([paths.intensity("I", i) for i in range(n)])
        self.disc = np.empty_like(self.eps)
        for i in range(n):
            integral = (paths.step_rate_integral(i) + paths.step_intensity_integral("C", i)
                        + paths.step_intensity_integral("I", i))
            self.disc[i] = np.exp(-integral)
        # D(t_0, t_i; e + lambda^C + lambda^I) at the left point of each step
        self.cum_disc = np.vstack([np.ones(paths.n_paths), np.cumprod(self.disc, axis=0)[:-1]])
        self._delta: dict = {}
        self._regressors: dict = {}

    @property
    def n_paths(self) -> int:
        return self.paths.n_paths

    def delta_terms(self, delta: float):
        """``(nu, lambda^{delta,C}, lambda^{delta,I})`` per step."""
        key = round(float(delta), 12)
        if key not in self._delta:
            p = self.paths
            if delta <= 0.0:
                nu = np.zeros_like(self.eps)
                ldc, ldi = self.lam_c, self.lam_i
            else:
                nu = np.array([im_stddev_on_paths(self.trade, p, i, delta) for i in range(self.n_steps)])
                ldc = np.empty_like(nu)
                ldi = np.empty_like(nu)
                for i in range(self.n_steps):
                    t = p.times[i]
                    sc = p.credit["C"].survival(t, t + delta, p.yC[i])
                    si = p.credit["I"].survival(t, t + delta, p.yI[i])
                    ldc[i], ldi[i] = lambda_delta(self.lam_c[i], self.lam_i[i], sc, si)
            self._delta[key] = (nu, ldc, ldi)
        return self._delta[key]

    def regressors(self, sl: slice):
        key = (sl.start, sl.stop)
        if key not in self._regressors:
            p = self.paths
            self._regressors[key] = [Regressor(np.array([a[i, sl] for a in (p.x1, p.x2, p.yC, p.yI)]))
                                     for i in range(self.n_steps)]
        return self._regressors[key]


def build_cube(paths, trade: TradeSpec) -> ExposureCube:
    return ExposureCube(paths, trade)


def _batches(n_paths: int, n_batches: int):
    """Contiguous path batches, fewer if a batch would be too small to regress on."""
    b = min(n_batches, n_paths // MIN_BATCH)
    if b < 2:
        return []
    edges = np.linspace(0, n_paths, b + 1).astype(int)
    return [slice(int(edges[k]), int(edges[k + 1])) for k in range(b)]


def _batch_se(per_path: np.ndarray, batches) -> float:
    if not batches:
        return float("nan")
    means = np.array([per_path[s].mean() for s in batches])
    return float(means.std(ddof=1) / np.sqrt(len(means)))


# ---------------------------------------------------------------------------
# Coupon process
# ---------------------------------------------------------------------------

@dataclass
class Coupons:
    """Per-step coupon pieces ``(n_steps, n_paths)``; their sum is ``Delta pi``."""

    cva: np.ndarray
    dva: np.ndarray
    mva: np.ndarray
    l_plus: np.ndarray
    l_minus: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.cva + self.dva + self.mva


def coupon_increment(eps, nu, lam_c, lam_i, lam_dc, lam_di, dt, margin: MarginConfig,
                     credit: CreditConfig, funding: FundingConfig, variant: str = "explicit"):
    """``Delta pi`` split into ``(cva, dva, mva)`` pieces at one or many steps.

    The delayed close-out is ``eps + Z`` with ``Z ~ N(0, nu^2)``; the
    variation margin is ``alpha * eps`` and the initial margins follow the
    same normal law.
    """
    M = margin.vm_fraction * np.asarray(eps, dtype=float)
    nc, ni = initial_margin(margin, nu)
    if variant == "ccp":
        ni = np.zeros_like(ni)
    loss_c, loss_i = expected_losses(eps, nu, M, nc, ni, credit, variant)
    _, _, l_nc, l_ni = funding.bases(np.asarray(lam_c, dtype=float), np.asarray(lam_i, dtype=float))
    return (-lam_dc * loss_c * dt, -lam_di * loss_i * dt, (l_nc * nc + l_ni * ni) * dt)


def coupons(cube: ExposureCube, cfg: PricingConfig, sign: float = 1.0) -> Coupons:
    """Coupons of the position (``sign=1``) or of its short (``sign=-1``, every integrand negated)."""
    nu, ldc, ldi = cube.delta_terms(cfg.margin.delta)
    dt = cube.dt[:, None]
    cva, dva, mva = coupon_increment(cube.eps, nu, cube.lam_c, cube.lam_i, ldc, ldi, dt,
                                     cfg.margin, cfg.credit, cfg.funding, cfg.variant)
    lp, lm, _, _ = cfg.funding.bases(cube.lam_c, cube.lam_i)
    if sign < 0:
        cva, dva, mva = -cva, -dva, -mva
    return Coupons(cva, dva, mva, lp, lm)


# ---------------------------------------------------------------------------
# Funding-cost-free price
# ---------------------------------------------------------------------------

def forward_components(cube: ExposureCube, cp: Coupons):
    """Pathwise discounted sums of the CVA, DVA and MVA coupons."""
    d = cube.cum_disc
    return {"cva": (d * cp.cva).sum(axis=0), "dva": (d * cp.dva).sum(axis=0),
            "mva": (d * cp.mva).sum(axis=0)}


def backward_y0(cube: ExposureCube, cp: Coupons, sl: slice | None = None) -> np.ndarray:
    """``Y^0`` on every path and step by regression; row ``i`` is ``Y^0_{t_i}``.

    ``Y^0_{t_i} = E_{t_i}[D_i Y^0_{t_{i+1}}] + Delta pi_i`` with ``Y^0_{t_n} = 0``.
    """
    sl = sl or slice(0, cube.n_paths)
    regs = cube.regressors(sl)
    pi = cp.total[:, sl]
    disc = cube.disc[:, sl]
    y = np.zeros((cube.n_steps + 1, pi.shape[1]))
    for i in range(cube.n_steps - 1, -1, -1):
        y[i] = regs[i].fit(disc[i] * y[i + 1]) + pi[i]
    return y


def price_v0(cube: ExposureCube, cfg: PricingConfig, n_batches: int = 20):
    """Funding-cost-free price at ``t_0``: forward estimate, its SE, and the backward cross-check."""
    cp = coupons(cube, cfg)
    parts = forward_components(cube, cp)
    per_path = parts["cva"] + parts["dva"] + parts["mva"]
    batches = _batches(cube.n_paths, n_batches)
    mtm = float(cube.eps[0].mean())
    y0 = backward_y0(cube, cp)
    return {"v0": mtm + float(per_path.mean()), "se": _batch_se(per_path, batches),
            "v0_backward": mtm + float(y0[0].mean()), "process": y0}


# ---------------------------------------------------------------------------
# FVA
# ---------------------------------------------------------------------------

def _fva_scheme(cube: ExposureCube, cp: Coupons, y0: np.ndarray, sl: slice) -> np.ndarray:
    """Backward control-variate scheme for ``X = Y - Y^0`` on the paths in ``sl``.

    The discount at ``e + lambda^C + lambda^I`` is applied exactly inside the
    conditional expectation, so the rate acting on ``Y = V - eps`` is the
    liquidity basis alone, chosen by the sign of the estimated ``Y``.
    """
    regs = cube.regressors(sl)
    disc = cube.disc[:, sl]
    lp, lm = cp.l_plus[:, sl], cp.l_minus[:, sl]
    x = np.zeros(disc.shape[1])
    if not (np.any(lp) or np.any(lm)):
        return x
    for i in range(cube.n_steps - 1, -1, -1):
        xc = regs[i].fit(disc[i] * x)
        y = y0[i] + xc
        rate = np.where(y >= 0.0, lp[i], lm[i])
        x = xc - rate * y * cube.dt[i]
    return x


def _fva_batches(cube: ExposureCube, cp: Coupons, n_batches: int) -> np.ndarray:
    """FVA re-estimated on each path batch (regressions refitted per batch)."""
    batches = _batches(cube.n_paths, n_batches)
    if not (np.any(cp.l_plus) or np.any(cp.l_minus)):
        return np.zeros(len(batches))
    return np.array([_fva_scheme(cube, cp, backward_y0(cube, cp, s), s).mean() for s in batches])


def _se_of(means: np.ndarray) -> float:
    if means.size < 2:
        return float("nan")
    return float(means.std(ddof=1) / np.sqrt(means.size))


def backward_fva(cube: ExposureCube, cfg: PricingConfig, n_batches: int = 20, cp: Coupons | None = None,
                 return_process: bool = False):
    """FVA at ``t_0`` with a standard error from re-running the scheme per batch.

    With ``return_process`` the pathwise ``X_{t_0}`` values are returned too.
    """
    cp = cp or coupons(cube, cfg)
    full = slice(0, cube.n_paths)
    x = _fva_scheme(cube, cp, backward_y0(cube, cp, full), full)
    out = (float(x.mean()), _se_of(_fva_batches(cube, cp, n_batches)))
    return out + (x,) if return_process else out


def linear_fva(cube: ExposureCube, cfg: PricingConfig, n_batches: int = 20):
    """FVA when borrowing and lending bases coincide, by plain forward accumulation.

    With a sign-independent basis the scheme is linear and
    ``Y_0 = E[sum_i prod_{j<i} D_j (1 - l_j dt_j) (1 - l_i dt_i) Delta pi_i]``.
    """
    if cfg.funding.beta_plus != cfg.funding.beta_minus:
        raise ValueError("the linear evaluation needs beta_plus == beta_minus")
    cp = coupons(cube, cfg)
    ldt = cp.l_plus * cube.dt[:, None]
    pi = cp.total
    y = np.zeros(cube.n_paths)
    y0 = np.zeros(cube.n_paths)
    weight = np.ones(cube.n_paths)
    for i in range(cube.n_steps):
        y += weight * cube.cum_disc[i] * (1.0 - ldt[i]) * pi[i]
        weight = weight * (1.0 - ldt[i])
        y0 += cube.cum_disc[i] * pi[i]
    per_path = y - y0
    return float(per_path.mean()), _batch_se(per_path, _batches(cube.n_paths, n_batches))


# ---------------------------------------------------------------------------
# Decomposition
# ---------------------------------------------------------------------------

def _investor_view(cube: ExposureCube, cfg: PricingConfig, n_batches: int, sign: float = 1.0) -> ValuationResult:
    cp = coupons(cube, cfg, sign)
    parts = forward_components(cube, cp)
    batches = _batches(cube.n_paths, n_batches)
    full = slice(0, cube.n_paths)
    fva = float(_fva_scheme(cube, cp, backward_y0(cube, cp, full), full).mean())
    fva_means = _fva_batches(cube, cp, n_batches)
    fva_se = _se_of(fva_means)
    mtm = sign * float(cube.eps[0].mean())
    se = {k: _batch_se(v, batches) for k, v in parts.items()}
    se["mtm"] = 0.0
    se["fva"] = fva_se
    total_path = parts["cva"] + parts["dva"] + parts["mva"]
    se["v0"] = _batch_se(total_path, batches)
    return ValuationResult(mtm, float(parts["cva"].mean()), float(parts["dva"].mean()),
                           float(parts["mva"].mean()), fva, se, cube.n_paths, cube.paths.seed,
                           {"fva_batches": fva_means})


def decompose(cube: ExposureCube, cfg: PricingConfig, n_batches: int = 20, sign: float = 1.0) -> ValuationResult:
    """``MtM + CVA + DVA + MVA + FVA`` for the trade the cube was built on.

    With ``perspective="counterparty"`` the cube must hold the investor's
    side of the trade, i.e. the opposite of the counterparty's position.
    ``sign=-1`` prices the short of that position.
    """
    res = _investor_view(cube, cfg, n_batches, sign)
    if cfg.funding.perspective == "investor":
        return res
    se = dict(res.se)
    se["cva"], se["dva"] = res.se["dva"], res.se["cva"]
    return ValuationResult(-res.mtm, -res.dva, -res.cva, -res.mva, -res.fva, se,
                           res.n_paths, res.seed, res.diagnostics)


# ---------------------------------------------------------------------------
# Bid-ask
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BidAsk:
    long: ValuationResult
    short: ValuationResult

    @property
    def sum(self) -> float:
        """Long plus short total; zero for a linear pricing rule."""
        return self.long.total + self.short.total

    @property
    def spread(self) -> float:
        """``-(long + short)``: what both sides together give up to funding asymmetry."""
        return -self.sum

    @property
    def se(self) -> float:
        """Batch SE of the sum; only the FVA parts fail to cancel."""
        return _se_of(self.long.diagnostics["fva_batches"] + self.short.diagnostics["fva_batches"])


def bid_ask(cube: ExposureCube, cfg: PricingConfig, n_batches: int = 20) -> BidAsk:
    """Prices of a position and of its short on the same paths.

    The short negates every cash flow and coupon of the long, so the two
    totals cancel unless the funding basis depends on the sign of the
    uncollateralized value.
    """
    return BidAsk(decompose(cube, cfg, n_batches, 1.0), decompose(cube, cfg, n_batches, -1.0))


def with_funding(cfg: PricingConfig, **kw) -> PricingConfig:
    return replace(cfg, funding=replace(cfg.funding, **kw))
