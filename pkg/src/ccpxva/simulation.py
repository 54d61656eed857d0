"""Joint simulation of ``(x1, x2, yC, yI)`` and least-squares regression.

Rate factors use their exact Gaussian transition; the square-root intensity
factors use full-truncation Euler.  Each path draws its Gaussians from a
counter-based Philox stream keyed by ``(seed, step)`` with the path index as
counter, so a path set is bit-identical whatever the thread layout.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .marketdata import YieldCurve
from .models.cir import CirPlusPlus
from .models.correlation import CorrelationSpec
from .models.g2 import G2Params, bfun, shift_integral

TIME_TOL = 1e-9
RIDGE = 1e-8
N_BASIS = 15


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Time grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray
    dt_max: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")
        if t[0] < 0:
            raise ValueError("grid times must be non-negative")
        object.__setattr__(self, "times", t)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def __len__(self):
        return self.times.size

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > TIME_TOL:
            raise KeyError(f"time {t} is not a grid point")
        return i

    def has(self, t: float) -> bool:
        return bool(np.any(np.abs(self.times - t) <= TIME_TOL))


def _merge(times) -> np.ndarray:
    t = np.sort(np.asarray(times, dtype=float))
    keep = np.concatenate([[True], np.diff(t) > TIME_TOL])
    return t[keep]


def build_grid(maturity: float, dt_max: float = 1.0 / 12.0, event_times=(), delta: float = 0.0,
               start: float = 0.0) -> TimeGrid:
    """Uniform grid with step ``<= dt_max`` plus event dates.

    With ``delta > 0`` the points ``t + delta`` are inserted for every grid
    time ``t`` before maturity (capped at maturity); they are only needed to
    evaluate delayed close-outs pathwise.
    """
    if maturity <= start:
        raise ValueError("maturity must exceed the start time")
    n = int(np.ceil((maturity - start) / dt_max - 1e-12))
    base = np.linspace(start, maturity, n + 1)
    ev = [e for e in np.atleast_1d(np.asarray(event_times, dtype=float)) if start <= e <= maturity]
    times = _merge(np.concatenate([base, ev]))
    if delta > 0.0:
        times = _merge(np.concatenate([times, np.minimum(times[times < maturity] + delta, maturity)]))
    while np.max(np.diff(times)) > dt_max + TIME_TOL:
        # event insertion cannot enlarge a step, but keep the invariant explicit
        k = int(np.argmax(np.diff(times)))
        times = np.insert(times, k + 1, 0.5 * (times[k] + times[k + 1]))
    return TimeGrid(times, dt_max)


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

_U53 = 2.0 ** -53


def standard_normals(seed: int, step: int, first_path: int, n_paths: int) -> np.ndarray:
    """Four standard normals per path for one step, shape ``(4, n_paths)``.

    Path ``p`` always reads Philox block ``p`` of stream ``(seed, step)``.
    """
    bg = np.random.Philox(key=np.array([seed, step], dtype=np.uint64),
                          counter=np.array([first_path, 0, 0, 0], dtype=np.uint64))
    raw = bg.random_raw(4 * n_paths).reshape(n_paths, 4)
    u = ((raw >> np.uint64(11)).astype(float) + 0.5) * _U53
    r1 = np.sqrt(-2.0 * np.log(u[:, 0]))
    r2 = np.sqrt(-2.0 * np.log(u[:, 2]))
    th1 = 2.0 * np.pi * u[:, 1]
    th2 = 2.0 * np.pi * u[:, 3]
    return np.stack([r1 * np.cos(th1), r1 * np.sin(th1), r2 * np.cos(th2), r2 * np.sin(th2)])


def step_covariance(g2: G2Params, corr: CorrelationSpec, dt: float) -> np.ndarray:
    """Covariance of ``(xi1, xi2, dWC, dWI)`` over one step.

    ``xi_i`` is the Gaussian innovation of the exact OU transition of ``x_i``.
    """
    a = np.array([g2.a1, g2.a2])
    s = np.array([g2.sigma1, g2.sigma2])
    r = corr.matrix
    cov = np.empty((4, 4))
    cov[:2, :2] = r[:2, :2] * np.outer(s, s) * bfun(a[:, None] + a[None, :], dt)
    cov[:2, 2:] = r[:2, 2:] * (s * bfun(a, dt))[:, None]
    cov[2:, :2] = cov[:2, 2:].T
    cov[2:, 2:] = r[2:, 2:] * dt
    return cov


def _factor(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; degenerate (zero-variance) coordinates get zero rows."""
    live = np.diag(cov) > 0.0
    out = np.zeros_like(cov)
    if np.any(live):
        sub = cov[np.ix_(live, live)]
        try:
            lo = np.linalg.cholesky(sub)
        except np.linalg.LinAlgError:
            scale = np.sqrt(np.diag(sub))
            corr = sub / np.outer(scale, scale)
            try:
                lo = np.linalg.cholesky(corr + 1e-12 * np.eye(corr.shape[0])) * scale[:, None]
            except np.linalg.LinAlgError as exc:
                raise SimulationError("driver covariance is not positive semidefinite") from exc
        out[np.ix_(live, live)] = lo
    return out


# ---------------------------------------------------------------------------
# Path set
# ---------------------------------------------------------------------------

@dataclass
class PathSet:
    """Simulated states on ``grid``; arrays have shape ``(n_times, n_paths)``.

    Intensity factors are stored floored at zero.  Integrals of the short
    rate and intensities over each step are rebuilt on demand: exact for the
    deterministic shifts, trapezoidal for the stochastic factors.
    """

    grid: TimeGrid
    x1: np.ndarray
    x2: np.ndarray
    yC: np.ndarray
    yI: np.ndarray
    g2: G2Params
    curve: YieldCurve
    credit: dict
    seed: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def n_paths(self) -> int:
        return self.x1.shape[1]

    def state(self, i: int) -> tuple:
        return self.x1[i], self.x2[i], self.yC[i], self.yI[i]

    def y(self, k: str) -> np.ndarray:
        return self.yC if k == "C" else self.yI

    def intensity(self, k: str, i: int) -> np.ndarray:
        return self.y(k)[i] + self.credit[k].shift(self.times[i])

    def short_rate_factor(self, i: int) -> np.ndarray:
        return self.x1[i] + self.x2[i]

    def step_rate_integral(self, i: int) -> np.ndarray:
        """``int_{t_i}^{t_{i+1}} e_u du`` per path."""
        t0, t1 = self.times[i], self.times[i + 1]
        phi_int = shift_integral(self.g2, self.curve, t0, t1)
        return phi_int + 0.5 * (t1 - t0) * (self.x1[i] + self.x2[i] + self.x1[i + 1] + self.x2[i + 1])

    def step_intensity_integral(self, k: str, i: int) -> np.ndarray:
        """``int_{t_i}^{t_{i+1}} lambda^k_u du`` per path, floored at zero."""
        t0, t1 = self.times[i], self.times[i + 1]
        y = self.y(k)
        val = self.credit[k].shift.integral(t0, t1) + 0.5 * (t1 - t0) * (y[i] + y[i + 1])
        return np.maximum(val, 0.0)

    def cumulative_rate_integral(self) -> np.ndarray:
        """``int_{t_0}^{t_i} e_u du`` for every grid time, shape ``(n_times, n_paths)``."""
        if "Ie" not in self._cache:
            out = np.zeros_like(self.x1)
            for i in range(len(self.grid) - 1):
                out[i + 1] = out[i] + self.step_rate_integral(i)
            self._cache["Ie"] = out
        return self._cache["Ie"]

    def cumulative_intensity_integral(self, k: str) -> np.ndarray:
        key = "I" + k
        if key not in self._cache:
            out = np.zeros_like(self.x1)
            for i in range(len(self.grid) - 1):
                out[i + 1] = out[i] + self.step_intensity_integral(k, i)
            self._cache[key] = out
        return self._cache[key]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.times, self.x1, self.x2, self.yC, self.yI):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def dump(self, path) -> None:
        """Write a JSON header line followed by little-endian float64 arrays."""
        header = {"n_times": len(self.grid), "n_paths": self.n_paths, "seed": self.seed,
                  "arrays": ["times", "x1", "x2", "yC", "yI"], "dtype": "<f8"}
        with open(Path(path), "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode())
            for arr in (self.times, self.x1, self.x2, self.yC, self.yI):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _simulate_block(g2, credit, factors, grid, seed, p0, n, init):
    nt = len(grid)
    x1 = np.empty((nt, n))
    x2 = np.empty((nt, n))
    ys = {k: np.empty((nt, n)) for k in ("C", "I")}
    cur = [np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy() for v in init]
    x1[0], x2[0] = cur[0], cur[1]
    raw = {"C": cur[2], "I": cur[3]}
    ys["C"][0] = np.maximum(raw["C"], 0.0)
    ys["I"][0] = np.maximum(raw["I"], 0.0)
    dts = grid.dt
    for i, dt in enumerate(dts):
        z = standard_normals(seed, i, p0, n)
        d = factors[i] @ z
        cur[0] = cur[0] * np.exp(-g2.a1 * dt) + d[0]
        cur[1] = cur[1] * np.exp(-g2.a2 * dt) + d[1]
        x1[i + 1], x2[i + 1] = cur[0], cur[1]
        for j, k in ((2, "C"), (3, "I")):
            p = credit[k].params
            yp = np.maximum(raw[k], 0.0)
            raw[k] = raw[k] + p.kappa * (p.mu - yp) * dt + p.nu * np.sqrt(yp) * d[j]
            ys[k][i + 1] = np.maximum(raw[k], 0.0)
    return p0, x1, x2, ys["C"], ys["I"]


def generate_paths(g2: G2Params, curve: YieldCurve, credit: dict[str, CirPlusPlus],
                   corr: CorrelationSpec, grid: TimeGrid, n_paths: int, seed: int,
                   threads: int = 1, initial_state=None, block_size: int = 8192,
                   first_path: int = 0) -> PathSet:
    """Simulate ``n_paths`` joint paths on ``grid``.

    ``initial_state`` is ``(x1, x2, yC, yI)`` at ``grid.times[0]`` (scalars
    or per-path arrays); it defaults to ``(0, 0, y0C, y0I)``.  Paths are
    numbered from ``first_path``, so a large path set can be produced in
    independent chunks that concatenate to the single-call result.
    """
    if n_paths < 2:
        raise ValueError("need at least two paths")
    if not 0 <= seed < 2 ** 63:
        raise ValueError("seed must be a non-negative 63-bit integer")
    if initial_state is None:
        initial_state = (0.0, 0.0, credit["C"].params.y0, credit["I"].params.y0)
    init = [np.asarray(v, dtype=float) for v in initial_state]
    cache: dict[float, np.ndarray] = {}
    factors = []
    for dt in grid.dt:
        key = round(float(dt), 12)
        if key not in cache:
            cache[key] = _factor(step_covariance(g2, corr, float(dt)))
        factors.append(cache[key])

    nt = len(grid)
    out = {name: np.empty((nt, n_paths)) for name in ("x1", "x2", "yC", "yI")}
    blocks = [(p0, min(block_size, n_paths - p0)) for p0 in range(0, n_paths, block_size)]

    def run(b):
        p0, n = b
        blk_init = [v if v.ndim == 0 else v[p0:p0 + n] for v in init]
        return _simulate_block(g2, credit, factors, grid, seed, first_path + p0, n, blk_init)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]
    for p0, x1, x2, yc, yi in results:
        p0 -= first_path
        n = x1.shape[1]
        out["x1"][:, p0:p0 + n] = x1
        out["x2"][:, p0:p0 + n] = x2
        out["yC"][:, p0:p0 + n] = yc
        out["yI"][:, p0:p0 + n] = yi
    return PathSet(grid, out["x1"], out["x2"], out["yC"], out["yI"], g2, curve, credit, seed)


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------

def _basis(states: np.ndarray) -> np.ndarray:
    """Degree-two monomials (without the constant) of the rows of ``states``."""
    d = states.shape[0]
    cols = [states[j] for j in range(d)]
    for j in range(d):
        for k in range(j, d):
            cols.append(states[j] * states[k])
    return np.array(cols)


class Regressor:
    """Projection on ``{1, x1, x2, yC, yI, squares, cross products}`` at one date.

    States are standardized and near-constant ones dropped; basis columns are
    centred so the intercept is the sample mean.  A ridge of ``1e-8`` is
    added to the Gram matrix of the standardized columns.  If the system is
    still singular the regressor falls back to the sample mean.
    """

    def __init__(self, states):
        st = np.asarray(states, dtype=float)
        self.states = st
        mean = st.mean(axis=1)
        std = st.std(axis=1)
        scale = np.maximum(np.abs(mean), 1.0)
        self.live = std > 1e-10 * scale
        self.n = st.shape[1]
        self._mean = mean[self.live]
        self._std = std[self.live]
        self.factor = None
        if np.any(self.live):
            b = self._raw_basis(st)
            self._bmean = b.mean(axis=1)
            bc = b - self._bmean[:, None]
            self._bstd = np.maximum(bc.std(axis=1), 1e-300)
            bc /= self._bstd[:, None]
            gram = bc @ bc.T + RIDGE * np.eye(bc.shape[0])
            try:
                self.factor = cho_factor(gram, lower=True)
            except np.linalg.LinAlgError:
                self.factor = None

    def _raw_basis(self, st):
        z = (st[self.live] - self._mean[:, None]) / self._std[:, None]
        return _basis(z)

    def _design(self):
        b = self._raw_basis(self.states)
        return (b - self._bmean[:, None]) / self._bstd[:, None]

    def fit(self, values) -> np.ndarray:
        """Fitted conditional expectations of ``values`` at the sample states."""
        v = np.asarray(values, dtype=float)
        vbar = v.mean()
        if self.factor is None:
            return np.full_like(v, vbar)
        x = self._design()
        coef = cho_solve(self.factor, x @ (v - vbar))
        if not np.all(np.isfinite(coef)):
            return np.full_like(v, vbar)
        return vbar + coef @ x


def regress_conditional(values, states) -> np.ndarray:
    """One-shot least-squares conditional expectation of ``values`` given ``states``."""
    states = np.asarray(states, dtype=float)
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("regression values must be finite")
    if values.size < 10 * N_BASIS:
        raise ValueError(f"need at least {10 * N_BASIS} samples for the regression basis")
    return Regressor(states).fit(values)
