"""Correlation structure of the four Brownian drivers ``(W1, W2, WC, WI)``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .g2 import G2Params

DRIVERS = ("x1", "x2", "C", "I")
_IDX = {"C": 2, "I": 3}


class CorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationSpec:
    """Symmetric unit-diagonal PSD 4x4 driver correlation matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise CorrelationError("correlation matrix must be 4x4")
        if not np.allclose(m, m.T, atol=1e-14):
            raise CorrelationError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=1e-14):
            raise CorrelationError("correlation matrix must have unit diagonal")
        if np.min(np.linalg.eigvalsh(m)) < -1e-12:
            raise CorrelationError("correlation matrix is not positive semidefinite")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def independent_credit(cls, rho12: float) -> "CorrelationSpec":
        m = np.eye(4)
        m[0, 1] = m[1, 0] = rho12
        return cls(m)

    def cholesky(self) -> np.ndarray:
        """Lower factor; a tiny diagonal jitter handles exactly singular PSD matrices."""
        try:
            return np.linalg.cholesky(self.matrix)
        except np.linalg.LinAlgError:
            return np.linalg.cholesky(self.matrix + 1e-14 * np.eye(4))


def effective_correlation(corr: CorrelationSpec, params: G2Params, k: str) -> float:
    """Instantaneous correlation between the short rate and intensity ``k``."""
    s = np.array([params.sigma1, params.sigma2])
    m = corr.matrix
    var = float(s @ m[:2, :2] @ s)
    if var <= 0.0:
        raise CorrelationError("total short-rate variance is zero")
    val = float(s @ m[:2, _IDX[k]]) / np.sqrt(var)
    return float(np.clip(val, -1.0, 1.0))


def _rate_loadings(params: G2Params, method: str) -> np.ndarray:
    """Unit-effective-correlation loadings ``u`` with ``rho^{ik} = target * u_i``."""
    s = np.array([params.sigma1, params.sigma2])
    r = params.rho12
    total = np.sqrt(s[0] ** 2 + s[1] ** 2 + 2.0 * r * s[0] * s[1])
    if total <= 0.0:
        raise CorrelationError("total short-rate variance is zero")
    if method == "equal":
        return np.full(2, total / (s[0] + s[1]))
    if method == "projection":
        # correlation of each factor driver with the aggregate rate driver
        return np.array([s[0] + r * s[1], s[1] + r * s[0]]) / total
    raise CorrelationError(f"unknown correlation method {method!r}")


def max_attainable(params: G2Params, method: str = "projection") -> float:
    """Largest common ``|rho_bar|`` for both names that keeps the matrix PSD (``rho^{CI} = 0``)."""
    u = _rate_loadings(params, method)
    r = params.rho12
    q = np.array([[1.0, r], [r, 1.0]])
    # credit rows c_k = t u; PSD iff 2 t^2 u' Q^{-1} u <= 1
    quad = float(u @ np.linalg.pinv(q) @ u)
    return float(np.sqrt(1.0 / (2.0 * quad))) if quad > 0 else np.inf


def solve_driver_correlations(target_c: float, target_i: float, params: G2Params,
                              method: str = "projection") -> CorrelationSpec:
    """Driver correlations reproducing the requested effective correlations.

    ``method="equal"`` sets ``rho^{1k} = rho^{2k}``.  ``method="projection"``
    correlates each credit driver with the aggregate short-rate driver only,
    which reaches higher effective correlations when the two rate factors are
    strongly anticorrelated.  In both cases ``rho^{CI} = 0``.
    """
    u = _rate_loadings(params, method)
    m = np.eye(4)
    m[0, 1] = m[1, 0] = params.rho12
    for k, t in (("C", target_c), ("I", target_i)):
        m[:2, _IDX[k]] = m[_IDX[k], :2] = t * u
    q = m[:2, :2]
    cross = m[:2, 2:]
    schur = np.eye(2) - cross.T @ np.linalg.pinv(q) @ cross
    if np.min(np.linalg.eigvalsh(schur)) < -1e-12:
        lim = max_attainable(params, method)
        raise CorrelationError(
            f"effective correlations ({target_c}, {target_i}) are not attainable with a PSD matrix; "
            f"max attainable common value is {lim:.6f}")
    return CorrelationSpec(m)
