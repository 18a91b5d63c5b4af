"""Dense symmetric-matrix kernels and F/t/chi-square tail probabilities.

All functions are pure: they never modify their inputs and keep no state.
"""
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg, special

from .errors import InvalidInput, NotPD, NotPSD

EPS = np.finfo(float).eps


class EigenPair(NamedTuple):
    values: np.ndarray  # descending
    vectors: np.ndarray  # orthonormal columns


def _finite_square(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInput(f"{name} must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} has non-finite entries")
    return arr


def as_symmetric(a) -> np.ndarray:
    """Return a copy of ``a`` with exact symmetry enforced by averaging with its transpose."""
    arr = _finite_square(a)
    return (arr + arr.T) / 2.0


def sym_eigen(a) -> EigenPair:
    arr = as_symmetric(a)
    if arr.shape[0] == 0:
        return EigenPair(np.zeros(0), np.zeros((0, 0)))
    values, vectors = linalg.eigh(arr)
    return EigenPair(values[::-1].copy(), vectors[:, ::-1].copy())


def _rank_threshold(values: np.ndarray, dim: int, rank_tol: Optional[float]) -> float:
    tol = dim * EPS if rank_tol is None else float(rank_tol)
    lam_max = max(float(values[0]), 0.0) if values.size else 0.0
    return tol * lam_max


def pinv_sqrt_psd(a, rank_tol: Optional[float] = None) -> np.ndarray:
    """Symmetric square root of the Moore-Penrose inverse of a PSD matrix.

    Eigenvalues at or below ``rank_tol * lambda_max`` are treated as zero.
    ``rank_tol`` defaults to ``dim * eps``. An eigenvalue below
    ``-rank_tol * lambda_max`` means the input is not PSD.
    """
    eig = sym_eigen(a)
    dim = eig.values.size
    if dim == 0:
        return np.zeros((0, 0))
    cut = _rank_threshold(eig.values, dim, rank_tol)
    if eig.values[-1] < -cut:
        raise NotPSD(f"matrix has eigenvalue {eig.values[-1]:.3e} below -{cut:.3e}")
    keep = eig.values > cut
    scale = np.zeros(dim)
    scale[keep] = 1.0 / np.sqrt(eig.values[keep])
    out = (eig.vectors * scale) @ eig.vectors.T
    return (out + out.T) / 2.0


def pinv_psd(a, rank_tol: Optional[float] = None) -> np.ndarray:
    half = pinv_sqrt_psd(a, rank_tol)
    return half @ half


def inv_sqrt_pd(a, cond_limit: float = 1e12) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix.

    Raises NotPD when the condition number exceeds ``cond_limit``.
    """
    eig = sym_eigen(a)
    if eig.values.size == 0:
        return np.zeros((0, 0))
    if eig.values[-1] <= eig.values[0] / cond_limit or eig.values[-1] <= 0:
        raise NotPD("matrix is singular or not positive definite")
    out = (eig.vectors / np.sqrt(eig.values)) @ eig.vectors.T
    return (out + out.T) / 2.0


def chol_upper(a) -> np.ndarray:
    """Upper-triangular D with D.T @ D == a."""
    arr = as_symmetric(a)
    if arr.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        return linalg.cholesky(arr, lower=False)
    except linalg.LinAlgError as exc:
        raise NotPD(f"matrix is not positive definite: {exc}") from exc


def _check_df(name: str, value: float, allow_inf: bool = False) -> float:
    v = float(value)
    if np.isnan(v) or v <= 0 or (np.isinf(v) and not allow_inf):
        raise InvalidInput(f"{name} must be positive, got {value!r}")
    return v


def f_sf(x: float, d1: float, d2: float) -> float:
    """Upper-tail probability P(F(d1, d2) > x).

    Uses the regularized incomplete beta function. ``d2 = inf`` gives the
    chi-square limit P(chi2_d1 > d1 * x).
    """
    d1 = _check_df("d1", d1)
    d2 = _check_df("d2", d2, allow_inf=True)
    x = float(x)
    if np.isnan(x) or x < 0:
        raise InvalidInput(f"F statistic must be non-negative, got {x!r}")
    if x == 0.0:
        return 1.0
    if np.isinf(x):
        return 0.0
    if np.isinf(d2):
        return float(special.gammaincc(d1 / 2.0, d1 * x / 2.0))
    return float(special.betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x)))


def chi2_sf(x: float, df: float) -> float:
    df = _check_df("df", df)
    x = float(x)
    if np.isnan(x) or x < 0:
        raise InvalidInput(f"chi-square statistic must be non-negative, got {x!r}")
    return float(special.gammaincc(df / 2.0, x / 2.0))


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail P(|T| > |t|) for Student t with ``df`` degrees of freedom."""
    return f_sf(float(t) ** 2, 1.0, df)


def t_quantile(p: float, df: float) -> float:
    df = _check_df("df", df, allow_inf=True)
    if not 0.0 < p < 1.0:
        raise InvalidInput(f"probability must lie in (0, 1), got {p!r}")
    if np.isinf(df):
        return float(special.ndtri(p))
    return float(special.stdtrit(df, p))
