"""Fixed-effect absorption and weighted least squares for the focal coefficients.

Within-cluster fixed effects T are projected out cluster by cluster, then the
between-cluster fixed effects S, leaving the doubly absorbed focal covariates
R̈ and outcome ÿ. Projections are oblique in the W inner product:
H_Z = Z (Z'WZ)^{-1} Z'W.

The full residual maker factors as (I - H_X) = (I - H_R̈)(I - H_S̈)(I - H_T);
``residual_projection`` applies it (or its transpose) without building an
N x N matrix.
"""
import warnings
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from . import matkern
from .errors import CollinearFocal, InvalidInput, NotPD, NumericalWarning
from .model_frame import ClusteredDesign

ABSORB_TOL = 1e-10


def _inverse_pd(gram: np.ndarray) -> np.ndarray:
    k = gram.shape[0]
    if k == 0:
        return np.zeros((0, 0))
    gram = (gram + gram.T) / 2.0
    out = linalg.cho_solve(linalg.cho_factor(gram, lower=False), np.eye(k))
    return (out + out.T) / 2.0


def block_apply(mats, slices, z: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape, dtype=float)
    for a, sl in zip(mats, slices):
        out[sl] = a @ z[sl]
    return out


def _independent_columns(z: np.ndarray, reference: np.ndarray, tol: float = ABSORB_TOL) -> np.ndarray:
    """Mask of columns not in the span of earlier columns (input order).

    ``z`` is already premultiplied by a square-root factor of W, and
    ``reference`` holds each column's W-norm before any projection.
    """
    k = z.shape[1]
    if k == 0:
        return np.zeros(0, dtype=bool)
    r = linalg.qr(z, mode="r")[0]
    diag = np.zeros(k)
    d = np.abs(np.diag(r))
    diag[: d.size] = d
    return diag > tol * np.maximum(reference, np.finfo(float).tiny)


@dataclass(frozen=True, eq=False)
class AbsorbedDesign:
    design: ClusteredDesign
    W: Tuple[np.ndarray, ...]
    factors: Tuple[np.ndarray, ...]  # upper Cholesky factors of W_i
    slices: Tuple[slice, ...]
    T: Tuple[np.ndarray, ...]  # retained within-cluster columns per cluster
    M_T: Tuple[np.ndarray, ...]
    S_dd: np.ndarray
    M_S: np.ndarray
    R_t: np.ndarray  # (I - H_T) R
    R_dd: np.ndarray
    M_R: np.ndarray
    U_dd: np.ndarray  # [(I - H_T) R, S̈]
    M_U: np.ndarray
    y_dd: np.ndarray
    s_kept: Tuple[str, ...]
    t_kept: Tuple[str, ...]
    dropped: Tuple[str, ...]

    @property
    def N(self) -> int:
        return self.R_dd.shape[0]

    @property
    def m(self) -> int:
        return len(self.slices)

    @property
    def r(self) -> int:
        return self.R_dd.shape[1]

    def block(self, i: int, arr: np.ndarray) -> np.ndarray:
        return arr[self.slices[i]]

    def w_times(self, z: np.ndarray) -> np.ndarray:
        return block_apply(self.W, self.slices, z)

    def f_times(self, z: np.ndarray) -> np.ndarray:
        return block_apply(self.factors, self.slices, z)


@dataclass(frozen=True, eq=False)
class FitResult:
    beta: np.ndarray
    residuals: Tuple[np.ndarray, ...]
    absorbed: AbsorbedDesign
    design: ClusteredDesign

    @property
    def names(self) -> Tuple[str, ...]:
        return self.design.column_names

    @property
    def m(self) -> int:
        return self.design.m

    def stacked_residuals(self) -> np.ndarray:
        return np.concatenate(self.residuals)


def _within_step(T, M_T, W, slices, z: np.ndarray, transpose: bool) -> np.ndarray:
    out = np.array(z, dtype=float, copy=True)
    for t, mt, w, sl in zip(T, M_T, W, slices):
        if t.shape[1] == 0:
            continue
        zi = z[sl]
        if transpose:
            out[sl] = zi - w @ (t @ (mt @ (t.T @ zi)))
        else:
            out[sl] = zi - t @ (mt @ (t.T @ (w @ zi)))
    return out


def _column_step(ab: AbsorbedDesign, basis: np.ndarray, M: np.ndarray, z: np.ndarray, transpose: bool) -> np.ndarray:
    if basis.shape[1] == 0:
        return z
    if transpose:
        return z - ab.w_times(basis @ (M @ (basis.T @ z)))
    return z - basis @ (M @ (basis.T @ ab.w_times(z)))


def residual_projection(
    ab: AbsorbedDesign, z: np.ndarray, transpose: bool = False, include_within: bool = True
) -> np.ndarray:
    """Apply (I - H_X), or its transpose, to stacked columns ``z`` (N rows).

    With ``include_within=False`` the within-cluster factor (I - H_T) is left out.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[0] != ab.N:
        raise InvalidInput(f"expected {ab.N} rows, got {z.shape[0]}")
    if transpose:
        z = _column_step(ab, ab.R_dd, ab.M_R, z, True)
        z = _column_step(ab, ab.S_dd, ab.M_S, z, True)
        if include_within:
            z = _within_step(ab.T, ab.M_T, ab.W, ab.slices, z, True)
        return z
    if include_within:
        z = _within_step(ab.T, ab.M_T, ab.W, ab.slices, z, False)
    z = _column_step(ab, ab.S_dd, ab.M_S, z, False)
    return _column_step(ab, ab.R_dd, ab.M_R, z, False)


def residual_rows_transposed(ab: AbsorbedDesign, i: int, include_within: bool = True) -> np.ndarray:
    """(I - H_X)_i' as an N x n_i matrix, where (I - H_X)_i is the row block of cluster i."""
    sl = ab.slices[i]
    n_i = sl.stop - sl.start
    e = np.zeros((ab.N, n_i))
    e[sl] = np.eye(n_i)
    return residual_projection(ab, e, transpose=True, include_within=include_within)


def absorb_outcome(ab: AbsorbedDesign, y: np.ndarray) -> np.ndarray:
    """ÿ = (I - H_S̈)(I - H_T) y for a stacked outcome."""
    y = np.asarray(y, dtype=float).reshape(-1)
    y = _within_step(ab.T, ab.M_T, ab.W, ab.slices, y, False)
    return _column_step(ab, ab.S_dd, ab.M_S, y, False)


def absorb(design: ClusteredDesign, weights: Optional[Sequence[np.ndarray]] = None) -> AbsorbedDesign:
    if weights is None:
        W = [c.W for c in design.clusters]
    else:
        if len(weights) != design.m:
            raise InvalidInput(f"{len(weights)} weight blocks given for {design.m} clusters")
        W = [np.asarray(w, dtype=float) for w in weights]
    factors = []
    for c, w in zip(design.clusters, W):
        if w.shape != (c.n, c.n):
            raise InvalidInput(f"cluster {c.id!r}: weight block has shape {w.shape}")
        try:
            factors.append(matkern.chol_upper(w))
        except NotPD:
            raise InvalidInput(f"cluster {c.id!r}: weight block is not positive definite") from None
    W = [(w + w.T) / 2.0 for w in W]

    offsets = np.concatenate([[0], np.cumsum(design.sizes)])
    slices = tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))
    dropped: List[str] = []

    T_kept, M_T, t_kept = [], [], []
    for c, w, f in zip(design.clusters, W, factors):
        cols = np.flatnonzero(np.any(c.T != 0, axis=0))
        t = c.T[:, cols]
        ft = f @ t
        keep = _independent_columns(ft, np.linalg.norm(ft, axis=0))
        dropped += [design.t_names[j] for j in cols[~keep]]
        t_kept += [design.t_names[j] for j in cols[keep]]
        t = t[:, keep]
        T_kept.append(t)
        M_T.append(_inverse_pd(t.T @ w @ t))

    y = np.concatenate([c.y for c in design.clusters])
    R = np.vstack([c.R for c in design.clusters])
    S = np.vstack([c.S for c in design.clusters])

    y_t = _within_step(T_kept, M_T, W, slices, y, False)
    R_t = _within_step(T_kept, M_T, W, slices, R, False)
    S_t = _within_step(T_kept, M_T, W, slices, S, False)

    def weighted(z):
        return block_apply(factors, slices, z)

    keep_s = _independent_columns(weighted(S_t), np.linalg.norm(weighted(S), axis=0))
    dropped += [n for n, k in zip(design.s_names, keep_s) if not k]
    S_dd = S_t[:, keep_s]
    s_kept = tuple(n for n, k in zip(design.s_names, keep_s) if k)
    if dropped:
        warnings.warn("dropped redundant fixed-effect columns: " + ", ".join(dropped), NumericalWarning, stacklevel=2)

    wS = block_apply(W, slices, S_dd)
    M_S = _inverse_pd(S_dd.T @ wS)

    def between(z):
        if S_dd.shape[1] == 0:
            return z
        return z - S_dd @ (M_S @ (wS.T @ z))

    R_dd = between(R_t)
    y_dd = between(y_t)

    if design.r == 0:
        raise InvalidInput("design has no focal covariates")
    keep_r = _independent_columns(weighted(R_dd), np.linalg.norm(weighted(R), axis=0))
    if not np.all(keep_r):
        raise CollinearFocal([n for n, k in zip(design.column_names, keep_r) if not k])

    wR = block_apply(W, slices, R_dd)
    M_R = _inverse_pd(R_dd.T @ wR)

    U_dd = np.hstack([R_t, S_dd])
    wU = block_apply(W, slices, U_dd)
    M_U = _inverse_pd(U_dd.T @ wU)

    return AbsorbedDesign(
        design=design,
        W=tuple(W),
        factors=tuple(factors),
        slices=slices,
        T=tuple(T_kept),
        M_T=tuple(M_T),
        S_dd=S_dd,
        M_S=M_S,
        R_t=R_t,
        R_dd=R_dd,
        M_R=M_R,
        U_dd=U_dd,
        M_U=M_U,
        y_dd=y_dd,
        s_kept=s_kept,
        t_kept=tuple(t_kept),
        dropped=tuple(dropped),
    )


def fit_wls(absorbed: AbsorbedDesign) -> FitResult:
    ab = absorbed
    beta = ab.M_R @ (ab.R_dd.T @ ab.w_times(ab.y_dd))
    e = ab.y_dd - ab.R_dd @ beta
    residuals = tuple(e[sl].copy() for sl in ab.slices)
    return FitResult(beta=beta, residuals=residuals, absorbed=ab, design=ab.design)


def refit(fit: FitResult, y_blocks: Sequence[np.ndarray]) -> FitResult:
    """Re-estimate with a new outcome, reusing every projection of the absorbed design."""
    ab = fit.absorbed
    if len(y_blocks) != ab.m:
        raise InvalidInput("one outcome block per cluster is required")
    y = np.concatenate([np.asarray(b, dtype=float).reshape(-1) for b in y_blocks])
    ab = replace(ab, y_dd=absorb_outcome(ab, y), design=ab.design.with_outcome(y_blocks))
    return fit_wls(ab)


def check_blocks(ab: AbsorbedDesign, blocks: Sequence[np.ndarray], what: str) -> List[np.ndarray]:
    if len(blocks) != ab.m:
        raise InvalidInput(f"{what}: {len(blocks)} blocks given for {ab.m} clusters")
    out = []
    for b, sl in zip(blocks, ab.slices):
        b = np.asarray(b, dtype=float)
        n = sl.stop - sl.start
        if b.shape != (n, n):
            raise InvalidInput(f"{what}: block of shape {b.shape}, expected ({n}, {n})")
        out.append(b)
    return out


def true_variance(fit: FitResult, sigma: Sequence[np.ndarray]) -> np.ndarray:
    """Sampling variance of the focal estimate when Var(e_i) = sigma_i."""
    ab = fit.absorbed
    sigma = check_blocks(ab, sigma, "true_variance")
    meat = np.zeros((ab.r, ab.r))
    for w, s, sl in zip(ab.W, sigma, ab.slices):
        u = w @ ab.R_dd[sl]
        meat += u.T @ s @ u
    out = ab.M_R @ meat @ ab.M_R
    return (out + out.T) / 2.0
