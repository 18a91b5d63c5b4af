"""Cluster-robust sandwich variance estimators CR0, CR1, CR1S, CR2 and CR3.

The sandwich is V = M (sum_i R̈_i' W_i A_i e_i e_i' A_i' W_i R̈_i) M with
M = (R̈'WR̈)^{-1}; the kinds differ only in the adjustment matrices A_i.
CR2 chooses A_i so that V is exactly unbiased when the working model Φ holds.
"""
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from . import matkern
from .errors import (
    ClusterIdentification,
    InvalidInput,
    NumericalWarning,
    ShortcutInvalid,
    SingularAdjustment,
    Underdetermined,
)
from .estimator import FitResult, block_apply, check_blocks, residual_rows_transposed
from .model_frame import WorkingModel, working_covariance

KINDS = ("CR0", "CR1", "CR1S", "CR2", "CR3")
CR2_RANK_TOL = 1e-10
IDENTIFICATION_TOL = 1e-8
SHORTCUT_TOL = 1e-8
WITHIN_WEIGHT_TOL = 1e-8
CR3_COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class AdjustmentKind:
    name: str = "CR2"
    working_model: Optional[WorkingModel] = None
    use_absorbed_shortcut: bool = False
    closed_form: bool = True
    absorbed_p: bool = False

    def __post_init__(self):
        if self.name not in KINDS:
            raise InvalidInput(f"unknown adjustment kind {self.name!r}; expected one of {', '.join(KINDS)}")
        if self.name == "CR2" and self.working_model is None:
            raise InvalidInput("CR2 needs a working model")

    @classmethod
    def cr2(cls, working_model: Optional[WorkingModel] = None, **flags) -> "AdjustmentKind":
        return cls("CR2", working_model or WorkingModel.identity(), **flags)


@dataclass(frozen=True, eq=False)
class RobustVariance:
    V: np.ndarray
    kind: AdjustmentKind
    meat: Tuple[np.ndarray, ...]
    adjustments: Tuple[np.ndarray, ...]

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.V), 0.0, None))


def resolve_phi(fit: FitResult, kind: AdjustmentKind, phi: Optional[Sequence[np.ndarray]] = None) -> List[np.ndarray]:
    """Working covariance blocks: the explicit ``phi`` if given, else the kind's working model."""
    if phi is not None:
        return check_blocks(fit.absorbed, phi, "working covariance")
    model = kind.working_model or WorkingModel.identity()
    return working_covariance(model, fit.design)


def check_cluster_identification(fit: FitResult) -> None:
    """Every leave-one-cluster-out Gram matrix of Ü must have full rank."""
    ab = fit.absorbed
    wU = ab.w_times(ab.U_dd)
    total = ab.U_dd.T @ wU
    for i, sl in enumerate(ab.slices):
        L = total - ab.U_dd[sl].T @ wU[sl]
        sv = np.linalg.svd((L + L.T) / 2.0, compute_uv=False)
        if sv.size and not sv[-1] > IDENTIFICATION_TOL * sv[0]:
            raise ClusterIdentification(fit.design.ids[i])


def _is_identity_pair(fit: FitResult, phi: Sequence[np.ndarray]) -> bool:
    for w, p in zip(fit.absorbed.W, phi):
        eye = np.eye(w.shape[0])
        if not np.array_equal(w, eye) or not np.array_equal(p, p[0, 0] * eye):
            return False
    return True


def _check_shortcut(fit: FitResult, phi: Sequence[np.ndarray]) -> None:
    products = [w @ p for w, p in zip(fit.absorbed.W, phi)]
    c = float(np.trace(products[0])) / products[0].shape[0]
    for cid, wp in zip(fit.design.ids, products):
        gap = np.max(np.abs(wp - c * np.eye(wp.shape[0])))
        if not (c > 0 and gap <= SHORTCUT_TOL * c):
            raise ShortcutInvalid(f"weights are not the inverse working covariance in cluster {cid!r} (gap {gap:.3e})")


def within_projector(fit: FitResult, i: int) -> np.ndarray:
    """I - T_i M_T T_i' W_i, the residual maker of cluster i's absorbed within columns."""
    ab = fit.absorbed
    t, n = ab.T[i], ab.design.sizes[i]
    if t.shape[1] == 0:
        return np.eye(n)
    return np.eye(n) - t @ ab.M_T[i] @ t.T @ ab.W[i]


def within_weight_gaps(fit: FitResult) -> np.ndarray:
    """Relative size of T_i' W_i² R̈_i per cluster.

    CR2 meets its unbiasedness criterion only where this vanishes, which
    holds when W_i maps the span of T_i into itself (W_i = cI, or W_i = Φ_i^{-1}
    with Φ_i preserving that span).
    """
    ab = fit.absorbed
    gaps = []
    for t, w, sl in zip(ab.T, ab.W, ab.slices):
        if t.shape[1] == 0:
            gaps.append(0.0)
            continue
        wt, wr = w @ t, w @ ab.R_dd[sl]
        scale = np.linalg.norm(wt) * np.linalg.norm(wr)
        gaps.append(float(np.linalg.norm(wt.T @ wr) / scale) if scale > 0 else 0.0)
    return np.array(gaps)


def _cr2_matrices(fit: FitResult, kind: AdjustmentKind, phi: List[np.ndarray]) -> List[np.ndarray]:
    ab = fit.absorbed
    check_cluster_identification(fit)
    gaps = within_weight_gaps(fit)
    if np.any(gaps > WITHIN_WEIGHT_TOL):
        worst = int(np.argmax(gaps))
        warnings.warn(
            f"CR2 is not exactly unbiased: weights mix the absorbed within-cluster columns "
            f"(cluster {fit.design.ids[worst]!r}, gap {gaps[worst]:.3e}); use W = I or W = Φ^-1",
            NumericalWarning,
            stacklevel=3,
        )

    if kind.closed_form and not kind.use_absorbed_shortcut and _is_identity_pair(fit, phi):
        out = []
        for i, sl in enumerate(ab.slices):
            u = ab.U_dd[sl]
            b = np.eye(u.shape[0]) - u @ ab.M_U @ u.T
            pt = within_projector(fit, i)
            out.append(pt.T @ matkern.pinv_sqrt_psd(b, CR2_RANK_TOL) @ pt)
        return out

    include_within = True
    if kind.use_absorbed_shortcut:
        _check_shortcut(fit, phi)
        include_within = False

    out = []
    for i, p in enumerate(phi):
        d = matkern.chol_upper(p)
        g = residual_rows_transposed(ab, i, include_within=include_within)
        inner = g.T @ block_apply(phi, ab.slices, g)
        b = d @ inner @ d.T
        a = d.T @ matkern.pinv_sqrt_psd(b, CR2_RANK_TOL) @ d
        if not include_within:
            pt = within_projector(fit, i)
            a = pt.T @ a @ pt
        out.append(a)
    return out


def adjustment_matrices(
    fit: FitResult, kind: AdjustmentKind, phi: Optional[Sequence[np.ndarray]] = None
) -> List[np.ndarray]:
    ab = fit.absorbed
    sizes = fit.design.sizes
    m = fit.m
    if kind.name == "CR0":
        return [np.eye(n) for n in sizes]
    if kind.name == "CR1":
        if m < 2:
            raise InvalidInput("CR1 needs at least two clusters")
        return [np.sqrt(m / (m - 1.0)) * np.eye(n) for n in sizes]
    if kind.name == "CR1S":
        if m < 2:
            raise InvalidInput("CR1S needs at least two clusters")
        N = ab.N
        p = ab.r if kind.absorbed_p else ab.r + len(ab.s_kept) + len(ab.t_kept)
        if N <= p:
            raise Underdetermined(f"CR1S needs N > p (N={N}, p={p})")
        return [np.sqrt(m * N / ((m - 1.0) * (N - p))) * np.eye(n) for n in sizes]
    if kind.name == "CR3":
        out = []
        for cid, w, sl in zip(fit.design.ids, ab.W, ab.slices):
            r = ab.R_dd[sl]
            core = np.eye(r.shape[0]) - r @ ab.M_R @ r.T @ w
            if np.linalg.cond(core) > CR3_COND_LIMIT:
                raise SingularAdjustment(f"CR3 adjustment is singular in cluster {cid!r}")
            out.append(linalg.inv(core))
        return out
    return _cr2_matrices(fit, kind, resolve_phi(fit, kind, phi))


def vcov(
    fit: FitResult,
    kind: AdjustmentKind,
    phi: Optional[Sequence[np.ndarray]] = None,
    adjustments: Optional[Sequence[np.ndarray]] = None,
) -> RobustVariance:
    """Sandwich estimate; pass ``adjustments`` to reuse matrices computed for the same design."""
    ab = fit.absorbed
    A = list(adjustments) if adjustments is not None else adjustment_matrices(fit, kind, phi)
    meat = []
    total = np.zeros((ab.r, ab.r))
    for a, w, e, sl in zip(A, ab.W, fit.residuals, ab.slices):
        u = ab.R_dd[sl].T @ (w @ (a @ e))
        contrib = np.outer(u, u)
        meat.append(contrib)
        total += contrib
    V = ab.M_R @ total @ ab.M_R
    return RobustVariance(V=(V + V.T) / 2.0, kind=kind, meat=tuple(meat), adjustments=tuple(A))


def expected_vcov(
    fit: FitResult,
    kind: AdjustmentKind,
    phi: Optional[Sequence[np.ndarray]],
    sigma_true: Sequence[np.ndarray],
    adjustments: Optional[Sequence[np.ndarray]] = None,
) -> np.ndarray:
    """Expectation of the sandwich when the errors have covariance ``sigma_true``."""
    ab = fit.absorbed
    sigma = check_blocks(ab, sigma_true, "expected_vcov")
    A = list(adjustments) if adjustments is not None else adjustment_matrices(fit, kind, phi)
    total = np.zeros((ab.r, ab.r))
    for i, (a, w, sl) in enumerate(zip(A, ab.W, ab.slices)):
        g = residual_rows_transposed(ab, i)
        cov_e = g.T @ block_apply(sigma, ab.slices, g)
        u = ab.R_dd[sl].T @ w @ a
        total += u @ cov_e @ u.T
    out = ab.M_R @ total @ ab.M_R
    return (out + out.T) / 2.0


def cr2_criterion_gaps(fit: FitResult, adjustments: Sequence[np.ndarray], phi: Sequence[np.ndarray]) -> np.ndarray:
    """Relative Frobenius gaps of the per-cluster unbiasedness criterion.

    Compares R̈_i'W_i A_i (I-H_X)_i Φ (I-H_X)_i' A_i' W_i R̈_i with R̈_i'W_i Φ_i W_i R̈_i.
    """
    ab = fit.absorbed
    gaps = []
    for i, (a, w, p, sl) in enumerate(zip(adjustments, ab.W, phi, ab.slices)):
        g = residual_rows_transposed(ab, i)
        u = ab.R_dd[sl].T @ w
        lhs = u @ a @ (g.T @ block_apply(phi, ab.slices, g)) @ a.T @ u.T
        rhs = u @ p @ u.T
        gaps.append(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny))
    return np.array(gaps)
