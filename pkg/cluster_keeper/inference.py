"""Wald tests with small-sample reference distributions.

* AHT: the Wald statistic scaled to an F(q, eta - q + 1) whose eta matches the
  mean and total variance of the CR2 sandwich under the working model.
* Standard: CR1 sandwich, Q/q referred to F(q, m - 1).
* Chi2: Q referred to a chi-square with q degrees of freedom.

Degrees of freedom are built from the Φ inner products of the per-cluster
coefficient projections P_i = (I - H_X)_i' A_i W_i R̈_i M. They do not depend
on the outcome, so ``projection_gram`` can be computed once per design and
reused across constraints and replicates.
"""
import warnings
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import linalg

from . import matkern
from .crve import RobustVariance
from .errors import DegenerateVariance, DegreesOfFreedomTooSmall, InvalidInput, NotPD, NumericalWarning, Underdetermined
from .estimator import FitResult, block_apply, residual_projection, true_variance
from .model_frame import Constraint

METHODS = ("AHT", "Standard", "Chi2")
WALD_COND_LIMIT = 1e12


@dataclass(frozen=True)
class TestResult:
    method: str
    Q: float
    q: int
    df_num: float
    df_denom: float
    Fstat: float
    p: float
    eta: Optional[float] = None
    name: str = ""

    __test__ = False  # not a pytest class

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ProjectionGram:
    basis: np.ndarray  # N x m x r, basis[:, i, :] = P_i
    gram: np.ndarray  # m x r x m x r
    empirical: bool = False
    ignore_within: bool = False


@dataclass(frozen=True, eq=False)
class DofContext:
    p_vectors: np.ndarray  # m x q x N
    G: np.ndarray
    Ghalf_inv: np.ndarray


def wald(fit: FitResult, V: RobustVariance, constraint: Constraint) -> float:
    if constraint.C.shape[1] != fit.absorbed.r:
        raise InvalidInput(f"constraint has {constraint.C.shape[1]} columns for {fit.absorbed.r} coefficients")
    z = constraint.C @ fit.beta - constraint.d
    cvc = constraint.C @ V.V @ constraint.C.T
    cvc = (cvc + cvc.T) / 2.0
    values = matkern.sym_eigen(cvc).values
    if values[0] <= 0 or values[-1] <= values[0] / WALD_COND_LIMIT:
        raise DegenerateVariance(f"C V C' is singular for constraint {constraint.name or '(unnamed)'}")
    Q = float(z @ linalg.solve(cvc, z, assume_a="sym"))
    return max(Q, 0.0)


def projection_gram(
    fit: FitResult,
    V: RobustVariance,
    phi: Optional[Sequence[np.ndarray]],
    empirical: bool = False,
    ignore_within: bool = False,
) -> ProjectionGram:
    """Inner products p_i' Φ p_j of the per-cluster coefficient projections.

    ``empirical`` replaces Φ_i by e_i e_i'. ``ignore_within`` drops the
    within-cluster factor of the residual maker. Both are experimental.
    """
    ab = fit.absorbed
    m, r, N = ab.m, ab.r, ab.N
    if empirical:
        warnings.warn("empirical degrees of freedom are experimental", NumericalWarning, stacklevel=2)
    if ignore_within:
        warnings.warn("ignoring within-cluster effects in degrees of freedom is experimental", NumericalWarning, stacklevel=2)
    z = np.zeros((N, m * r))
    for i, (a, w, sl) in enumerate(zip(V.adjustments, ab.W, ab.slices)):
        z[sl, i * r:(i + 1) * r] = a @ w @ ab.R_dd[sl] @ ab.M_R
    P = residual_projection(ab, z, transpose=True, include_within=not ignore_within)
    if empirical:
        e = fit.stacked_residuals()
        if not np.any(e):
            raise Underdetermined("residuals are identically zero; empirical degrees of freedom undefined")
        u = np.stack([e[sl] @ P[sl] for sl in ab.slices])
        F = u.T @ u
    else:
        if phi is None:
            raise InvalidInput("model-assisted degrees of freedom need working covariance blocks")
        F = P.T @ block_apply(list(phi), ab.slices, P)
    F = (F + F.T) / 2.0
    return ProjectionGram(P.reshape(N, m, r), F.reshape(m, r, m, r), empirical, ignore_within)


def satterthwaite_df(
    fit: FitResult,
    V: RobustVariance,
    phi: Optional[Sequence[np.ndarray]],
    c: Sequence[float],
    gram: Optional[ProjectionGram] = None,
    **flags,
) -> float:
    gram = gram or projection_gram(fit, V, phi, **flags)
    c = np.asarray(c, dtype=float).reshape(-1)
    f = np.einsum("iajb,a,b->ij", gram.gram, c, c)
    denom = float(np.sum(f * f))
    if denom <= 0:
        raise DegenerateVariance("contrast has zero variance under the working model")
    return float(np.trace(f)) ** 2 / denom


def aht_df(
    fit: FitResult,
    V: RobustVariance,
    phi: Optional[Sequence[np.ndarray]],
    constraint: Constraint,
    gram: Optional[ProjectionGram] = None,
    **flags,
):
    """Total-variance matched degrees of freedom eta for a q-dimensional constraint.

    G is always the working-model variance of C beta, also for the empirical variant.
    """
    gram = gram or projection_gram(fit, V, phi, **flags)
    C = constraint.C
    q = constraint.q
    if phi is None:
        phi = [np.eye(n) for n in fit.design.sizes]
    G = C @ true_variance(fit, phi) @ C.T
    try:
        g_half = matkern.inv_sqrt_pd(G)
    except NotPD:
        raise DegenerateVariance(f"working-model variance of constraint {constraint.name or '(unnamed)'} is singular") from None
    K = C.T @ g_half
    F = np.einsum("iajb,as,bt->isjt", gram.gram, K, K)
    cross = np.einsum("isjt,itjs->", F, F)
    same = np.einsum("isjs,itjt->", F, F)
    total = float(cross + same)
    if total <= 0:
        raise DegenerateVariance("degenerate total variance in AHT degrees of freedom")
    eta = q * (q + 1) / total
    p_vectors = np.einsum("nia,as->isn", gram.basis, K)
    return eta, DofContext(p_vectors=p_vectors, G=(G + G.T) / 2.0, Ghalf_inv=g_half)


def aht_test(Q: float, q: int, eta: float, name: str = "") -> TestResult:
    if not eta > q - 1:
        raise DegreesOfFreedomTooSmall(eta, q, name or None)
    df_denom = eta - q + 1
    fstat = (df_denom / (eta * q)) * Q
    return TestResult("AHT", float(Q), int(q), float(q), float(df_denom), float(fstat),
                      matkern.f_sf(fstat, q, df_denom), float(eta), name)


def standard_test(Q: float, q: int, m: int, name: str = "") -> TestResult:
    if m < 2:
        raise InvalidInput("standard test needs at least two clusters")
    fstat = Q / q
    return TestResult("Standard", float(Q), int(q), float(q), float(m - 1), float(fstat),
                      matkern.f_sf(fstat, q, m - 1), None, name)


def chi2_test(Q: float, q: int, name: str = "") -> TestResult:
    return TestResult("Chi2", float(Q), int(q), float(q), float("inf"), float(Q / q),
                      matkern.chi2_sf(Q, q), None, name)


def hypothesis_test(
    fit: FitResult,
    constraint: Constraint,
    method: str,
    V: RobustVariance,
    phi: Optional[Sequence[np.ndarray]] = None,
    gram: Optional[ProjectionGram] = None,
) -> TestResult:
    """Run one test; ``V`` must be the sandwich the method calls for (CR2 for AHT, CR1 for Standard)."""
    Q = wald(fit, V, constraint)
    if method == "AHT":
        eta, _ = aht_df(fit, V, phi, constraint, gram=gram)
        return aht_test(Q, constraint.q, eta, constraint.name)
    if method == "Standard":
        return standard_test(Q, constraint.q, fit.m, constraint.name)
    if method == "Chi2":
        return chi2_test(Q, constraint.q, constraint.name)
    raise InvalidInput(f"unknown test method {method!r}; expected one of {', '.join(METHODS)}")


def coefficient_table(
    fit: FitResult,
    V: RobustVariance,
    phi: Optional[Sequence[np.ndarray]],
    level: float = 0.95,
) -> List[dict]:
    """Per-coefficient estimate, standard error, Satterthwaite df, t test and t interval."""
    if not 0.0 < level < 1.0:
        raise InvalidInput(f"confidence level must lie in (0, 1), got {level!r}")
    gram = projection_gram(fit, V, phi)
    se = V.std_errors
    rows = []
    for j, name in enumerate(fit.names):
        c = np.zeros(fit.absorbed.r)
        c[j] = 1.0
        df = satterthwaite_df(fit, V, phi, c, gram=gram)
        t = fit.beta[j] / se[j] if se[j] > 0 else float("nan")
        p = matkern.t_sf_two_sided(t, df) if np.isfinite(t) else float("nan")
        half = matkern.t_quantile(0.5 + level / 2.0, df) * se[j]
        rows.append({
            "name": name,
            "estimate": float(fit.beta[j]),
            "std_error": float(se[j]),
            "df": float(df),
            "t": float(t),
            "p_value": float(p),
            "conf_low": float(fit.beta[j] - half),
            "conf_high": float(fit.beta[j] + half),
        })
    return rows
