"""Clustered regression data model.

A design is stored as per-cluster blocks of the outcome ``y``, the focal
covariates ``R``, the between-cluster fixed effects ``S``, the
within-cluster fixed effects ``T`` and the weight matrix ``W``.
"""
import warnings
from dataclasses import dataclass, field, replace
from typing import Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import matkern
from .errors import ConfigError, DataError, InvalidInput, NotPD, NotPSD, NumericalWarning, Underdetermined

INTERCEPT = "(Intercept)"
WITHIN_SUFFIX = "_within"
RHO_MARGIN = 1e-6


@dataclass(frozen=True, eq=False)
class ClusterBlock:
    id: Hashable
    y: np.ndarray
    R: np.ndarray
    S: np.ndarray
    T: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.y).shape[0]
        if n < 1:
            raise DataError(f"cluster {self.id!r} is empty")
        for name in ("y", "R", "S", "T", "W"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if name == "y":
                arr = arr.reshape(n)
            elif arr.ndim != 2:
                raise InvalidInput(f"cluster {self.id!r}: {name} must be two-dimensional")
            if arr.shape[0] != n or (name == "W" and arr.shape != (n, n)):
                raise InvalidInput(f"cluster {self.id!r}: {name} has shape {arr.shape}, expected {n} rows")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"cluster {self.id!r}: {name} has non-finite entries")
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True, eq=False)
class ClusteredDesign:
    clusters: Tuple[ClusterBlock, ...]
    column_names: Tuple[str, ...]
    s_names: Tuple[str, ...] = ()
    t_names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "s_names", tuple(self.s_names))
        object.__setattr__(self, "t_names", tuple(self.t_names))
        if not self.clusters:
            raise DataError("design has no clusters")
        r, s, t = len(self.column_names), len(self.s_names), len(self.t_names)
        ids = [c.id for c in self.clusters]
        if len(set(ids)) != len(ids):
            raise InvalidInput("cluster ids must be unique")
        support = np.zeros(t, dtype=int)
        for c in self.clusters:
            if c.R.shape[1] != r or c.S.shape[1] != s or c.T.shape[1] != t:
                raise InvalidInput(f"cluster {c.id!r}: column counts do not match the design names")
            if not np.allclose(c.W, c.W.T, rtol=0, atol=1e-12 * max(1.0, np.abs(c.W).max())):
                raise InvalidInput(f"cluster {c.id!r}: weight block is not symmetric")
            try:
                matkern.chol_upper(c.W)
            except NotPD:
                raise DataError(f"cluster {c.id!r}: weight block is not positive definite") from None
            support += np.any(c.T != 0, axis=0)
        if np.any(support > 1):
            bad = [self.t_names[j] for j in np.flatnonzero(support > 1)]
            raise DataError("within-cluster columns span several clusters: " + ", ".join(bad))

    @property
    def r(self) -> int:
        return len(self.column_names)

    @property
    def s(self) -> int:
        return len(self.s_names)

    @property
    def t(self) -> int:
        return len(self.t_names)

    @property
    def p(self) -> int:
        return self.r + self.s + self.t

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> List[int]:
        return [c.n for c in self.clusters]

    @property
    def N(self) -> int:
        return int(sum(self.sizes))

    @property
    def ids(self) -> List[Hashable]:
        return [c.id for c in self.clusters]

    def with_outcome(self, y_blocks: Sequence[np.ndarray]) -> "ClusteredDesign":
        if len(y_blocks) != self.m:
            raise InvalidInput("one outcome block per cluster is required")
        blocks = tuple(replace(c, y=np.asarray(y, dtype=float)) for c, y in zip(self.clusters, y_blocks))
        return replace(self, clusters=blocks)

    def with_weights(self, w_blocks: Sequence[np.ndarray]) -> "ClusteredDesign":
        if len(w_blocks) != self.m:
            raise InvalidInput("one weight block per cluster is required")
        blocks = tuple(replace(c, W=np.asarray(w, dtype=float)) for c, w in zip(self.clusters, w_blocks))
        return replace(self, clusters=blocks)


@dataclass(frozen=True, eq=False)
class WorkingModel:
    kind: str = "identity"  # identity | compound_symmetric | user
    rho: float = 0.0
    blocks: Tuple[np.ndarray, ...] = ()
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "compound_symmetric", "user"):
            raise InvalidInput(f"unknown working model kind {self.kind!r}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidInput(f"working model scale must be positive, got {self.scale!r}")
        if self.kind == "user" and not self.blocks:
            raise InvalidInput("user working model needs one block per cluster")
        object.__setattr__(self, "blocks", tuple(np.asarray(b, dtype=float) for b in self.blocks))

    @classmethod
    def identity(cls, scale: float = 1.0) -> "WorkingModel":
        return cls("identity", scale=scale)

    @classmethod
    def compound_symmetric(cls, rho: float, scale: float = 1.0) -> "WorkingModel":
        return cls("compound_symmetric", rho=float(rho), scale=scale)

    @classmethod
    def user(cls, blocks: Sequence[np.ndarray], scale: float = 1.0) -> "WorkingModel":
        return cls("user", blocks=tuple(blocks), scale=scale)

    def rescaled(self, factor: float) -> "WorkingModel":
        return replace(self, scale=self.scale * factor)

    def describe(self) -> dict:
        out = {"kind": self.kind, "scale": self.scale}
        if self.kind == "compound_symmetric":
            out["rho"] = self.rho
        return out


@dataclass(frozen=True, eq=False)
class Constraint:
    """Linear hypothesis C beta = d over the focal coefficients."""

    C: np.ndarray
    d: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        q = C.shape[0]
        d = np.zeros(q) if self.d is None else np.asarray(self.d, dtype=float).reshape(-1)
        if q < 1:
            raise InvalidInput("constraint needs at least one row")
        if d.shape[0] != q:
            raise InvalidInput(f"constraint value has length {d.shape[0]}, expected {q}")
        if not (np.all(np.isfinite(C)) and np.all(np.isfinite(d))):
            raise InvalidInput("constraint has non-finite entries")
        if np.linalg.matrix_rank(C) < q:
            label = f"constraint {self.name!r}" if self.name else "constraint"
            raise InvalidInput(f"{label} rows are linearly dependent")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "d", d)

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @classmethod
    def from_names(
        cls,
        names: Sequence[str],
        rows: Sequence[Mapping[str, float]],
        values: Optional[Sequence[float]] = None,
        name: str = "",
    ) -> "Constraint":
        index = {n: j for j, n in enumerate(names)}
        C = np.zeros((len(rows), len(names)))
        for i, row in enumerate(rows):
            for coef, weight in row.items():
                if coef not in index:
                    raise ConfigError(f"constraint {name!r} names unknown coefficient {coef!r}")
                C[i, index[coef]] = float(weight)
        return cls(C, None if values is None else np.asarray(values, dtype=float), name)

    def transformed(self, M: np.ndarray) -> "Constraint":
        M = np.asarray(M, dtype=float)
        return Constraint(M @ self.C, M @ self.d, self.name)


@dataclass(frozen=True)
class ModelSpec:
    outcome: str
    covariates: Tuple[str, ...]
    cluster: str
    absorb_between: Tuple[str, ...] = ()
    absorb_within: Tuple[str, ...] = ()
    weights: Optional[str] = None
    intercept: bool = False
    within_deviations: Tuple[str, ...] = field(default=())

    def focal_names(self) -> List[str]:
        names = [INTERCEPT] if self.intercept else []
        names += list(self.covariates)
        names += [v + WITHIN_SUFFIX for v in self.within_deviations]
        return names


def _require_columns(table: pd.DataFrame, columns: Sequence[str]) -> None:
    missing = [c for c in columns if c not in table.columns]
    if missing:
        raise ConfigError("missing column(s): " + ", ".join(missing))


def _numeric(table: pd.DataFrame, column: str) -> np.ndarray:
    col = table[column]
    if not (pd.api.types.is_numeric_dtype(col) or pd.api.types.is_bool_dtype(col)):
        raise DataError(f"column {column!r} is not numeric")
    return col.to_numpy(dtype=float)


def _indicators(values: pd.Series, factor: str, drop_first: bool) -> Tuple[np.ndarray, List[str]]:
    cat = pd.Categorical(values)
    levels = list(cat.categories)
    mat = np.eye(len(levels))[cat.codes]
    names = [f"{factor}[{lvl}]" for lvl in levels]
    if drop_first:
        return mat[:, 1:], names[1:]
    return mat, names


def within_deviations(table: pd.DataFrame, vars: Sequence[str], cluster_id: str) -> pd.DataFrame:
    """Cluster-demeaned copies of ``vars``, named ``<var>_within``.

    Means are unweighted, whatever weights the model uses.
    """
    _require_columns(table, list(vars) + [cluster_id])
    out = {}
    groups = table.groupby(cluster_id, sort=False)
    for v in vars:
        _numeric(table, v)
        col = table[v].astype(float)
        out[v + WITHIN_SUFFIX] = col - groups[v].transform("mean").astype(float)
    return pd.DataFrame(out, index=table.index)


def build_design(table: pd.DataFrame, spec: ModelSpec) -> ClusteredDesign:
    base_cols = [spec.outcome, spec.cluster, *spec.covariates, *spec.absorb_between, *spec.absorb_within]
    base_cols += list(spec.within_deviations)
    if spec.weights:
        base_cols.append(spec.weights)
    _require_columns(table, base_cols)

    used = table[list(dict.fromkeys(base_cols))]
    na_cols = [c for c in used.columns if used[c].isna().any()]
    if na_cols:
        raise DataError("missing values in column(s): " + ", ".join(na_cols))
    if spec.within_deviations:
        used = pd.concat([used, within_deviations(used, spec.within_deviations, spec.cluster)], axis=1)

    n_rows = len(used)
    if n_rows == 0:
        raise DataError("data table has no rows")
    y = _numeric(used, spec.outcome)
    focal = spec.focal_names()
    r_cols = [np.ones(n_rows)] if spec.intercept else []
    r_cols += [_numeric(used, c) for c in focal[1 if spec.intercept else 0:]]
    R = np.column_stack(r_cols) if r_cols else np.zeros((n_rows, 0))

    s_parts, s_names = [np.zeros((n_rows, 0))], []
    for idx, factor in enumerate(spec.absorb_between):
        keep_all = idx == 0 and not spec.intercept
        mat, names = _indicators(used[factor], factor, drop_first=not keep_all)
        s_parts.append(mat)
        s_names += names
    S = np.hstack(s_parts)

    codes, cluster_ids = pd.factorize(used[spec.cluster], sort=False)
    t_parts, t_names = [np.zeros((n_rows, 0))], []
    for factor in spec.absorb_within:
        spread = pd.Series(codes).groupby(used[factor].to_numpy()).nunique()
        if (spread > 1).any():
            raise DataError(f"factor {factor!r} is not nested within clusters; declare it as between-cluster")
        mat, names = _indicators(used[factor], factor, drop_first=False)
        t_parts.append(mat)
        t_names += names
    T = np.hstack(t_parts)

    if spec.weights:
        w = _numeric(used, spec.weights)
        if np.any(w <= 0):
            raise DataError(f"weight column {spec.weights!r} has non-positive values")
    else:
        w = np.ones(n_rows)

    blocks = []
    for k, cid in enumerate(cluster_ids):
        rows = np.flatnonzero(codes == k)
        blocks.append(ClusterBlock(
            id=cid.item() if hasattr(cid, "item") else cid,
            y=y[rows],
            R=R[rows],
            S=S[rows],
            T=T[rows],
            W=np.diag(w[rows]),
        ))
    return ClusteredDesign(tuple(blocks), tuple(focal), tuple(s_names), tuple(t_names))


def working_covariance(model: WorkingModel, design: ClusteredDesign) -> List[np.ndarray]:
    sizes = design.sizes
    if model.kind == "identity":
        return [model.scale * np.eye(n) for n in sizes]
    if model.kind == "compound_symmetric":
        n_max = max(sizes)
        lower = -1.0 / (n_max - 1) if n_max > 1 else -np.inf
        if not (lower < model.rho < 1.0):
            raise InvalidInput(f"compound-symmetric rho={model.rho} outside ({lower:.6g}, 1) for cluster size {n_max}")
        return [model.scale * ((1.0 - model.rho) * np.eye(n) + model.rho * np.ones((n, n))) for n in sizes]
    if len(model.blocks) != design.m:
        raise InvalidInput(f"user working model has {len(model.blocks)} blocks for {design.m} clusters")
    out = []
    for cid, n, block in zip(design.ids, sizes, model.blocks):
        if block.shape != (n, n):
            raise InvalidInput(f"working block for cluster {cid!r} has shape {block.shape}, expected ({n}, {n})")
        sym = matkern.as_symmetric(block)
        if matkern.sym_eigen(sym).values[-1] <= 0:
            raise NotPSD(f"working block for cluster {cid!r} is not positive definite")
        out.append(model.scale * sym)
    return out


def estimate_rho(residuals: Sequence[np.ndarray]) -> float:
    """Moment estimate of a common within-cluster correlation from residuals.

    The estimate is clamped so the implied compound-symmetric blocks stay positive definite.
    """
    blocks = [np.asarray(e, dtype=float).reshape(-1) for e in residuals]
    sizes = np.array([b.size for b in blocks])
    if not np.any(sizes >= 2):
        raise Underdetermined("every cluster is a singleton; within-cluster correlation is not estimable")
    total_ss = sum(float(b @ b) for b in blocks)
    if total_ss == 0.0:
        raise Underdetermined("residuals are identically zero")
    cross = sum(float(b.sum()) ** 2 - float(b @ b) for b in blocks)
    pairs = float(np.sum(sizes * (sizes - 1)))
    sigma2 = total_ss / sizes.sum()
    rho = cross / (pairs * sigma2)
    lower = -1.0 / (sizes.max() - 1) + RHO_MARGIN
    upper = 1.0 - RHO_MARGIN
    if rho < lower or rho > upper:
        clamped = min(max(rho, lower), upper)
        warnings.warn(f"estimated rho {rho:.6g} clamped to {clamped:.6g}", NumericalWarning, stacklevel=2)
        rho = clamped
    return float(rho)
