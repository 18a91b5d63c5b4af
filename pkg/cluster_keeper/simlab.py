"""Monte Carlo calibration of the cluster-robust tests.

Six treatment-allocation designs (randomized block, cluster randomized and
difference-in-differences, each balanced and unbalanced) with three
conditions and three correlated outcomes per unit. Each replicate draws

    y_ijk = nu_{h(i,j), i} + eps_ijk

with cluster random effects nu_i (one per condition) and unit errors eps_ij
(one per outcome), stacks the outcomes, fits the fixed-effect model by OLS
and records AHT, Standard and Chi2 p-values for a menu of hypotheses.
"""
import itertools
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import crve, inference, worker
from .errors import ConfigError, NumericalError, NumericalWarning
from .estimator import FitResult, absorb, fit_wls, refit
from .model_frame import ClusteredDesign, Constraint, ModelSpec, WorkingModel, build_design

F = Fraction
RB = (F(1, 2), F(1, 3), F(1, 6))
RB_ALT = (F(1, 3), F(5, 9), F(1, 9))
CONTROL = (F(1), F(0), F(0))

# design id -> ((share of clusters, allocation fractions per condition), ...)
DESIGN_FRACTIONS: Dict[int, Tuple[Tuple[Fraction, Tuple[Fraction, ...]], ...]] = {
    1: ((F(1), RB),),
    2: ((F(1, 2), RB), (F(1, 2), RB_ALT)),
    3: ((F(1, 3), CONTROL), (F(1, 3), (F(0), F(1), F(0))), (F(1, 3), (F(0), F(0), F(1)))),
    4: ((F(1, 2), CONTROL), (F(3, 10), (F(0), F(1), F(0))), (F(1, 5), (F(0), F(0), F(1)))),
    5: ((F(1, 2), CONTROL), (F(1, 2), RB)),
    6: ((F(2, 3), CONTROL), (F(1, 3), RB)),
}
CLUSTER_EFFECT_DESIGNS = frozenset({1, 2, 5, 6})
PERIOD_EFFECT_DESIGNS = frozenset({3, 4, 5, 6})

OUTCOMES = (1, 2, 3)
TREATMENTS = (2, 3)
HYPOTHESES: Dict[str, Tuple[Tuple[str, ...], ...]] = {
    "q1_trt2": (("trt2:y1",),),
    "q1_trt3": (("trt3:y1",),),
    "q2_outcome1": (("trt2:y1",), ("trt3:y1",)),
    "q3_trt2": (("trt2:y1",), ("trt2:y2",), ("trt2:y3",)),
    "q3_trt3": (("trt3:y1",), ("trt3:y2",), ("trt3:y3",)),
    "q6_all": tuple((f"trt{h}:y{k}",) for k in OUTCOMES for h in TREATMENTS),
}
METHODS = inference.METHODS
DEFAULT_ALPHAS = (0.01, 0.05, 0.10)

FULL_GRID = {
    "designs": (1, 2, 3, 4, 5, 6),
    "m": (15, 30, 50),
    "n": (18, 30),
    "tau2": (0.05, 0.15, 0.25),
    "rho": (0.2, 0.8),
    "sigma_delta2": (0.0, 0.01, 0.04),
}

TABLE_COLUMNS = [
    "design", "m", "n", "tau2", "rho", "sigma_delta2", "hypothesis", "q",
    "method", "alpha", "reps", "failures", "reject_rate", "mc_se",
]


@dataclass(frozen=True)
class SimDesign:
    id: int
    m: int
    n: int
    groups: Tuple[Tuple[int, Tuple[int, int, int]], ...]

    def allocations(self) -> List[Tuple[int, int, int]]:
        """Per-cluster allocation, clusters ordered group by group."""
        out = []
        for m_g, alloc in self.groups:
            out += [alloc] * m_g
        return out


@dataclass(frozen=True)
class SimParams:
    tau2: float
    rho: float
    sigma_delta2: float
    reps: int = 1000
    seed: int = 1
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS

    def validate(self) -> "SimParams":
        if not 0.0 <= self.tau2 < 1.0:
            raise ConfigError(f"tau2 must lie in [0, 1), got {self.tau2}")
        if not -0.5 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [-0.5, 1] for three outcomes, got {self.rho}")
        if not 0.0 <= self.sigma_delta2 <= 3.0 * self.tau2 + 1e-12:
            raise ConfigError(f"sigma_delta2={self.sigma_delta2} must lie in [0, 3*tau2] for a valid random-effect covariance")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not self.alphas or any(not 0.0 < a <= 1.0 for a in self.alphas):
            raise ConfigError("alphas must lie in (0, 1]")
        return self


@dataclass(frozen=True)
class SimConfig:
    designs: Tuple[int, ...] = (1,)
    m: Tuple[int, ...] = (15,)
    n: Tuple[int, ...] = (18,)
    tau2: Tuple[float, ...] = (0.15,)
    rho: Tuple[float, ...] = (0.2,)
    sigma_delta2: Tuple[float, ...] = (0.01,)
    reps: int = 1000
    seed: int = 1
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS
    methods: Tuple[str, ...] = METHODS
    hypotheses: Tuple[str, ...] = tuple(HYPOTHESES)
    period_effects: str = "shared"
    full_grid: bool = False
    dataset_out: Optional[str] = None
    chunk_size: int = field(default=250, compare=False)

    def grid(self) -> "SimConfig":
        return replace(self, **FULL_GRID) if self.full_grid else self

    def cells(self):
        g = self.grid()
        return list(itertools.product(g.designs, g.m, g.n, g.tau2, g.rho, g.sigma_delta2))


def largest_remainder(total: int, fractions: Sequence[Fraction]) -> Tuple[int, ...]:
    """Integers proportional to ``fractions`` summing to ``total``; ties go to the earlier entry."""
    raw = [f * total for f in fractions]
    floors = [int(x) for x in raw]
    short = total - sum(floors)
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - floors[k]), k))
    for k in order[:short]:
        floors[k] += 1
    return tuple(floors)


def make_design(id: int, m: int, n: int) -> SimDesign:
    """Cluster groups and per-cluster allocations for design ``id``.

    Group cluster counts and unit allocations need not divide evenly: both are
    rounded with ``largest_remainder`` (m=15 gives groups 8/7 for design 2,
    8/4/3 for design 4 and 8/7 for design 5). Rounding is refused, with
    ConfigError, only when it leaves a group with no clusters or a condition
    the design assigns with no units.
    """
    if id not in DESIGN_FRACTIONS:
        raise ConfigError(f"unknown design {id}; expected 1-6")
    if m < 2 or n < 1:
        raise ConfigError(f"design {id} needs m >= 2 and n >= 1 (got m={m}, n={n})")
    spec = DESIGN_FRACTIONS[id]
    sizes = largest_remainder(m, [share for share, _ in spec])
    groups = []
    for m_g, (_, fractions) in zip(sizes, spec):
        if m_g == 0:
            raise ConfigError(f"design {id} with m={m} leaves a group without clusters")
        alloc = largest_remainder(n, fractions)
        if any(a == 0 and f > 0 for a, f in zip(alloc, fractions)):
            raise ConfigError(f"design {id} with n={n} leaves a condition without units")
        groups.append((m_g, alloc))
    return SimDesign(id, m, n, tuple(groups))


def _conditions(design: SimDesign) -> np.ndarray:
    """m x n matrix of condition labels 1..3, units assigned in condition order."""
    rows = [np.repeat([1, 2, 3], alloc) for alloc in design.allocations()]
    return np.array(rows, dtype=int)


def _skeleton(design: SimDesign) -> pd.DataFrame:
    cond = _conditions(design)
    m, n = cond.shape
    return pd.DataFrame({
        "cluster": np.repeat(np.arange(1, m + 1), n),
        "period": np.tile(np.arange(1, n + 1), m),
        "condition": cond.reshape(-1),
    })


def draw_outcomes(design: SimDesign, params: SimParams, rep_index: int) -> np.ndarray:
    """m x n x 3 outcome array for one replicate; the stream depends only on (seed, rep_index)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(params.seed), int(rep_index)]))
    cond = _conditions(design)
    m, n = cond.shape
    z_nu = rng.standard_normal((m, 4))
    z_eps = rng.standard_normal((m, n, 4))

    common = np.sqrt(max(3.0 * params.tau2 - params.sigma_delta2, 0.0) / 3.0)
    spread = np.sqrt(params.sigma_delta2 / 2.0)
    dev = z_nu[:, 1:] - z_nu[:, 1:].mean(axis=1, keepdims=True)
    nu = common * z_nu[:, :1] + spread * dev

    level = np.sqrt(1.0 - params.tau2)
    shared = np.sqrt((1.0 + 2.0 * params.rho) / 3.0)
    own = np.sqrt(max(1.0 - params.rho, 0.0))
    edev = z_eps[:, :, 1:] - z_eps[:, :, 1:].mean(axis=2, keepdims=True)
    eps = level * (shared * z_eps[:, :, :1] + own * edev)

    effects = np.take_along_axis(nu, cond - 1, axis=1)
    return effects[:, :, None] + eps


def simulate_outcomes(design: SimDesign, params: SimParams, rep_index: int) -> pd.DataFrame:
    params.validate()
    y = draw_outcomes(design, params, rep_index)
    table = _skeleton(design)
    for k in OUTCOMES:
        table[f"y{k}"] = y[:, :, k - 1].reshape(-1)
    return table


def _long_frame(design: SimDesign, dataset: pd.DataFrame, period_effects: str) -> pd.DataFrame:
    parts = []
    for k in OUTCOMES:
        part = dataset[["cluster", "period", "condition"]].copy()
        part["outcome"] = k
        part["y"] = dataset[f"y{k}"].to_numpy(dtype=float)
        parts.append(part)
    long = pd.concat(parts, ignore_index=True)
    long = long.sort_values(["cluster", "outcome", "period"], kind="stable").reset_index(drop=True)
    for k in OUTCOMES:
        for h in TREATMENTS:
            long[f"trt{h}:y{k}"] = ((long["condition"] == h) & (long["outcome"] == k)).astype(float)
    if period_effects == "by_outcome":
        long["period_outcome"] = long["period"].astype(str) + ":y" + long["outcome"].astype(str)
    return long


def build_sim_model(
    design: SimDesign, dataset: pd.DataFrame, period_effects: str = "shared"
) -> Tuple[ClusteredDesign, List[Constraint]]:
    if period_effects not in ("shared", "by_outcome"):
        raise ConfigError(f"period_effects must be 'shared' or 'by_outcome', got {period_effects!r}")
    long = _long_frame(design, dataset, period_effects)
    between = ["outcome"]
    if design.id in PERIOD_EFFECT_DESIGNS:
        between.append("period" if period_effects == "shared" else "period_outcome")
    within = ("cluster",) if design.id in CLUSTER_EFFECT_DESIGNS else ()
    spec = ModelSpec(
        outcome="y",
        covariates=tuple(f"trt{h}:y{k}" for k in OUTCOMES for h in TREATMENTS),
        cluster="cluster",
        absorb_between=tuple(between),
        absorb_within=within,
    )
    model = build_design(long, spec)
    constraints = [
        Constraint.from_names(model.column_names, [{name: 1.0 for name in row} for row in rows], name=hyp)
        for hyp, rows in HYPOTHESES.items()
    ]
    return model, constraints


@dataclass(frozen=True, eq=False)
class _CellContext:
    fit0: FitResult
    constraints: Dict[str, Constraint]
    cr2_kind: crve.AdjustmentKind
    cr1_kind: crve.AdjustmentKind
    cr2_adjust: Tuple[np.ndarray, ...]
    cr1_adjust: Tuple[np.ndarray, ...]
    etas: Dict[str, Optional[float]]


@lru_cache(maxsize=8)
def _cell_context(design: SimDesign, period_effects: str) -> _CellContext:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalWarning)
        skeleton = _skeleton(design)
        for k in OUTCOMES:
            skeleton[f"y{k}"] = 0.0
        model, constraints = build_sim_model(design, skeleton, period_effects)
        fit0 = fit_wls(absorb(model))
        cr2_kind = crve.AdjustmentKind.cr2(WorkingModel.identity())
        cr1_kind = crve.AdjustmentKind("CR1")
        cr2_adjust = tuple(crve.adjustment_matrices(fit0, cr2_kind))
        cr1_adjust = tuple(crve.adjustment_matrices(fit0, cr1_kind))
        phi = crve.resolve_phi(fit0, cr2_kind)
        v0 = crve.vcov(fit0, cr2_kind, adjustments=cr2_adjust)
        gram = inference.projection_gram(fit0, v0, phi)
        etas = {}
        for con in constraints:
            try:
                etas[con.name] = inference.aht_df(fit0, v0, phi, con, gram=gram)[0]
            except NumericalError:
                etas[con.name] = None
    return _CellContext(fit0, {c.name: c for c in constraints}, cr2_kind, cr1_kind, cr2_adjust, cr1_adjust, etas)


def replicate_pvalues(
    design: SimDesign,
    params: SimParams,
    rep_index: int,
    hypotheses: Sequence[str],
    methods: Sequence[str],
    period_effects: str = "shared",
) -> np.ndarray:
    """len(hypotheses) x len(methods) p-values for one replicate; NaN marks a failed estimate."""
    ctx = _cell_context(design, period_effects)
    y = draw_outcomes(design, params, rep_index)
    blocks = [y[i].T.reshape(-1) for i in range(design.m)]
    out = np.full((len(hypotheses), len(methods)), np.nan)
    try:
        fit = refit(ctx.fit0, blocks)
        v2 = crve.vcov(fit, ctx.cr2_kind, adjustments=ctx.cr2_adjust)
        v1 = crve.vcov(fit, ctx.cr1_kind, adjustments=ctx.cr1_adjust) if "Standard" in methods else None
    except NumericalError:
        return out
    for a, hyp in enumerate(hypotheses):
        con = ctx.constraints[hyp]
        for b, method in enumerate(methods):
            try:
                if method == "AHT":
                    eta = ctx.etas[hyp]
                    if eta is None:
                        continue
                    res = inference.aht_test(inference.wald(fit, v2, con), con.q, eta, hyp)
                elif method == "Standard":
                    res = inference.standard_test(inference.wald(fit, v1, con), con.q, design.m, hyp)
                else:
                    res = inference.chi2_test(inference.wald(fit, v2, con), con.q, hyp)
            except NumericalError:
                continue
            out[a, b] = res.p
    return out


def _run_chunk(task) -> np.ndarray:
    design, params, hypotheses, methods, period_effects, start, stop = task
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalWarning)
        return np.stack([
            replicate_pvalues(design, params, k, hypotheses, methods, period_effects)
            for k in range(start, stop)
        ])


def _validate(config: SimConfig) -> None:
    unknown = [h for h in config.hypotheses if h not in HYPOTHESES]
    if unknown:
        raise ConfigError("unknown hypotheses: " + ", ".join(unknown))
    bad = [mth for mth in config.methods if mth not in METHODS]
    if bad:
        raise ConfigError("unknown methods: " + ", ".join(bad))
    if not config.methods or not config.hypotheses:
        raise ConfigError("simulate needs at least one method and one hypothesis")


def run_experiment(config: SimConfig, threads: int = 1, quiet: bool = False) -> pd.DataFrame:
    _validate(config)
    cells = []
    for design_id, m, n, tau2, rho, sd2 in config.cells():
        design = make_design(design_id, m, n)
        params = SimParams(tau2, rho, sd2, config.reps, config.seed, tuple(config.alphas)).validate()
        cells.append((design, params))

    tasks, owners = [], []
    for c, (design, params) in enumerate(cells):
        for start in range(0, params.reps, config.chunk_size):
            stop = min(start + config.chunk_size, params.reps)
            tasks.append((design, params, tuple(config.hypotheses), tuple(config.methods), config.period_effects, start, stop))
            owners.append(c)
    results = worker.run(_run_chunk, tasks, threads=threads, quiet=quiet)

    rows = []
    for c, (design, params) in enumerate(cells):
        pvals = np.concatenate([res for res, owner in zip(results, owners) if owner == c])
        for a, hyp in enumerate(config.hypotheses):
            q = len(HYPOTHESES[hyp])
            for b, method in enumerate(config.methods):
                p = pvals[:, a, b]
                valid = p[~np.isnan(p)]
                failures = int(p.size - valid.size)
                for alpha in params.alphas:
                    if valid.size:
                        rate = float(np.mean(valid <= alpha))
                        se = float(np.sqrt(rate * (1.0 - rate) / valid.size))
                    else:
                        rate = se = float("nan")
                    rows.append([design.id, design.m, design.n, params.tau2, params.rho, params.sigma_delta2,
                                 hyp, q, method, float(alpha), params.reps, failures, rate, se])
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)
