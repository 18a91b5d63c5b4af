import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import linalg

from cluster_keeper.errors import CollinearFocal, InvalidInput, NumericalWarning
from cluster_keeper.estimator import (
    absorb,
    fit_wls,
    refit,
    residual_projection,
    residual_rows_transposed,
    true_variance,
)
from cluster_keeper.model_frame import ClusterBlock, ClusteredDesign

import oracles

CASES = {
    "plain": dict(sizes=[3, 4, 5, 3, 4]),
    "cluster_fe": dict(sizes=[3, 4, 5, 3, 4], cluster_effects=True),
    "period_fe": dict(sizes=[4, 4, 4, 4, 4], periods=3),
    "two_way_weighted": dict(sizes=[4, 5, 4, 6, 5, 4], periods=3, cluster_effects=True, weights="diagonal"),
    "full_weights": dict(sizes=[3, 4, 5, 4, 3], periods=2, weights="full"),
}


@pytest.fixture(params=sorted(CASES))
def design(request):
    return oracles.random_design(11, **CASES[request.param])


def test_absorbed_beta_matches_dummy_regression(design):
    fit = fit_wls(absorb(design))
    beta, e, _ = oracles.direct_fit(design)
    assert_allclose(fit.beta, beta, rtol=1e-10, atol=1e-12)
    assert_allclose(fit.stacked_residuals(), e, atol=1e-10)


def test_residual_projection_matches_materialized(design):
    ab = absorb(design)
    _, _, I_H = oracles.direct_fit(design)
    z = np.random.default_rng(0).standard_normal((ab.N, 3))
    assert_allclose(residual_projection(ab, z), I_H @ z, atol=1e-10)
    assert_allclose(residual_projection(ab, z, transpose=True), I_H.T @ z, atol=1e-10)
    sl = ab.slices[2]
    assert_allclose(residual_rows_transposed(ab, 2), I_H[sl].T, atol=1e-10)


def test_residual_projection_shape_check(design):
    with pytest.raises(InvalidInput):
        residual_projection(absorb(design), np.zeros((3, 1)))


def test_absorbed_covariates(design):
    ab = absorb(design)
    assert_allclose(ab.R_dd, oracles.absorbed_covariates(design), atol=1e-10)


def test_redundant_fixed_effects_dropped_with_warning():
    base = oracles.random_design(4, [4, 4, 4, 4], periods=4, cluster_effects=True)
    # all period levels plus cluster indicators: one column is redundant
    blocks = []
    for i, c in enumerate(base.clusters):
        period = (np.arange(c.n) + i) % 4
        blocks.append(ClusterBlock(c.id, c.y, c.R, np.eye(4)[period], c.T, c.W))
    design = ClusteredDesign(tuple(blocks), base.column_names, tuple(f"period[{k}]" for k in range(4)), base.t_names)
    with pytest.warns(NumericalWarning, match="dropped"):
        ab = absorb(design)
    assert len(ab.dropped) == 1
    assert len(ab.s_kept) + len(ab.t_kept) == 4 + 4 - 1
    assert_allclose(fit_wls(ab).beta, oracles.direct_fit(design)[0], rtol=1e-10)


def test_focal_collinear_with_fixed_effects():
    base = oracles.random_design(5, [3, 3, 3], cluster_effects=True)
    blocks = [
        ClusterBlock(c.id, c.y, np.column_stack([c.R[:, 0], np.full(c.n, float(i))]), c.S, c.T, c.W)
        for i, c in enumerate(base.clusters)
    ]
    design = ClusteredDesign(tuple(blocks), ("x", "level"), (), base.t_names)
    with pytest.raises(CollinearFocal) as info:
        absorb(design)
    assert info.value.columns == ["level"]
    assert info.value.context() == {"columns": ["level"]}


def test_explicit_weights_override_design(design):
    rng = np.random.default_rng(9)
    weights = [np.diag(rng.uniform(0.5, 2.0, n)) for n in design.sizes]
    fit = fit_wls(absorb(design, weights=weights))
    beta, _, _ = oracles.direct_fit(design, linalg.block_diag(*weights))
    assert_allclose(fit.beta, beta, rtol=1e-10, atol=1e-12)


def test_refit_reuses_projections(design):
    fit = fit_wls(absorb(design))
    rng = np.random.default_rng(2)
    y_new = [rng.standard_normal(n) for n in design.sizes]
    again = refit(fit, y_new)
    fresh = fit_wls(absorb(design.with_outcome(y_new)))
    assert_allclose(again.beta, fresh.beta, rtol=1e-12, atol=1e-12)
    assert_allclose(again.stacked_residuals(), fresh.stacked_residuals(), atol=1e-12)
    with pytest.raises(InvalidInput):
        refit(fit, y_new[:-1])


def test_true_variance_matches_direct_formula(design):
    fit = fit_wls(absorb(design))
    sigma = [0.5 * np.eye(n) + 0.5 for n in design.sizes]
    _, _, _, _, W = oracles.stacked(design)
    Rdd = oracles.absorbed_covariates(design)
    M = np.linalg.inv(Rdd.T @ W @ Rdd)
    expected = M @ Rdd.T @ W @ linalg.block_diag(*sigma) @ W @ Rdd @ M
    assert_allclose(true_variance(fit, sigma), expected, rtol=1e-10, atol=1e-14)
