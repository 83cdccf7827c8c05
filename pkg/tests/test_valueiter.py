"""Tests for the grid solver: interpolation, backups, convergence, level sets."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invariantkit import (
    PerturbationGrid,
    Polynomial,
    Region,
    SwitchedSystem,
    ValueField,
    ViConfig,
    bellman_backup,
    build_grid,
    dp_residual,
    extract_zero_set,
    interpolate,
    solve_value_iteration,
)
from invariantkit.valueiter import GridBudgetError, StateGrid
from invariantkit.systems import state_margin_many

P = Polynomial


def example1():
    f1 = P(3, {(1, 0, 0): 0.4, (0, 1, 0): 0.6})
    f2 = P(3, {(1, 0, 1): 1.0, (0, 1, 0): 0.9})
    return SwitchedSystem(
        state_dim=2,
        pert_dim=1,
        x0_constraints=(P(2, {(2, 0): 1.0, (0, 2): 1.0, (0, 0): -1.0}),),
        regions=(Region(((P(2, {(0, 0): -1.0}), "<="),)),),
        dynamics=((f1, f2),),
        pert_constraints=(P(1, {(2,): 1.0, (0,): -0.01}),),
        pert_box=np.array([[-0.1, 0.1]]),
        name="example1",
    )


def small_cfg(sysm, alpha=0.5, eps=1e-12, pts=3, **kw):
    return ViConfig(
        alpha=alpha, epsilon=eps, pgrid=PerturbationGrid.uniform(sysm, pts), **kw
    )


def test_grid_shape_and_spacing():
    grid = build_grid([[-1.0, 1.0], [0.0, 4.0]], [5, 9])
    assert grid.num_nodes == 45
    np.testing.assert_allclose(grid.spacing, [0.5, 0.5])
    nodes = grid.nodes()
    assert nodes.shape == (45, 2)
    np.testing.assert_allclose(nodes[0], [-1.0, 0.0])
    np.testing.assert_allclose(nodes[-1], [1.0, 4.0])


def test_grid_budget_refusal():
    with pytest.raises(GridBudgetError) as err:
        build_grid([[-1.0, 1.0]] * 7, 20)
    assert "budget" in str(err.value)


def test_grid_rejects_degenerate_box():
    with pytest.raises(ValueError):
        build_grid([[1.0, 1.0]], 5)
    with pytest.raises(ValueError):
        build_grid([[0.0, 1.0]], 1)


def test_interpolate_exact_at_nodes():
    grid = build_grid([[-1.0, 1.0], [-1.0, 1.0]], 5)
    rng = np.random.default_rng(3)
    vals = rng.uniform(size=tuple(grid.resolution))
    fld = ValueField(grid=grid, values=vals)
    nodes = grid.nodes()
    np.testing.assert_allclose(interpolate(fld, nodes), vals.ravel(), atol=1e-14)


def test_interpolate_linear_function_reproduced():
    # multilinear interpolation is exact on affine functions
    grid = build_grid([[-1.0, 1.0], [0.0, 2.0]], 4)
    nodes = grid.nodes()
    vals = 2.0 * nodes[:, 0] - 0.5 * nodes[:, 1] + 1.0
    fld = ValueField(grid=grid, values=vals)
    rng = np.random.default_rng(7)
    pts = rng.uniform([-1.0, 0.0], [1.0, 2.0], size=(50, 2))
    np.testing.assert_allclose(
        interpolate(fld, pts), 2.0 * pts[:, 0] - 0.5 * pts[:, 1] + 1.0, atol=1e-12
    )


def test_interpolate_outside_returns_one():
    grid = build_grid([[-1.0, 1.0], [-1.0, 1.0]], 3)
    fld = ValueField.zeros(grid)
    assert interpolate(fld, [2.0, 0.0]) == 1.0
    assert interpolate(fld, [0.0, -1.5]) == 1.0
    assert interpolate(fld, [0.0, 0.0]) == 0.0


def test_vi_config_validation():
    sysm = example1()
    pgrid = PerturbationGrid.uniform(sysm, 2)
    with pytest.raises(ValueError):
        ViConfig(alpha=1.0, epsilon=1e-6, pgrid=pgrid)
    with pytest.raises(ValueError):
        ViConfig(alpha=0.0, epsilon=1e-6, pgrid=pgrid)
    with pytest.raises(ValueError):
        ViConfig(alpha=0.5, epsilon=0.0, pgrid=pgrid)


def test_backup_is_monotone():
    # the backup operator preserves pointwise ordering of fields
    sysm = example1()
    grid = build_grid([[-1.1, 1.1], [-1.1, 1.1]], 11)
    cfg = small_cfg(sysm)
    rng = np.random.default_rng(0)
    base = rng.uniform(-1.0, 1.0, size=tuple(grid.resolution))
    lo = ValueField(grid=grid, values=base)
    hi = ValueField(grid=grid, values=base + rng.uniform(0.0, 0.5, base.shape))
    out_lo = bellman_backup(sysm, lo, cfg)
    out_hi = bellman_backup(sysm, hi, cfg)
    assert np.all(out_lo.values <= out_hi.values + 1e-12)


def test_backup_contraction_rate():
    # |T(V) - T(W)| <= alpha |V - W| in the sup norm
    sysm = example1()
    grid = build_grid([[-1.1, 1.1], [-1.1, 1.1]], 11)
    cfg = small_cfg(sysm, alpha=0.3)
    rng = np.random.default_rng(1)
    v = ValueField(grid=grid, values=rng.uniform(-1, 1, tuple(grid.resolution)))
    w = ValueField(grid=grid, values=rng.uniform(-1, 1, tuple(grid.resolution)))
    tv = bellman_backup(sysm, v, cfg)
    tw = bellman_backup(sysm, w, cfg)
    lhs = np.max(np.abs(tv.values - tw.values))
    rhs = 0.3 * np.max(np.abs(v.values - w.values))
    assert lhs <= rhs + 1e-12


def test_backup_lower_bounded_by_margin():
    sysm = example1()
    grid = build_grid([[-1.1, 1.1], [-1.1, 1.1]], 11)
    cfg = small_cfg(sysm)
    fld = ValueField.zeros(grid)
    out = bellman_backup(sysm, fld, cfg)
    margins = state_margin_many(sysm, grid.nodes()).reshape(out.values.shape)
    assert np.all(out.values >= margins - 1e-15)


def test_solve_converges_and_residual_small():
    sysm = example1()
    grid = build_grid([[-1.1, 1.1], [-1.1, 1.1]], 31)
    cfg = small_cfg(sysm, alpha=0.01, eps=1e-15, pts=5)
    result = solve_value_iteration(sysm, grid, cfg)
    assert result.converged
    assert result.iterations <= 12
    # geometric decay of deltas at rate alpha
    for a, b in zip(result.deltas, result.deltas[1:]):
        assert b <= 0.01 * a + 1e-12
    assert dp_residual(sysm, result.field, cfg) <= 1e-12
    assert np.min(result.field.values) >= -1e-12


def test_solve_respects_max_iters():
    sysm = example1()
    grid = build_grid([[-1.1, 1.1], [-1.1, 1.1]], 21)
    cfg = small_cfg(sysm, alpha=0.9, eps=1e-16, max_iters=2)
    result = solve_value_iteration(sysm, grid, cfg)
    assert not result.converged
    assert result.iterations == 2


def test_zero_set_mask_and_contours():
    # V = x^2 + y^2 - 0.25 has the circle of radius 0.5 as its zero level
    grid = build_grid([[-1.0, 1.0], [-1.0, 1.0]], 41)
    nodes = grid.nodes()
    vals = nodes[:, 0] ** 2 + nodes[:, 1] ** 2 - 0.25
    fld = ValueField(grid=grid, values=vals)
    zero = extract_zero_set(fld, 0.0)
    inside = zero.mask.ravel()
    assert inside[np.argmin(np.abs(nodes).sum(axis=1))]  # origin in the set
    assert zero.contours
    pts = np.vstack(zero.contours)
    radii = np.hypot(pts[:, 0], pts[:, 1])
    np.testing.assert_allclose(radii, 0.5, atol=0.01)


def test_zero_set_rejects_negative_tol():
    grid = build_grid([[-1.0, 1.0], [-1.0, 1.0]], 3)
    with pytest.raises(ValueError):
        extract_zero_set(ValueField.zeros(grid), -1e-3)


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_interpolation_between_node_values(seed):
    # interpolated values never leave the hull of the corner values
    grid = build_grid([[-1.0, 1.0], [-1.0, 1.0]], 4)
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-5, 5, size=tuple(grid.resolution))
    fld = ValueField(grid=grid, values=vals)
    pts = rng.uniform(-1, 1, size=(20, 2))
    out = interpolate(fld, pts)
    assert np.all(out >= vals.min() - 1e-12)
    assert np.all(out <= vals.max() + 1e-12)
