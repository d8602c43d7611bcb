# tests/test_ode_core.py
"""Tests for odesens.ode_core: grids, integrators, linear solves and quadrature."""

import math

import numpy as np
import pytest

from odesens.errors import DimensionError, IntegrationError, RangeError
from odesens.ode_core import (
    AdaptiveSpec,
    MatrixSignal,
    TimeGrid,
    Trajectory,
    cumulative_quadrature,
    integrate_ivp,
    interpolate,
    linear_dual_density,
    linear_step_maps,
    quadrature,
    solve_linear_backward,
    solve_linear_forward,
    trapezoid_weights,
)

# Classical RK4 is fourth order; halving h must shrink the error by at least 2^(4 - 0.5).
RK4_MIN_RATIO = 2 ** 3.5
E = math.e


def _exp_rhs(t: float, x: np.ndarray) -> np.ndarray:
    return x


def test_time_grid_rejects_non_increasing_nodes() -> None:
    """Repeated or decreasing nodes are a dimension error."""
    with pytest.raises(DimensionError, match="strictly increasing"):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(DimensionError, match="at least 2"):
        TimeGrid.uniform(0.0, 1.0, 1)


def test_refined_grid_splits_every_interval() -> None:
    """Refinement inserts the midpoints and keeps the original nodes."""
    grid = TimeGrid.uniform(0.0, 1.0, 5)
    fine = grid.refined()
    assert fine.size == 9
    np.testing.assert_array_equal(fine.nodes[0::2], grid.nodes)
    np.testing.assert_allclose(fine.nodes[1::2], grid.midpoints)


def test_rk4_exponential_growth_matches_e() -> None:
    """x' = x, x(0) = 1 on 1001 nodes reaches e at t = 1."""
    traj = integrate_ivp(_exp_rhs, np.array([1.0]), TimeGrid.uniform(0.0, 1.0, 1001))
    assert traj.final[0] == pytest.approx(E, abs=1e-10)
    assert traj.initial[0] == 1.0


def test_rk4_converges_at_fourth_order() -> None:
    """Halving the step reduces the final error by about 16."""
    errors = []
    for n in (11, 21, 41):
        traj = integrate_ivp(_exp_rhs, np.array([1.0]), TimeGrid.uniform(0.0, 1.0, n))
        errors.append(abs(traj.final[0] - E))
    assert errors[0] / errors[1] >= RK4_MIN_RATIO
    assert errors[1] / errors[2] >= RK4_MIN_RATIO


def test_adaptive_decay_within_tolerance() -> None:
    """Dormand-Prince at rtol 1e-10 reproduces exp(-t) on the requested output nodes."""
    spec = AdaptiveSpec(0.0, 2.0, rtol=1e-10, atol=1e-12, output_nodes=201)
    traj = integrate_ivp(lambda t, x: -x, np.array([1.0]), spec)
    assert traj.grid.size == 201
    np.testing.assert_allclose(traj.states[:, 0], np.exp(-traj.grid.nodes), rtol=1e-8)


def test_adaptive_blow_up_raises_integration_error() -> None:
    """x' = x^2 from x(0) = 1 blows up at t = 1; the failure carries a time."""
    spec = AdaptiveSpec(0.0, 2.0)
    with pytest.raises(IntegrationError) as excinfo:
        integrate_ivp(lambda t, x: x**2, np.array([1.0]), spec)
    assert excinfo.value.time is not None
    assert excinfo.value.time <= 1.0 + 1e-6


def test_non_finite_rhs_raises_with_time() -> None:
    """A NaN from the right-hand side is reported with the time it appeared."""

    def rhs(t: float, x: np.ndarray) -> np.ndarray:
        return np.array([np.nan]) if t > 0.5 else x

    with pytest.raises(IntegrationError, match="non-finite") as excinfo:
        integrate_ivp(rhs, np.array([1.0]), TimeGrid.uniform(0.0, 1.0, 11))
    assert excinfo.value.time > 0.5


def test_rhs_shape_mismatch_raises() -> None:
    """A right-hand side returning the wrong length is rejected up front."""
    with pytest.raises(DimensionError, match="rhs returns shape"):
        integrate_ivp(lambda t, x: np.zeros(3), np.zeros(2), TimeGrid.uniform(0.0, 1.0, 3))


def test_forward_linear_pure_integration() -> None:
    """A = 0, forcing 1 gives v(t) = t."""
    grid = TimeGrid.uniform(0.0, 1.0, 101)
    a = MatrixSignal.constant(grid, np.zeros((1, 1)))
    traj = solve_linear_forward(a, np.ones(grid.size), np.zeros(1))
    np.testing.assert_allclose(traj.states[:, 0], grid.nodes, atol=1e-14)


def test_forward_linear_constant_growth() -> None:
    """v' = 2v from 1 reaches e^2 at t = 1."""
    grid = TimeGrid.uniform(0.0, 1.0, 1001)
    a = MatrixSignal.constant(grid, np.array([[2.0]]))
    traj = solve_linear_forward(a, lambda t: np.zeros(1), np.ones(1))
    assert traj.final[0] == pytest.approx(math.exp(2.0), rel=1e-10)


def test_backward_linear_closed_form() -> None:
    """-l' = a l, l(1) = 1 gives l(t) = e^{a(1 - t)}; a = 1 yields e at t = 0."""
    grid = TimeGrid.uniform(0.0, 1.0, 1001)
    a = MatrixSignal.constant(grid, np.array([[1.0]]))
    lam = solve_linear_backward(a, np.zeros(grid.size), np.ones(1))
    assert lam.final[0] == 1.0
    assert lam.initial[0] == pytest.approx(E, abs=1e-6)


def test_backward_solve_is_forward_solve_in_reversed_time() -> None:
    """The backward solve equals the forward solve on the reflected grid with A^T."""
    rng = np.random.default_rng(3)
    grid = TimeGrid(np.sort(np.concatenate(([0.0, 2.0], rng.uniform(0.0, 2.0, 30)))))
    a = MatrixSignal(grid, rng.normal(size=(grid.size, 3, 3)))
    forcing = rng.normal(size=(grid.size, 3))
    v_f = rng.normal(size=3)
    lam = solve_linear_backward(a, forcing, v_f)
    rev = solve_linear_forward(a.transposed().reversed(), forcing[::-1], v_f)
    np.testing.assert_allclose(lam.states, rev.states[::-1], rtol=0.0, atol=1e-12)
    np.testing.assert_array_equal(lam.final, v_f)


def test_step_maps_compose_like_forward_solve() -> None:
    """Chaining the per-interval maps reproduces the homogeneous forward solve."""
    grid = TimeGrid.uniform(0.0, 1.0, 21)
    a = MatrixSignal(grid, np.stack([np.array([[0.0, 1.0], [-1.0, -t]]) for t in grid.nodes]))
    maps = linear_step_maps(a)
    v = np.array([1.0, 0.0])
    for m in maps:
        v = m @ v
    traj = solve_linear_forward(a, np.zeros((grid.size, 2)), np.array([1.0, 0.0]))
    np.testing.assert_allclose(v, traj.final, atol=1e-14)


def test_dual_density_is_exact_transpose_of_forward_solve() -> None:
    """terminal^T v(tf) + int cost^T v equals int D^T F for any sampled forcing F."""
    rng = np.random.default_rng(11)
    grid = TimeGrid(np.sort(np.concatenate(([0.0, 1.5], rng.uniform(0.0, 1.5, 40)))))
    a = MatrixSignal(grid, rng.normal(size=(grid.size, 3, 3)))
    cost = rng.normal(size=(grid.size, 3))
    terminal = rng.normal(size=3)
    density = linear_dual_density(a, cost, terminal)
    for _ in range(3):
        forcing = rng.normal(size=(grid.size, 3))
        v = solve_linear_forward(a, forcing, np.zeros(3))
        primal = terminal @ v.final + quadrature(grid, np.sum(cost * v.states, axis=1))
        dual = quadrature(grid, np.sum(density * forcing, axis=1))
        assert dual == pytest.approx(primal, rel=1e-10, abs=1e-12)


def test_dual_density_tracks_continuous_adjoint() -> None:
    """For l' = -l, l(1) = 1 the density follows e^{1 - t} away from the ends."""
    grid = TimeGrid.uniform(0.0, 1.0, 201)
    a = MatrixSignal.constant(grid, np.array([[1.0]]))
    density = linear_dual_density(a, np.zeros(grid.size), np.ones(1))
    np.testing.assert_allclose(density[1:-1, 0], np.exp(1.0 - grid.nodes[1:-1]), rtol=1e-4)


def test_trapezoid_weights_sum_to_interval_length() -> None:
    grid = TimeGrid(np.array([0.0, 0.1, 0.4, 1.0]))
    weights = trapezoid_weights(grid)
    np.testing.assert_allclose(weights, [0.05, 0.2, 0.45, 0.3])
    assert weights.sum() == pytest.approx(1.0)


def test_forward_linear_shape_mismatch() -> None:
    """A 2x2 system with a 3-vector initial state is rejected."""
    grid = TimeGrid.uniform(0.0, 1.0, 5)
    with pytest.raises(DimensionError):
        solve_linear_forward(MatrixSignal.constant(grid, np.eye(2)), np.zeros((5, 2)), np.zeros(3))


def test_quadrature_square() -> None:
    """The trapezoid integral of t^2 over [0, 1] approaches 1/3."""
    grid = TimeGrid.uniform(0.0, 1.0, 2001)
    assert quadrature(grid, grid.nodes**2) == pytest.approx(1.0 / 3.0, abs=1e-7)
    with pytest.raises(DimensionError):
        quadrature(grid, np.zeros(10))


def test_cumulative_quadrature_starts_at_zero() -> None:
    """The running integral of 1 is t."""
    grid = TimeGrid.uniform(0.0, 3.0, 31)
    running = cumulative_quadrature(grid, np.ones(grid.size))
    assert running[0] == 0.0
    np.testing.assert_allclose(running, grid.nodes, atol=1e-14)


def test_interpolate_exact_at_nodes_and_accurate_between() -> None:
    """Hermite dense output returns stored states at nodes and sin(t) between them."""
    grid = TimeGrid.uniform(0.0, math.pi, 101)
    traj = Trajectory(grid, np.sin(grid.nodes), np.cos(grid.nodes))
    assert interpolate(traj, grid.nodes[17])[0] == traj.states[17, 0]
    assert interpolate(traj, 1.2345)[0] == pytest.approx(math.sin(1.2345), abs=1e-8)


def test_interpolate_outside_interval_raises() -> None:
    """Times outside [t0, tf] are a range error."""
    grid = TimeGrid.uniform(0.0, 1.0, 11)
    traj = Trajectory(grid, grid.nodes)
    with pytest.raises(RangeError):
        interpolate(traj, 1.5)
