# tests/test_sensitivity.py
"""Tests for odesens.sensitivity: forward sensitivities, adjoints and norms."""

import math
from collections.abc import Callable

import numpy as np
import pytest

from odesens.errors import DimensionError, ValidationError
from odesens.models import ComponentModel, DynamicsModel, QoiModel, closed_loop_rhs, linearize
from odesens.ode_core import AdaptiveSpec, MatrixSignal, TimeGrid, Trajectory, integrate_ivp
from odesens.problems import HYPERSONIC_TF, Problem, build_hypersonic, build_zermelo
from odesens.sensitivity import (
    adjoint_weight,
    evaluate_qoi,
    qoi_directional_derivative,
    qoi_sensitivity_derivative,
    residual_psi,
    solve_adjoint,
    solve_sensitivity,
    state_error_norm,
    weight_samples,
)

GRID = TimeGrid.uniform(0.0, 1.0, 1001)
HYPERSONIC_FINE_NODES = 20001


def _constant_component(value: float = 1.0) -> ComponentModel:
    return ComponentModel(1, 1, lambda t, x: np.array([value]), lambda t, x: np.zeros((1, 1)))


def _scalar_dynamics(a: float, b: float) -> DynamicsModel:
    """f(t, x, g) = a x + b g."""
    return DynamicsModel(
        1,
        1,
        lambda t, x, g: a * x + b * g,
        lambda t, x, g: np.array([[a]]),
        lambda t, x, g: np.array([[b]]),
    )


def _terminal_qoi() -> QoiModel:
    return QoiModel(1, 1, terminal=lambda x: float(x[0]), terminal_grad=lambda x: np.ones(1))


def _nominal(
    f: DynamicsModel, g: ComponentModel, x0: np.ndarray, grid: TimeGrid = GRID
) -> Trajectory:
    return integrate_ivp(closed_loop_rhs(f, g), x0, grid)


def _deviation(problem: Problem, traj: Trajectory) -> np.ndarray:
    """g_eps - g_star sampled along a trajectory."""
    pairs = zip(traj.grid.nodes, traj.states, strict=True)
    return np.array([problem.g_eps.g(t, x) - problem.g_star.g(t, x) for t, x in pairs])


def test_sensitivity_of_pure_integrator_is_time() -> None:
    """x' = g with delta g = 1 gives delta x(t) = t and delta x(0) = 0 exactly."""
    f, g = _scalar_dynamics(0.0, 1.0), _constant_component()
    traj = _nominal(f, g, np.zeros(1))
    sens = solve_sensitivity(linearize(f, g, traj), np.ones(GRID.size))
    assert sens.delta_x.initial[0] == 0.0
    np.testing.assert_allclose(sens.delta_x.states[:, 0], GRID.nodes, atol=1e-13)


def test_sensitivity_rejects_wrong_sample_count() -> None:
    """delta g samples must match the grid."""
    f, g = _scalar_dynamics(0.0, 1.0), _constant_component()
    lin = linearize(f, g, _nominal(f, g, np.zeros(1)))
    with pytest.raises(DimensionError, match="delta g"):
        solve_sensitivity(lin, np.ones(10))


def test_adjoint_of_exponential_growth() -> None:
    """x' = x with q = x(1): lambda(t) = e^{1 - t}, so lambda(0) = e."""
    f, g = _scalar_dynamics(1.0, 0.0), _constant_component()
    traj = _nominal(f, g, np.ones(1))
    adj = solve_adjoint(linearize(f, g, traj), _terminal_qoi(), traj, g)
    assert adj.lam.final[0] == 1.0
    assert adj.lam.initial[0] == pytest.approx(math.e, abs=1e-6)


def test_adjoint_weight_of_integrator_is_one() -> None:
    """x' = g, q = x(1): w = B^T lambda = 1 everywhere."""
    f, g = _scalar_dynamics(0.0, 1.0), _constant_component()
    traj = _nominal(f, g, np.zeros(1))
    lin = linearize(f, g, traj)
    q = _terminal_qoi()
    w = adjoint_weight(solve_adjoint(lin, q, traj, g), lin, q, traj, g)
    np.testing.assert_allclose(w[:, 0], 1.0, atol=1e-14)


def test_state_error_norm_of_linear_ramp() -> None:
    """delta x = t on [0, 1] with Q = I has L2 norm sqrt(1/3)."""
    delta = Trajectory(GRID, GRID.nodes)
    assert state_error_norm(delta) == pytest.approx(math.sqrt(1.0 / 3.0), rel=1e-6)
    weighted = state_error_norm(delta, np.array([[4.0]]))
    assert weighted == pytest.approx(2.0 * math.sqrt(1.0 / 3.0), rel=1e-6)


def test_asymmetric_weight_is_rejected() -> None:
    """Q(t) must be symmetric at every node."""
    delta = Trajectory(GRID, np.zeros((GRID.size, 2)))
    with pytest.raises(ValidationError, match="symmetric"):
        state_error_norm(delta, np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_weight_samples_default_and_resampled_signal() -> None:
    """None is the identity; a signal on another grid is resampled."""
    np.testing.assert_array_equal(weight_samples(GRID, None, 2)[5], np.eye(2))
    coarse = TimeGrid.uniform(0.0, 1.0, 3)
    signal = MatrixSignal(coarse, np.stack([k * np.eye(2) for k in (1.0, 2.0, 3.0)]))
    values = weight_samples(GRID, signal, 2)
    assert values.shape == (GRID.size, 2, 2)
    np.testing.assert_allclose(values[500], 2.0 * np.eye(2))


def test_adjoint_and_forward_routes_agree_on_zermelo() -> None:
    """The adjoint identity and the forward sensitivity give the same dq."""
    problem = build_zermelo(0.1)
    traj = _nominal(problem.f, problem.g_star, problem.x0)
    lin = linearize(problem.f, problem.g_star, traj)
    dg = _deviation(problem, traj)
    adj = solve_adjoint(lin, problem.q, traj, problem.g_star)
    via_adjoint = qoi_directional_derivative(adj, lin, problem.q, traj, problem.g_star, dg)
    sens = solve_sensitivity(lin, dg)
    via_forward = qoi_sensitivity_derivative(sens, problem.q, traj, problem.g_star, dg)
    assert via_adjoint == pytest.approx(via_forward, rel=1e-6)


@pytest.mark.integration
def test_adjoint_and_forward_routes_agree_on_hypersonic() -> None:
    """Downrange derivative along x_eps with g_eps, on the adaptive output grid."""
    problem = build_hypersonic(1e-2)
    spec = AdaptiveSpec(*problem.interval, output_nodes=problem.grid_nodes)
    traj = integrate_ivp(closed_loop_rhs(problem.f, problem.g_eps), problem.x0, spec)
    lin = linearize(problem.f, problem.g_eps, traj)
    dg = _deviation(problem, traj)
    adj = solve_adjoint(lin, problem.q, traj, problem.g_eps)
    via_adjoint = qoi_directional_derivative(adj, lin, problem.q, traj, problem.g_eps, dg)
    sens = solve_sensitivity(lin, dg)
    via_forward = qoi_sensitivity_derivative(sens, problem.q, traj, problem.g_eps, dg)
    assert via_adjoint == pytest.approx(via_forward, rel=1e-6)
    np.testing.assert_array_equal(adj.lam.final, [1.0, 0.0, 0.0, 0.0])


def test_adjoint_density_close_to_continuous_adjoint() -> None:
    """The discrete multipliers and the backward solve describe the same lambda."""
    f, g = _scalar_dynamics(-0.5, 1.0), _constant_component()
    traj = _nominal(f, g, np.ones(1))
    adj = solve_adjoint(linearize(f, g, traj), _terminal_qoi(), traj, g)
    assert adj.density is not None
    np.testing.assert_allclose(adj.density[1:-1], adj.lam.states[1:-1], rtol=1e-5)


@pytest.mark.integration
def test_directional_derivative_matches_finite_difference() -> None:
    """For small epsilon, q(g_eps) - q(g_star) is close to the first-order estimate."""
    problem = build_zermelo(1e-3)
    x_star = _nominal(problem.f, problem.g_star, problem.x0)
    x_eps = _nominal(problem.f, problem.g_eps, problem.x0)
    lin = linearize(problem.f, problem.g_star, x_star)
    dg = _deviation(problem, x_star)
    adj = solve_adjoint(lin, problem.q, x_star, problem.g_star)
    estimate = qoi_directional_derivative(adj, lin, problem.q, x_star, problem.g_star, dg)
    q_eps = evaluate_qoi(problem.q, x_eps, problem.g_eps)
    actual = q_eps - evaluate_qoi(problem.q, x_star, problem.g_star)
    assert estimate == pytest.approx(actual, rel=5e-2)


def _remainder_slope(
    build: Callable[[float], Problem], grid: TimeGrid, epsilons: np.ndarray
) -> float:
    """Log-log slope of ||x_eps - x_star - delta x||_L2 against epsilon."""
    base = build(0.0)
    x_star = _nominal(base.f, base.g_star, base.x0, grid)
    lin = linearize(base.f, base.g_star, x_star)
    remainders = []
    for eps in epsilons:
        problem = build(float(eps))
        x_eps = _nominal(problem.f, problem.g_eps, problem.x0, grid)
        delta = solve_sensitivity(lin, _deviation(problem, x_star)).delta_x
        gap = x_eps.states - x_star.states - delta.states
        remainders.append(state_error_norm(Trajectory(grid, gap)))
    return float(np.polyfit(np.log(epsilons), np.log(remainders), 1)[0])


@pytest.mark.integration
def test_sensitivity_remainder_is_quadratic_in_epsilon() -> None:
    """The Zermelo linearization error shrinks like epsilon^2 down to 1e-4."""
    epsilons = np.array([1e-1, 1e-2, 1e-3, 1e-4])
    assert _remainder_slope(build_zermelo, GRID, epsilons) >= 1.8


@pytest.mark.integration
def test_hypersonic_remainder_is_quadratic_in_epsilon() -> None:
    """Same on the reentry problem; a fine fixed RK4 grid keeps solver noise out of the fit."""
    grid = TimeGrid.uniform(0.0, HYPERSONIC_TF, HYPERSONIC_FINE_NODES)
    epsilons = np.array([1e-2, 1e-3, 1e-4])
    assert _remainder_slope(build_hypersonic, grid, epsilons) >= 1.8


def test_evaluate_qoi_terminal_only() -> None:
    """A terminal QoI reads the final state."""
    f, g = _scalar_dynamics(0.0, 1.0), _constant_component(2.0)
    traj = _nominal(f, g, np.zeros(1))
    assert evaluate_qoi(_terminal_qoi(), traj, g) == pytest.approx(2.0, abs=1e-12)


def test_residual_psi_vanishes_for_computed_solution() -> None:
    """A solve with its stored derivatives has zero residual; a wrong x0 shows up."""
    f, g = _scalar_dynamics(-1.0, 1.0), _constant_component()
    traj = _nominal(f, g, np.ones(1))
    dyn, init = residual_psi(traj, f, g, np.ones(1))
    assert dyn == pytest.approx(0.0, abs=1e-12)
    assert init == 0.0
    _, shifted = residual_psi(traj, f, g, np.array([1.5]))
    assert shifted == pytest.approx(0.5)
