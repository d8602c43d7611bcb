"""Forward sensitivities, adjoints and QoI derivatives along a nominal solve.

Perturbation directions delta g are consumed as samples along the nominal
trajectory, shape (nodes, n_g), never as functions of x. Every integral uses
the trapezoid rule of `odesens.ode_core`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from odesens.errors import DimensionError, ValidationError
from odesens.models import ComponentModel, DynamicsModel, LinearizedSystem, QoiModel
from odesens.ode_core import (
    MatrixSignal,
    TimeGrid,
    Trajectory,
    linear_dual_density,
    quadrature,
    solve_linear_backward,
    solve_linear_forward,
)

# Relative tolerance of the symmetry check on weight matrices.
_SYMMETRY_RTOL = 1e-10

Weight = MatrixSignal | np.ndarray | None


@dataclass(frozen=True)
class SensitivityResult:
    """delta x = x_g(g) delta g; starts at exactly zero."""

    delta_x: Trajectory
    source_direction: str = "delta g samples"


@dataclass(frozen=True)
class AdjointResult:
    """Adjoint lambda of one QoI; ends at exactly grad phi(x(tf)).

    `density` holds the per-node multipliers of the discrete adjoint of the
    sensitivity recursion. They agree with `lam` to discretization order and
    make the adjoint and forward QoI derivatives equal to round-off.
    """

    lam: Trajectory
    density: np.ndarray | None = None


def _samples_on(grid: TimeGrid, samples: np.ndarray, width: int, what: str) -> np.ndarray:
    values = np.asarray(samples, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape != (grid.size, width):
        raise DimensionError(f"{what} has shape {values.shape}, expected {(grid.size, width)}")
    return values


def _require_same_grid(lin: LinearizedSystem, traj: Trajectory) -> None:
    if not lin.grid.same_as(traj.grid):
        raise DimensionError("linearization and trajectory are sampled on different grids")


def solve_sensitivity(
    lin: LinearizedSystem, dg_along: np.ndarray, source_direction: str = "delta g samples"
) -> SensitivityResult:
    """Solve delta x' = A delta x + B delta g, delta x(t0) = 0."""
    dg = _samples_on(lin.grid, dg_along, lin.n_g, "delta g")
    forcing = np.einsum("kij,kj->ki", lin.b.values, dg)
    delta = solve_linear_forward(lin.a, forcing, np.zeros(lin.n_x))
    return SensitivityResult(delta, source_direction)


def _running_samples(
    q: QoiModel, traj: Trajectory, g: ComponentModel
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-node l, grad_x l, grad_g l and g_x along `traj`."""
    size = traj.grid.size
    l_vals = np.zeros(size)
    l_x = np.zeros((size, q.n_x))
    l_g = np.zeros((size, q.n_g))
    g_x = np.zeros((size, g.n_g, g.n_x))
    for i, (t, x) in enumerate(zip(traj.grid.nodes, traj.states, strict=True)):
        gv = g.g(t, x)
        g_x[i] = g.g_x(t, x)
        if q.has_running:
            l_vals[i] = q.l(t, x, gv)
            l_x[i] = q.l_x(t, x, gv)
            l_g[i] = q.l_g(t, x, gv)
    return l_vals, l_x, l_g, g_x


def evaluate_qoi(q: QoiModel, traj: Trajectory, g: ComponentModel) -> float:
    """phi(x(tf)) plus the trapezoid integral of l(t, x, g(t, x))."""
    value = q.phi(traj.final)
    if q.has_running:
        l_vals = np.array(
            [q.l(t, x, g.g(t, x)) for t, x in zip(traj.grid.nodes, traj.states, strict=True)]
        )
        value += quadrature(traj.grid, l_vals)
    return value


def solve_adjoint(
    lin: LinearizedSystem, q: QoiModel, traj: Trajectory, g: ComponentModel
) -> AdjointResult:
    """Backward solve -lambda' = A^T lambda + grad_x l + g_x^T grad_g l."""
    _require_same_grid(lin, traj)
    _, l_x, l_g, g_x = _running_samples(q, traj, g)
    forcing = l_x + np.einsum("kji,kj->ki", g_x, l_g)
    terminal = q.grad_phi(traj.final)
    lam = solve_linear_backward(lin.a, forcing, terminal)
    return AdjointResult(lam, linear_dual_density(lin.a, forcing, terminal))


def adjoint_weight(
    adj: AdjointResult, lin: LinearizedSystem, q: QoiModel, traj: Trajectory, g: ComponentModel
) -> np.ndarray:
    """w(t_i) = B(t_i)^T lambda(t_i) + grad_g l, shape (nodes, n_g).

    Uses the discrete multipliers when the adjoint carries them.
    """
    _require_same_grid(lin, traj)
    if not adj.lam.grid.same_as(traj.grid):
        raise DimensionError("adjoint and trajectory are sampled on different grids")
    _, _, l_g, _ = _running_samples(q, traj, g)
    lam = adj.lam.states if adj.density is None else adj.density
    return np.einsum("kij,ki->kj", lin.b.values, lam) + l_g


def qoi_directional_derivative(  # noqa: PLR0913  # mirrors the adjoint identity's inputs
    adj: AdjointResult,
    lin: LinearizedSystem,
    q: QoiModel,
    traj: Trajectory,
    g: ComponentModel,
    dg_along: np.ndarray,
) -> float:
    """Adjoint route: integral of w^T delta g with w = B^T lambda + grad_g l."""
    w = adjoint_weight(adj, lin, q, traj, g)
    dg = _samples_on(traj.grid, dg_along, lin.n_g, "delta g")
    return quadrature(traj.grid, np.sum(w * dg, axis=1))


def qoi_sensitivity_derivative(  # noqa: PLR0913
    sens: SensitivityResult,
    q: QoiModel,
    traj: Trajectory,
    g: ComponentModel,
    dg_along: np.ndarray,
) -> float:
    """Forward route of the same derivative, from a sensitivity solve.

    grad phi^T delta x(tf) + integral of (grad_x l + g_x^T grad_g l)^T delta x
    + grad_g l^T delta g. Equal to `qoi_directional_derivative` up to
    round-off when the adjoint carries its discrete multipliers.
    """
    delta = sens.delta_x
    if not delta.grid.same_as(traj.grid):
        raise DimensionError("sensitivity and trajectory are sampled on different grids")
    dg = _samples_on(traj.grid, dg_along, q.n_g, "delta g")
    _, l_x, l_g, g_x = _running_samples(q, traj, g)
    dx_weight = l_x + np.einsum("kji,kj->ki", g_x, l_g)
    integrand = np.sum(dx_weight * delta.states, axis=1) + np.sum(l_g * dg, axis=1)
    return float(q.grad_phi(traj.final) @ delta.final) + quadrature(traj.grid, integrand)


def weight_samples(grid: TimeGrid, weight: Weight, n: int) -> np.ndarray:
    """Per-node weight matrices (nodes, n, n); None means the identity.

    Raises:
        ValidationError: if any weight matrix is not symmetric
    """
    if weight is None:
        values = np.broadcast_to(np.eye(n), (grid.size, n, n))
    elif isinstance(weight, MatrixSignal):
        if not weight.grid.same_as(grid):
            weight = weight.resample(grid)
        values = weight.values
    else:
        matrix = np.atleast_2d(np.asarray(weight, dtype=float))
        values = np.broadcast_to(matrix, (grid.size, *matrix.shape))
    if values.shape[1:] != (n, n):
        raise DimensionError(f"weight has shape {values.shape[1:]}, expected {(n, n)}")
    scale = max(1.0, float(np.max(np.abs(values))))
    if not np.allclose(values, np.swapaxes(values, 1, 2), rtol=0.0, atol=_SYMMETRY_RTOL * scale):
        raise ValidationError("weight matrix Q(t) must be symmetric at every node")
    return values


def pointwise_norms(states: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sqrt(v_i^T Q_i v_i) per node, clipped at zero against round-off."""
    quad = np.einsum("ki,kij,kj->k", states, weights, states)
    return np.sqrt(np.maximum(quad, 0.0))


def state_error_norm(delta: Trajectory, weight: Weight = None) -> float:
    """L2_Q seminorm: sqrt of the integral of delta^T Q delta."""
    weights = weight_samples(delta.grid, weight, delta.n)
    quad = np.einsum("ki,kij,kj->k", delta.states, weights, delta.states)
    return float(np.sqrt(max(quadrature(delta.grid, quad), 0.0)))


def residual_psi(
    traj: Trajectory, f: DynamicsModel, g: ComponentModel, x0: np.ndarray
) -> tuple[float, float]:
    """Residuals of (F(x, g) - x', x(t0) - x0) for a computed trajectory.

    The first entry is the sup over nodes of |x'(t_i) - f(t_i, x_i, g)|
    using the stored derivative samples; without them, slopes of the
    sampled states stand in.
    """
    derivs = traj.derivs
    if derivs is None:
        derivs = np.gradient(traj.states, traj.grid.nodes, axis=0, edge_order=2)
    model = np.array(
        [f.f(t, x, g.g(t, x)) for t, x in zip(traj.grid.nodes, traj.states, strict=True)]
    )
    dyn = float(np.max(np.linalg.norm(derivs - model, axis=1)))
    init = float(np.linalg.norm(traj.initial - np.atleast_1d(np.asarray(x0, dtype=float))))
    return dyn, init
