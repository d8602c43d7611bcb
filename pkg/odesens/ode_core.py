"""Time grids, trajectories and the integrators everything else is built on.

The module provides:

  - `TimeGrid`, `Trajectory`, `MatrixSignal`: immutable containers for a
    time grid, sampled states with dense output, and sampled matrix signals
    such as A(t) and B(t).
  - `integrate_ivp`: nonlinear initial-value solves, either fixed-step
    classical RK4 on a user grid or adaptive Dormand-Prince 5(4) through
    `scipy.integrate.solve_ivp`.
  - `solve_linear_forward` / `solve_linear_backward`: linear forced solves
    v' = A(t)v + f(t) and -l' = A(t)^T l + f(t), one RK4 step per grid
    interval with A(t) linear between nodes.
  - `linear_dual_density`: the discrete transpose of the forward linear solve,
    so adjoint and forward derivatives agree to round-off.
  - `quadrature` / `cumulative_quadrature`: composite trapezoid rule.
  - `interpolate`: cubic Hermite dense output from stored (state, derivative)
    pairs.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import cumulative_trapezoid, solve_ivp, trapezoid
from scipy.interpolate import CubicHermiteSpline

from odesens.errors import DimensionError, IntegrationError, RangeError, StiffnessError

# Defaults of the adaptive integrator.
DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10

# Relative slack when checking that an interpolation time lies in [t0, tf].
_RANGE_SLACK = 1e-12

# Minimum number of nodes of a grid.
MIN_NODES = 2

Rhs = Callable[[float, np.ndarray], np.ndarray]
# A forcing is either a callable of time or per-node samples (node, dim).
Forcing = Callable[[float], np.ndarray] | np.ndarray


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time nodes covering [t0, tf]."""

    nodes: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.array(self.nodes, dtype=float).reshape(-1)
        if nodes.size < MIN_NODES:
            raise DimensionError(f"a time grid needs at least {MIN_NODES} nodes, got {nodes.size}")
        if not np.all(np.isfinite(nodes)):
            raise DimensionError("time grid nodes must be finite")
        if np.any(np.diff(nodes) <= 0):
            raise DimensionError("time grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, t0: float, tf: float, n_nodes: int) -> TimeGrid:
        """Uniform grid with `n_nodes` nodes from t0 to tf inclusive."""
        if n_nodes < MIN_NODES:
            raise DimensionError(f"a time grid needs at least {MIN_NODES} nodes, got {n_nodes}")
        return cls(np.linspace(t0, tf, n_nodes))

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def tf(self) -> float:
        return float(self.nodes[-1])

    @property
    def size(self) -> int:
        return int(self.nodes.size)

    @property
    def steps(self) -> np.ndarray:
        """Interval lengths, one per grid interval."""
        return np.diff(self.nodes)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[:-1] + self.nodes[1:])

    def reversed(self) -> TimeGrid:
        """The grid reflected about the interval midpoint: s = t0 + tf - t."""
        return TimeGrid(self.t0 + self.tf - self.nodes[::-1])

    def refined(self) -> TimeGrid:
        """Grid with every interval split in half."""
        merged = np.empty(2 * self.size - 1)
        merged[0::2] = self.nodes
        merged[1::2] = self.midpoints
        return TimeGrid(merged)

    def same_as(self, other: TimeGrid) -> bool:
        return self.size == other.size and bool(np.array_equal(self.nodes, other.nodes))


@dataclass(frozen=True)
class AdaptiveSpec:
    """Request for adaptive integration over [t0, tf].

    When `output_nodes` is set the solution is reported on that many uniform
    nodes; otherwise on the accepted integrator steps.
    """

    t0: float
    tf: float
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    output_nodes: int | None = None

    def __post_init__(self) -> None:
        if not self.tf > self.t0:
            raise DimensionError(f"need t0 < tf, got [{self.t0}, {self.tf}]")
        if self.rtol <= 0 or self.atol <= 0:
            raise DimensionError("rtol and atol must be positive")


GridSpec = TimeGrid | AdaptiveSpec


@dataclass(frozen=True)
class Trajectory:
    """States sampled on a grid, with optional derivative samples.

    `states` has shape (nodes, n); `derivs`, when present, the same shape.
    """

    grid: TimeGrid
    states: np.ndarray
    derivs: np.ndarray | None = None

    def __post_init__(self) -> None:
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.ndim != 2 or states.shape[0] != self.grid.size:  # noqa: PLR2004
            raise DimensionError(
                f"states must have one row per node ({self.grid.size}), got shape {states.shape}"
            )
        states.setflags(write=False)
        object.__setattr__(self, "states", states)
        if self.derivs is not None:
            derivs = np.array(self.derivs, dtype=float).reshape(states.shape)
            derivs.setflags(write=False)
            object.__setattr__(self, "derivs", derivs)

    @property
    def n(self) -> int:
        """State dimension."""
        return int(self.states.shape[1])

    @property
    def initial(self) -> np.ndarray:
        return np.array(self.states[0])

    @property
    def final(self) -> np.ndarray:
        return np.array(self.states[-1])

    @cached_property
    def _spline(self) -> CubicHermiteSpline:
        derivs = self.derivs
        if derivs is None:
            derivs = np.gradient(self.states, self.grid.nodes, axis=0, edge_order=2)
        return CubicHermiteSpline(self.grid.nodes, self.states, derivs, axis=0)

    def resample(self, grid: TimeGrid) -> Trajectory:
        """This trajectory evaluated on another grid inside [t0, tf]."""
        _check_in_range(self.grid, grid.t0)
        _check_in_range(self.grid, grid.tf)
        states = self._spline(grid.nodes)
        derivs = self._spline.derivative()(grid.nodes)
        return Trajectory(grid, states, derivs)


@dataclass(frozen=True)
class MatrixSignal:
    """Matrices of fixed shape (r, c) sampled per grid node.

    Between nodes the signal is linear in time.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim != 3 or values.shape[0] != self.grid.size:  # noqa: PLR2004
            raise DimensionError(
                f"matrix signal needs shape (nodes={self.grid.size}, r, c), got {values.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: TimeGrid, matrix: np.ndarray) -> MatrixSignal:
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(grid, np.broadcast_to(m, (grid.size, *m.shape)).copy())

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.values.shape[1]), int(self.values.shape[2])

    @property
    def midvalues(self) -> np.ndarray:
        """Values at interval midpoints under the linear-in-time rule."""
        return 0.5 * (self.values[:-1] + self.values[1:])

    def transposed(self) -> MatrixSignal:
        return MatrixSignal(self.grid, np.transpose(self.values, (0, 2, 1)))

    def reversed(self) -> MatrixSignal:
        """Signal on the reflected grid: value at s = t0 + tf - t."""
        return MatrixSignal(self.grid.reversed(), self.values[::-1])

    def resample(self, grid: TimeGrid) -> MatrixSignal:
        """Linear interpolation onto another grid inside [t0, tf]."""
        _check_in_range(self.grid, grid.t0)
        _check_in_range(self.grid, grid.tf)
        flat = self.values.reshape(self.grid.size, -1)
        cols = [np.interp(grid.nodes, self.grid.nodes, col) for col in flat.T]
        return MatrixSignal(grid, np.stack(cols, axis=1).reshape(grid.size, *self.shape))


def _check_in_range(grid: TimeGrid, t: float) -> None:
    slack = _RANGE_SLACK * (grid.tf - grid.t0)
    if not (grid.t0 - slack <= t <= grid.tf + slack):
        raise RangeError(f"t = {t!r} outside [{grid.t0!r}, {grid.tf!r}]")


def _finite_or_raise(value: np.ndarray, t: float) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise IntegrationError("non-finite right-hand side", time=t)
    return value


def integrate_ivp(rhs: Rhs, x0: np.ndarray, grid_spec: GridSpec) -> Trajectory:
    """Solve x' = rhs(t, x), x(t0) = x0.

    A `TimeGrid` selects fixed-step classical RK4 on exactly those nodes; an
    `AdaptiveSpec` selects Dormand-Prince 5(4) (`solve_ivp` method RK45) with
    the local error per step bounded by atol + rtol*|x|.

    Raises:
        DimensionError: if rhs output does not match the dimension of x0
        IntegrationError: if rhs returns a non-finite value
        StiffnessError: if the adaptive step size underflows
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    t_start = grid_spec.t0
    probe = np.atleast_1d(np.asarray(rhs(t_start, x0), dtype=float))
    if probe.shape != x0.shape:
        raise DimensionError(f"rhs returns shape {probe.shape} for a state of shape {x0.shape}")
    _finite_or_raise(probe, t_start)

    if isinstance(grid_spec, TimeGrid):
        return _integrate_rk4(rhs, x0, grid_spec)
    return _integrate_adaptive(rhs, x0, grid_spec)


def _integrate_rk4(rhs: Rhs, x0: np.ndarray, grid: TimeGrid) -> Trajectory:
    def f(t: float, x: np.ndarray) -> np.ndarray:
        return _finite_or_raise(np.asarray(rhs(t, x), dtype=float), t)

    nodes = grid.nodes
    states = np.empty((grid.size, x0.size))
    derivs = np.empty_like(states)
    states[0] = x0
    for i, h in enumerate(grid.steps):
        t, x = nodes[i], states[i]
        k1 = f(t, x)
        k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = f(t + h, x + h * k3)
        derivs[i] = k1
        states[i + 1] = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    derivs[-1] = f(nodes[-1], states[-1])
    return Trajectory(grid, states, derivs)


def _integrate_adaptive(rhs: Rhs, x0: np.ndarray, spec: AdaptiveSpec) -> Trajectory:
    def f(t: float, x: np.ndarray) -> np.ndarray:
        return _finite_or_raise(np.asarray(rhs(t, x), dtype=float), t)

    t_eval = None
    if spec.output_nodes is not None:
        t_eval = TimeGrid.uniform(spec.t0, spec.tf, spec.output_nodes).nodes
    sol = solve_ivp(
        f,
        (spec.t0, spec.tf),
        x0,
        method="RK45",
        t_eval=t_eval,
        rtol=spec.rtol,
        atol=spec.atol,
    )
    if sol.status != 0:
        t_fail = float(sol.t[-1]) if sol.t.size else spec.t0
        if "step size" in str(sol.message).lower():
            raise StiffnessError(f"step size underflow: {sol.message}", time=t_fail)
        raise IntegrationError(f"integration failed: {sol.message}", time=t_fail)

    grid = TimeGrid(sol.t)
    states = sol.y.T
    derivs = np.array([f(t, x) for t, x in zip(grid.nodes, states, strict=True)])
    return Trajectory(grid, states, derivs)


def _forcing_samples(forcing: Forcing, grid: TimeGrid, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Forcing values at the nodes and at the interval midpoints.

    Sampled forcings are linear between nodes, like matrix signals.
    """
    if callable(forcing):
        at_nodes = np.array([np.atleast_1d(forcing(t)) for t in grid.nodes], dtype=float)
        at_mid = np.array([np.atleast_1d(forcing(t)) for t in grid.midpoints], dtype=float)
    else:
        at_nodes = np.asarray(forcing, dtype=float)
        if at_nodes.ndim == 1:
            at_nodes = at_nodes[:, None]
        if at_nodes.shape[0] != grid.size:
            raise DimensionError(
                f"forcing has {at_nodes.shape[0]} samples for a grid of {grid.size} nodes"
            )
        at_mid = 0.5 * (at_nodes[:-1] + at_nodes[1:])
    if at_nodes.shape[1] != dim:
        raise DimensionError(f"forcing has dimension {at_nodes.shape[1]}, expected {dim}")
    return at_nodes, at_mid


def linear_step_maps(a_sig: MatrixSignal) -> np.ndarray:
    """Per-interval RK4 transition matrices of v' = A(t)v.

    Returns an array (intervals, n, n) whose j-th entry maps v(t_j) to
    v(t_{j+1}) under one classical RK4 step with A linear in time.
    """
    n = a_sig.shape[0]
    h = a_sig.grid.steps[:, None, None]
    a0, am, a1 = a_sig.values[:-1], a_sig.midvalues, a_sig.values[1:]
    eye = np.broadcast_to(np.eye(n), a0.shape)
    k1 = a0
    k2 = am @ (eye + 0.5 * h * k1)
    k3 = am @ (eye + 0.5 * h * k2)
    k4 = a1 @ (eye + h * k3)
    return eye + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def linear_step_inputs(
    a_sig: MatrixSignal, f_nodes: np.ndarray, f_mid: np.ndarray
) -> np.ndarray:
    """Per-interval RK4 increments due to forcing, starting from v = 0.

    `f_nodes` is (nodes, n, k) and `f_mid` is (intervals, n, k); the result
    is (intervals, n, k). With k columns of a control basis this yields the
    input matrices of the discrete system.
    """
    return _step_inputs(a_sig, f_nodes[:-1], f_mid, f_nodes[1:])


def _step_inputs(
    a_sig: MatrixSignal, f_left: np.ndarray, f_mid: np.ndarray, f_right: np.ndarray
) -> np.ndarray:
    h = a_sig.grid.steps[:, None, None]
    am, a1 = a_sig.midvalues, a_sig.values[1:]
    k1 = f_left
    k2 = am @ (0.5 * h * k1) + f_mid
    k3 = am @ (0.5 * h * k2) + f_mid
    k4 = a1 @ (h * k3) + f_right
    return (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def linear_step_input_pair(a_sig: MatrixSignal) -> tuple[np.ndarray, np.ndarray]:
    """Split the RK4 increment of a sampled forcing into its two node terms.

    For a forcing F linear between nodes, the increment over interval j is
    left[j] @ F(t_j) + right[j] @ F(t_{j+1}). Both arrays are (intervals, n, n).
    """
    n = a_sig.shape[0]
    intervals = a_sig.grid.size - 1
    eye = np.broadcast_to(np.eye(n), (intervals, n, n))
    zero = np.zeros((intervals, n, n))
    left = _step_inputs(a_sig, eye, 0.5 * eye, zero)
    right = _step_inputs(a_sig, zero, 0.5 * eye, eye)
    return left, right


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    """Per-node weights of the composite trapezoid rule on `grid`."""
    half = 0.5 * grid.steps
    weights = np.zeros(grid.size)
    weights[:-1] += half
    weights[1:] += half
    return weights


def linear_dual_density(
    a_sig: MatrixSignal, cost: np.ndarray, terminal: np.ndarray
) -> np.ndarray:
    """Exact transpose of `solve_linear_forward` under trapezoid quadrature.

    For v = solve_linear_forward(a_sig, F, 0) with F sampled at the nodes,
    terminal^T v(tf) + quadrature(cost^T v) equals quadrature(D^T F), where
    D (nodes, n) is the returned density. D approximates the solution of
    -l' = A^T l + cost, l(tf) = terminal, to second order in the interior.

    Raises:
        DimensionError: if cost or terminal do not match A(t)
    """
    grid = a_sig.grid
    n = a_sig.shape[0]
    cost = np.asarray(cost, dtype=float)
    if cost.ndim == 1:
        cost = cost[:, None]
    terminal = np.atleast_1d(np.asarray(terminal, dtype=float))
    if cost.shape != (grid.size, n) or terminal.shape != (n,):
        raise DimensionError(
            f"dual data {cost.shape} / {terminal.shape} does not match A(t) of size {n}"
        )
    weights = trapezoid_weights(grid)
    maps = linear_step_maps(a_sig)
    left, right = linear_step_input_pair(a_sig)

    # mu[k] is the gradient of the functional with respect to v(t_k).
    mu = np.zeros((grid.size, n))
    mu[-1] = terminal + weights[-1] * cost[-1]
    for k in range(grid.size - 2, 0, -1):
        mu[k] = weights[k] * cost[k] + maps[k].T @ mu[k + 1]

    grad = np.zeros((grid.size, n))
    grad[:-1] += np.einsum("kji,kj->ki", left, mu[1:])
    grad[1:] += np.einsum("kji,kj->ki", right, mu[1:])
    return grad / weights[:, None]


def solve_linear_forward(a_sig: MatrixSignal, forcing: Forcing, v0: np.ndarray) -> Trajectory:
    """Solve v' = A(t)v + forcing(t), v(t0) = v0 on the grid of `a_sig`.

    One classical RK4 step per grid interval; A(t) and sampled forcings are
    linear between nodes.

    Raises:
        DimensionError: on shape mismatch between A, forcing and v0
    """
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    rows, cols = a_sig.shape
    if rows != cols or v0.shape != (rows,):
        raise DimensionError(f"A(t) has shape {a_sig.shape} but v0 has shape {v0.shape}")
    grid = a_sig.grid
    f_nodes, f_mid = _forcing_samples(forcing, grid, rows)

    maps = linear_step_maps(a_sig)
    incr = linear_step_inputs(a_sig, f_nodes[:, :, None], f_mid[:, :, None])[:, :, 0]
    states = np.empty((grid.size, rows))
    states[0] = v0
    for j in range(grid.size - 1):
        states[j + 1] = maps[j] @ states[j] + incr[j]
    derivs = np.einsum("kij,kj->ki", a_sig.values, states) + f_nodes
    return Trajectory(grid, states, derivs)


def solve_linear_backward(a_sig: MatrixSignal, forcing: Forcing, v_f: np.ndarray) -> Trajectory:
    """Solve -l' = A(t)^T l + forcing(t), l(tf) = v_f on the grid of `a_sig`.

    Implemented as `solve_linear_forward` in reversed time s = t0 + tf - t,
    where the equation reads dl/ds = A^T l + forcing.
    """
    grid = a_sig.grid
    rev_a = a_sig.transposed().reversed()
    if callable(forcing):
        f = forcing
        t_sum = grid.t0 + grid.tf

        def rev_forcing(s: float) -> np.ndarray:
            return np.atleast_1d(f(t_sum - s))

        rev = solve_linear_forward(rev_a, rev_forcing, v_f)
    else:
        rev = solve_linear_forward(rev_a, np.asarray(forcing, dtype=float)[::-1], v_f)
    derivs = None if rev.derivs is None else -rev.derivs[::-1]
    return Trajectory(grid, rev.states[::-1], derivs)


def _node_samples(grid: TimeGrid, samples: np.ndarray) -> np.ndarray:
    values = np.asarray(samples, dtype=float)
    if values.shape[:1] != (grid.size,):
        count = values.shape[0] if values.ndim else 0
        raise DimensionError(f"{count} samples for {grid.size} nodes")
    return values


def quadrature(grid: TimeGrid, samples: np.ndarray) -> float:
    """Composite trapezoid value of the integral of per-node samples.

    Raises:
        DimensionError: if there is not exactly one sample per node
    """
    values = _node_samples(grid, samples)
    return float(trapezoid(values, grid.nodes, axis=0))


def cumulative_quadrature(grid: TimeGrid, samples: np.ndarray) -> np.ndarray:
    """Running trapezoid integral from t0 to every node (starts at 0)."""
    values = _node_samples(grid, samples)
    return cumulative_trapezoid(values, grid.nodes, axis=0, initial=0.0)


def interpolate(traj: Trajectory, t: float) -> np.ndarray:
    """Cubic Hermite dense output of `traj` at time t; exact at nodes.

    Without stored derivatives, second-order finite-difference slopes are
    used in their place.

    Raises:
        RangeError: if t lies outside [t0, tf]
    """
    _check_in_range(traj.grid, t)
    nodes = traj.grid.nodes
    i = int(np.searchsorted(nodes, t))
    if i < nodes.size and nodes[i] == t:
        return np.array(traj.states[i])
    t_clamped = min(max(t, traj.grid.t0), traj.grid.tf)
    return np.asarray(traj._spline(t_clamped), dtype=float)
