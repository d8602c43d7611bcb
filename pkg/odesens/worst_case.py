"""Sensitivity-based worst-case bounds for the state and for a QoI.

State bound: maximize 1/2 int delta x^T Q delta x over controls |delta| <= eps,
where delta x' = A delta x + B delta, delta x(t0) = 0. Controls are piecewise
constant on the grid intervals; one RK4 step per interval gives the discrete
transition x_{j+1} = M_j x_j + N_j delta_j, and trapezoid weights turn the
integral into x^T Q^ x. Condensing the states away leaves the box QP
max 1/2 delta^T H delta with H = S^T Q^ S, a convex maximization that is
solved locally (projected ascent, sign-vertex polishing, restarts), or
exactly by vertex enumeration when the dimension is tiny.

QoI bound: the linear program max int w^T delta subject to the same box is
solved in closed form by delta = sign(w) eps.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from odesens.errors import DimensionError, ValidationError
from odesens.models import ComponentModel, LinearizedSystem, QoiModel
from odesens.ode_core import (
    TimeGrid,
    Trajectory,
    linear_step_inputs,
    linear_step_maps,
    quadrature,
    trapezoid_weights,
)
from odesens.sensitivity import AdjointResult, Weight, adjoint_weight, weight_samples

# Dimensions up to this size are solved by enumerating all sign vertices.
ENUMERATION_LIMIT = 16

# Dense H is materialized up to this many stacked controls.
DEFAULT_DENSE_LIMIT = 4096

# Number of columns of H computed per sweep while building it densely.
_BUILD_BUDGET = 1 << 22

_POWER_ITERATIONS = 60


@dataclass(frozen=True)
class QpOptions:
    """Settings of `maximize_box_qp`."""

    restarts: int = 8
    max_iters: int = 500
    tol: float = 1e-10
    seed: int = 42
    dense_limit: int = DEFAULT_DENSE_LIMIT
    enumeration_limit: int = ENUMERATION_LIMIT


@dataclass
class CondensedBoxQP:
    """max 1/2 delta^T H delta subject to |delta_j| <= b_j.

    Controls are stacked interval-major: entry j * n_g + c is component c on
    interval [t_j, t_{j+1}). `maps` (intervals, n_x, n_x) and `inputs`
    (intervals, n_x, n_g) define S; `qhat` (nodes, n_x, n_x) holds the
    quadrature-weighted Q(t_i). `h` is None in operator mode.
    """

    grid: TimeGrid
    maps: np.ndarray
    inputs: np.ndarray
    qhat: np.ndarray
    bounds: np.ndarray
    h: np.ndarray | None = None

    @property
    def n_x(self) -> int:
        return int(self.maps.shape[1])

    @property
    def n_g(self) -> int:
        return int(self.inputs.shape[2])

    @property
    def intervals(self) -> int:
        return int(self.maps.shape[0])

    @property
    def dim(self) -> int:
        return self.intervals * self.n_g

    @property
    def dense(self) -> bool:
        return self.h is not None

    def states(self, delta: np.ndarray) -> np.ndarray:
        """S delta: per-node states (nodes, n_x) driven by the controls."""
        controls = np.asarray(delta, dtype=float).reshape(self.intervals, self.n_g)
        pushed = np.einsum("jic,jc->ji", self.inputs, controls)
        x = np.zeros((self.grid.size, self.n_x))
        for j in range(self.intervals):
            x[j + 1] = self.maps[j] @ x[j] + pushed[j]
        return x

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """S^T y for per-node co-states y (nodes, n_x); stacked controls out."""
        p = np.array(y[-1], dtype=float)
        grad = np.empty((self.intervals, self.n_g))
        for j in range(self.intervals - 1, -1, -1):
            grad[j] = self.inputs[j].T @ p
            if j > 0:
                p = y[j] + self.maps[j].T @ p
        return grad.reshape(-1)

    def apply(self, delta: np.ndarray) -> np.ndarray:
        """H delta."""
        if self.h is not None:
            return self.h @ delta
        x = self.states(delta)
        return self.adjoint(np.einsum("kij,kj->ki", self.qhat, x))

    def objective(self, delta: np.ndarray) -> float:
        return 0.5 * float(delta @ self.apply(delta))

    def feasible(self, delta: np.ndarray, slack: float = 1e-12) -> bool:
        return bool(np.all(np.abs(delta) <= self.bounds * (1.0 + slack) + slack))

    def materialize(self) -> np.ndarray:
        """Dense H = S^T Q^ S, built column block by column block."""
        n, n_g, dim = self.n_x, self.n_g, self.dim
        h = np.empty((dim, dim))
        chunk = max(1, min(dim, _BUILD_BUDGET // max(1, self.grid.size * n)))
        for start in range(0, dim, chunk):
            cols = np.arange(start, min(dim, start + chunk))
            owner, comp = np.divmod(cols, n_g)
            x = np.zeros((self.grid.size, n, cols.size))
            for j in range(self.intervals):
                x[j + 1] = self.maps[j] @ x[j]
                hit = owner == j
                if np.any(hit):
                    x[j + 1][:, hit] += self.inputs[j][:, comp[hit]]
            y = self.qhat @ x
            p = y[-1].copy()
            block = np.empty((self.intervals, n_g, cols.size))
            for j in range(self.intervals - 1, -1, -1):
                block[j] = self.inputs[j].T @ p
                if j > 0:
                    p = y[j] + self.maps[j].T @ p
            h[:, cols] = block.reshape(dim, cols.size)
        return 0.5 * (h + h.T)


def _eps_samples(grid: TimeGrid, eps_along: np.ndarray, n_g: int) -> np.ndarray:
    eps = np.asarray(eps_along, dtype=float)
    if eps.ndim == 1:
        eps = eps[:, None]
    if eps.shape != (grid.size, n_g):
        expected = (grid.size, n_g)
        raise DimensionError(f"envelope samples have shape {eps.shape}, expected {expected}")
    if np.any(eps < 0) or not np.all(np.isfinite(eps)):
        raise ValidationError("envelope samples must be finite and nonnegative")
    return eps


def build_state_bound_qp(
    lin: LinearizedSystem,
    eps_along: np.ndarray,
    weight: Weight = None,
    dense_limit: int = DEFAULT_DENSE_LIMIT,
) -> CondensedBoxQP:
    """Condense the state worst-case problem on the grid of `lin`.

    Interval bounds take the envelope value at the left node.

    Raises:
        ValidationError: for a nonsymmetric Q or a negative envelope
    """
    grid = lin.grid
    eps = _eps_samples(grid, eps_along, lin.n_g)
    q_vals = weight_samples(grid, weight, lin.n_x)
    maps = linear_step_maps(lin.a)
    inputs = linear_step_inputs(lin.a, lin.b.values, lin.b.midvalues)
    qhat = trapezoid_weights(grid)[:, None, None] * q_vals
    qp = CondensedBoxQP(grid, maps, inputs, qhat, eps[:-1].reshape(-1).copy())
    if qp.dim <= dense_limit:
        qp.h = qp.materialize()
    return qp


@dataclass
class QpResult:
    """Outcome of `maximize_box_qp`; `history` is the best value per start."""

    delta: np.ndarray
    value: float
    method: str
    converged: bool = True
    starts: int = 0
    iterations: int = 0
    history: list[float] = field(default_factory=list)


def _enumerate_vertices(qp: CondensedBoxQP, apply: Callable[[np.ndarray], np.ndarray]) -> QpResult:
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=qp.dim)))
    vertices = signs * qp.bounds
    if qp.h is not None:
        values = 0.5 * np.einsum("vi,ij,vj->v", vertices, qp.h, vertices)
    else:
        values = np.array([0.5 * float(v @ apply(v)) for v in vertices])
    best = int(np.argmax(values))
    value = float(values[best])
    count = len(vertices)
    return QpResult(vertices[best], value, "enumeration", True, count, count, [value])


def _power_iteration(
    apply: Callable[[np.ndarray], np.ndarray], dim: int, rng: np.random.Generator
) -> tuple[float, np.ndarray]:
    """Largest eigenvalue and eigenvector estimate of a PSD operator."""
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(_POWER_ITERATIONS):
        hv = apply(v)
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            return 0.0, v
        lam, v = float(v @ hv), hv / norm
    return lam, v


def _polish(
    delta: np.ndarray,
    bounds: np.ndarray,
    apply: Callable[[np.ndarray], np.ndarray],
    opts: QpOptions,
) -> tuple[np.ndarray, int, bool]:
    """Sign-vertex fixed-point iteration delta_j = b_j sign((H delta)_j)."""
    for it in range(1, opts.max_iters + 1):
        grad = apply(delta)
        scale = opts.tol * max(1.0, float(np.max(np.abs(grad))))
        nxt = np.where(grad > scale, bounds, np.where(grad < -scale, -bounds, delta))
        if np.array_equal(nxt, delta):
            return delta, it, True
        delta = nxt
    return delta, opts.max_iters, False


def _ascend(
    delta: np.ndarray,
    bounds: np.ndarray,
    apply: Callable[[np.ndarray], np.ndarray],
    step: float,
    opts: QpOptions,
) -> tuple[np.ndarray, int]:
    """Projected gradient ascent to a stationary point."""
    for it in range(1, opts.max_iters + 1):
        nxt = np.clip(delta + step * apply(delta), -bounds, bounds)
        if np.linalg.norm(nxt - delta) <= opts.tol * max(1.0, float(np.linalg.norm(delta))):
            return nxt, it
        delta = nxt
    return delta, opts.max_iters


def maximize_box_qp(
    qp: CondensedBoxQP,
    opts: QpOptions | None = None,
    starts: list[np.ndarray] | None = None,
) -> QpResult:
    """Local maximization of 1/2 delta^T H delta over the box.

    Starts from the all-upper vertex, the sign pattern of the leading
    eigenvector, any caller-supplied `starts` and `opts.restarts` random sign
    vertices. Each start is ascended and then polished to a vertex; the best
    value is kept. Deterministic for a fixed seed. Never raises on slow
    convergence; `converged` reports it instead.
    """
    opts = opts or QpOptions()
    bounds = qp.bounds
    apply = qp.apply
    if not np.any(bounds > 0):
        return QpResult(np.zeros(qp.dim), 0.0, "trivial", True, 0, 0, [0.0])
    if qp.dim <= opts.enumeration_limit:
        return _enumerate_vertices(qp, apply)

    rng = np.random.default_rng(opts.seed)
    norm, lead = _power_iteration(apply, qp.dim, rng)
    if norm <= 0.0:
        return QpResult(bounds.copy(), 0.0, "zero-hessian", True, 1, 0, [0.0])
    step = 1.0 / norm

    candidates = [bounds.copy(), np.where(lead < 0, -bounds, bounds)]
    for s in starts or []:
        candidates.append(np.clip(np.asarray(s, dtype=float).reshape(-1), -bounds, bounds))
    candidates += [rng.choice((-1.0, 1.0), size=qp.dim) * bounds for _ in range(opts.restarts)]

    best = QpResult(np.zeros(qp.dim), -np.inf, "dense" if qp.dense else "operator")
    for start in candidates:
        ascended, a_iters = _ascend(start, bounds, apply, step, opts)
        polished, p_iters, fixed = _polish(ascended, bounds, apply, opts)
        value = 0.5 * float(polished @ apply(polished))
        best.iterations += a_iters + p_iters
        best.converged = best.converged and fixed
        best.starts += 1
        best.history.append(value)
        if value > best.value:
            best.delta, best.value = polished, value
    return best


@dataclass
class BoundReport:
    """A bound value with the control achieving it and solver diagnostics.

    `certificate` is (intervals, n_g) for the state bound and (nodes, n_g)
    for the QoI bound. `delta_x` holds the states driven by the certificate.
    """

    kind: str
    value: float
    certificate: np.ndarray
    delta_x: Trajectory | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)


def _upsample_vertex(delta: np.ndarray, fine: CondensedBoxQP) -> np.ndarray:
    """Split every interval control in two and push it onto the fine box."""
    coarse = delta.reshape(-1, fine.n_g)
    signs = np.where(np.repeat(coarse, 2, axis=0) < 0, -1.0, 1.0).reshape(-1)
    return signs * fine.bounds


def _refine_inputs(
    lin: LinearizedSystem, eps_along: np.ndarray
) -> tuple[LinearizedSystem, np.ndarray]:
    fine_grid = lin.grid.refined()
    eps = np.asarray(eps_along, dtype=float).reshape(lin.grid.size, -1)
    fine_eps = np.stack(
        [np.interp(fine_grid.nodes, lin.grid.nodes, col) for col in eps.T], axis=1
    )
    return lin.resample(fine_grid), fine_eps


def state_error_bound(
    lin: LinearizedSystem,
    eps_along: np.ndarray,
    weight: Weight = None,
    opts: QpOptions | None = None,
    refinement_check: bool = False,
) -> BoundReport:
    """Worst-case L2_Q norm of the first-order state error.

    The value is sqrt(2 * QP value). With `refinement_check`, the problem is
    rebuilt on the twice-refined grid, the certificate is upsampled and
    polished there, and the relative change is reported as
    `refinement_delta`.
    """
    opts = opts or QpOptions()
    qp = build_state_bound_qp(lin, eps_along, weight, opts.dense_limit)
    result = maximize_box_qp(qp, opts)
    value = float(np.sqrt(max(2.0 * result.value, 0.0)))
    states = qp.states(result.delta)
    diagnostics: dict[str, Any] = {
        "method": result.method,
        "dimension": qp.dim,
        "starts": result.starts,
        "iterations": result.iterations,
        "converged": result.converged,
        "objective_history": result.history,
    }
    if refinement_check:
        fine_lin, fine_eps = _refine_inputs(lin, eps_along)
        fine = build_state_bound_qp(fine_lin, fine_eps, weight, dense_limit=0)
        start = _upsample_vertex(result.delta, fine)
        polished, _, _ = _polish(start, fine.bounds, fine.apply, opts)
        fine_value = float(np.sqrt(max(2.0 * fine.objective(polished), 0.0)))
        diagnostics["refined_value"] = fine_value
        diagnostics["refinement_delta"] = abs(fine_value - value) / value if value > 0 else 0.0
    return BoundReport(
        kind="state-L2Q",
        value=value,
        certificate=result.delta.reshape(qp.intervals, qp.n_g),
        delta_x=Trajectory(qp.grid, states),
        diagnostics=diagnostics,
    )


def qoi_bound_from_weight(grid: TimeGrid, w: np.ndarray, eps_along: np.ndarray) -> BoundReport:
    """Closed-form LP bound int sum_i |w_i| eps_i with delta = sign(w) eps.

    Zero weight components take +eps.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    eps = _eps_samples(grid, eps_along, w.shape[1])
    if w.shape != eps.shape:
        raise DimensionError(f"weight has shape {w.shape}, envelope {eps.shape}")
    integrand = np.sum(np.abs(w) * eps, axis=1)
    return BoundReport(
        kind="qoi",
        value=quadrature(grid, integrand),
        certificate=np.where(w < 0, -eps, eps),
        diagnostics={"weight_sup": float(np.max(np.abs(w)))},
    )


def qoi_error_bound(  # noqa: PLR0913  # mirrors the adjoint identity's inputs
    adj: AdjointResult,
    lin: LinearizedSystem,
    q: QoiModel,
    traj: Trajectory,
    g: ComponentModel,
    eps_along: np.ndarray,
) -> BoundReport:
    """Worst-case first-order QoI error over the envelope box."""
    return qoi_bound_from_weight(traj.grid, adjoint_weight(adj, lin, q, traj, g), eps_along)
