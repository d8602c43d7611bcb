"""Logarithmic Lipschitz constants and the Gronwall-type envelope E(t).

The local logarithmic Lipschitz constant is approximated by the logarithmic
norm of A(t) = f_x + f_g g_x in the Q-weighted inner product. The O(|x - y|)
remainder of that approximation is ignored.

E(t) = L * integral_0^t eps(s) exp(Phi(t) - Phi(s)) ds, Phi(t) = int_0^t L~,
is accumulated in log space so that the exponential growth typical of these
bounds saturates at a cap instead of overflowing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from odesens.errors import DefinitenessError, DimensionError, ValidationError
from odesens.models import ComponentModel, DynamicsModel, linearize
from odesens.ode_core import TimeGrid, Trajectory, cumulative_quadrature

# Values of E above the cap are clamped and flagged.
DEFAULT_CAP = 1e10

_SYMMETRY_ATOL = 1e-12


def _cholesky_factor(q: np.ndarray) -> np.ndarray:
    """Lower-triangular C with Q = C C^T."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if q.shape[0] != q.shape[1]:
        raise DimensionError(f"weight matrix must be square, got {q.shape}")
    if not np.allclose(q, q.T, rtol=0.0, atol=_SYMMETRY_ATOL * max(1.0, float(np.max(np.abs(q))))):
        raise DefinitenessError("weight matrix is not symmetric")
    try:
        return cholesky(q, lower=True)
    except np.linalg.LinAlgError as e:
        raise DefinitenessError(f"weight matrix is not positive definite: {e}") from e


def _log_norms(a: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of sym(C^T A C^-T) for a stack of matrices A."""
    # C^-T as the solution of C^T X = I.
    c_inv_t = solve_triangular(c, np.eye(c.shape[0]), lower=True, trans="T")
    m = c.T @ a @ c_inv_t
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    return np.linalg.eigvalsh(sym)[..., -1]


def log_norm(a: np.ndarray, q: np.ndarray | None = None) -> float:
    """Logarithmic norm of A in the inner product <x, y>_Q = x^T Q y.

    Raises:
        DefinitenessError: if Q is not symmetric positive definite
        DimensionError: if A and Q disagree in size
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[0]
    c = _cholesky_factor(np.eye(n) if q is None else q)
    if a.shape != (n, n) or c.shape != (n, n):
        raise DimensionError(f"A has shape {a.shape}, Q has shape {c.shape}")
    return float(_log_norms(a, c))


@dataclass(frozen=True)
class LogLipschitzSignal:
    """Per-node approximations of the local logarithmic Lipschitz constant."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size != self.grid.size:
            raise DimensionError(f"{values.size} values for a grid of {self.grid.size} nodes")
        if not np.all(np.isfinite(values)):
            raise ValidationError("logarithmic Lipschitz signal must be finite at every node")
        object.__setattr__(self, "values", values)


def log_lipschitz_along(
    f: DynamicsModel, g: ComponentModel, traj: Trajectory, q: np.ndarray | None = None
) -> LogLipschitzSignal:
    """log_norm(A(t_i), Q) at every node of `traj`, with A from `linearize`."""
    lin = linearize(f, g, traj)
    c = _cholesky_factor(np.eye(lin.n_x) if q is None else q)
    if c.shape[0] != lin.n_x:
        raise DimensionError(f"Q has size {c.shape[0]}, state dimension is {lin.n_x}")
    return LogLipschitzSignal(traj.grid, _log_norms(lin.a.values, c))


def scalar_envelope(eps_along: np.ndarray) -> np.ndarray:
    """Euclidean norm of the componentwise envelope at every node."""
    eps = np.asarray(eps_along, dtype=float)
    if eps.ndim == 1:
        return np.abs(eps)
    return np.linalg.norm(eps, axis=1)


@dataclass(frozen=True)
class GronwallReport:
    """E(t_i) with the constants used and per-node cap flags."""

    grid: TimeGrid
    e: np.ndarray
    lipschitz: float
    q: np.ndarray | None
    capped: np.ndarray
    cap: float

    @property
    def any_capped(self) -> bool:
        return bool(np.any(self.capped))

    @property
    def first_capped_time(self) -> float | None:
        """Earliest node time at which E reached the cap."""
        hits = np.flatnonzero(self.capped)
        return float(self.grid.nodes[hits[0]]) if hits.size else None

    @property
    def final(self) -> float:
        return float(self.e[-1])


def gronwall_state_bound(
    llip: LogLipschitzSignal,
    eps_along: np.ndarray,
    lipschitz: float,
    cap: float = DEFAULT_CAP,
    q: np.ndarray | None = None,
) -> GronwallReport:
    """Gronwall envelope E on the grid of `llip`.

    `eps_along` holds per-node scalars. Pass lipschitz = 1 to report E / L.

    Raises:
        ValidationError: for negative eps, negative L or a non-positive cap
    """
    grid = llip.grid
    eps = np.asarray(eps_along, dtype=float).reshape(-1)
    if eps.size != grid.size:
        raise DimensionError(f"{eps.size} envelope samples for a grid of {grid.size} nodes")
    if np.any(eps < 0) or not np.all(np.isfinite(eps)):
        raise ValidationError("envelope samples must be finite and nonnegative")
    if lipschitz < 0 or not np.isfinite(lipschitz):
        raise ValidationError(f"Lipschitz constant must be finite and >= 0, got {lipschitz}")
    if cap <= 0:
        raise ValidationError(f"cap must be positive, got {cap}")

    phi = cumulative_quadrature(grid, llip.values)
    with np.errstate(divide="ignore"):
        log_terms = np.log(eps) - phi
        log_half_steps = np.log(0.5 * grid.steps)
        log_lip = np.log(lipschitz)
    # Trapezoid segments of eps * exp(-Phi), summed in log space.
    log_segments = log_half_steps + np.logaddexp(log_terms[:-1], log_terms[1:])
    log_running = np.concatenate(([-np.inf], np.logaddexp.accumulate(log_segments)))
    log_e = log_lip + phi + log_running

    log_cap = np.log(cap)
    capped = log_e > log_cap
    e = np.exp(np.minimum(log_e, log_cap))
    return GronwallReport(
        grid=grid,
        e=e,
        lipschitz=float(lipschitz),
        q=None if q is None else np.asarray(q, dtype=float),
        capped=capped,
        cap=float(cap),
    )


def lemma_comparison(
    e0: float, alpha: np.ndarray, beta: np.ndarray, grid: TimeGrid
) -> np.ndarray:
    """Right-hand side of the integral comparison lemma on the grid.

    e0 * exp(int_0^t beta) + int_0^t alpha(s) exp(int_s^t beta) ds, with a
    max-shift of the inner exponent so that signed alpha is handled too.
    """
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if alpha.size != grid.size or beta.size != grid.size:
        raise DimensionError("alpha and beta need one sample per grid node")
    big_b = cumulative_quadrature(grid, beta)
    shift = float(np.max(-big_b))
    inner = cumulative_quadrature(grid, alpha * np.exp(-big_b - shift))
    return e0 * np.exp(big_b) + np.exp(big_b + shift) * inner
