"""Problem abstractions: dynamics f, component function g, QoI and envelope.

Models carry analytic derivatives supplied by the caller. Nothing here
differentiates automatically; `check_derivatives` compares the declared
partials against central finite differences instead.

Inputs such as a heading u(t) or an angle of attack alpha(t) are not a
separate object: they are folded into the time dependence of the dynamics
and component models.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from odesens.errors import CapabilityError, DimensionError, EvaluationError, ValidationError
from odesens.ode_core import MatrixSignal, TimeGrid, Trajectory

# Central finite-difference step used by `check_derivatives`.
DEFAULT_FD_STEP = 1e-6

# Relative slack for envelope violation checks.
_ENVELOPE_SLACK = 1e-12

StateFn = Callable[[float, np.ndarray], np.ndarray]
StateGFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


def _as_vector(value: object, size: int, where: str, t: float) -> np.ndarray:
    out = np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)
    if out.size != size:
        raise DimensionError(f"{where} returned {out.size} entries, expected {size}")
    if not np.all(np.isfinite(out)):
        raise EvaluationError(where, t)
    return out


def _as_matrix(value: object, shape: tuple[int, ...], where: str, t: float) -> np.ndarray:
    out = np.asarray(value, dtype=float)
    if out.size != int(np.prod(shape)):
        raise DimensionError(f"{where} returned shape {out.shape}, expected {shape}")
    out = out.reshape(shape)
    if not np.all(np.isfinite(out)):
        raise EvaluationError(where, t)
    return out


@dataclass(frozen=True)
class ComponentModel:
    """The component function g(t, x) with its state derivatives.

    `value` returns (n_g,), `jacobian` returns (n_g, n_x), and the optional
    `hessian` returns (n_g, n_x, n_x). Evaluators must not mutate state.
    """

    n_x: int
    n_g: int
    value: StateFn
    jacobian: StateFn
    hessian: StateFn | None = None
    name: str = "g"

    def g(self, t: float, x: np.ndarray) -> np.ndarray:
        return _as_vector(self.value(t, x), self.n_g, f"{self.name}(t, x)", t)

    def g_x(self, t: float, x: np.ndarray) -> np.ndarray:
        return _as_matrix(self.jacobian(t, x), (self.n_g, self.n_x), f"{self.name}_x", t)

    def g_xx(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.hessian is None:
            raise CapabilityError(f"{self.name} provides no second derivative g_xx")
        return _as_matrix(
            self.hessian(t, x), (self.n_g, self.n_x, self.n_x), f"{self.name}_xx", t
        )

    @property
    def order(self) -> int:
        """Highest state derivative the model provides."""
        return 2 if self.hessian is not None else 1


@dataclass(frozen=True)
class DynamicsModel:
    """Right-hand side f(t, x, g) with partials f_x (n_x, n_x), f_g (n_x, n_g)."""

    n_x: int
    n_g: int
    rhs: StateGFn
    jac_x: StateGFn
    jac_g: StateGFn
    name: str = "f"

    def f(self, t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return _as_vector(self.rhs(t, x, g), self.n_x, self.name, t)

    def f_x(self, t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return _as_matrix(self.jac_x(t, x, g), (self.n_x, self.n_x), f"{self.name}_x", t)

    def f_g(self, t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return _as_matrix(self.jac_g(t, x, g), (self.n_x, self.n_g), f"{self.name}_g", t)


def _zero_running(t: float, x: np.ndarray, g: np.ndarray) -> float:
    return 0.0


@dataclass(frozen=True)
class QoiModel:
    """q(x, g) = phi(x(tf)) + integral of l(t, x(t), g(t, x(t))) dt.

    Running-cost callables default to zero, giving a pure terminal QoI.
    """

    n_x: int
    n_g: int
    terminal: Callable[[np.ndarray], float]
    terminal_grad: Callable[[np.ndarray], np.ndarray]
    running: Callable[[float, np.ndarray, np.ndarray], float] = _zero_running
    running_grad_x: StateGFn | None = None
    running_grad_g: StateGFn | None = None
    name: str = "q"

    def phi(self, x_f: np.ndarray) -> float:
        return float(_as_vector(self.terminal(x_f), 1, f"{self.name}.phi", float("nan"))[0])

    def grad_phi(self, x_f: np.ndarray) -> np.ndarray:
        return _as_vector(self.terminal_grad(x_f), self.n_x, f"{self.name}.grad_phi", float("nan"))

    def l(self, t: float, x: np.ndarray, g: np.ndarray) -> float:  # noqa: E743
        return float(_as_vector(self.running(t, x, g), 1, f"{self.name}.l", t)[0])

    def l_x(self, t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.running_grad_x is None:
            return np.zeros(self.n_x)
        return _as_vector(self.running_grad_x(t, x, g), self.n_x, f"{self.name}.l_x", t)

    def l_g(self, t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.running_grad_g is None:
            return np.zeros(self.n_g)
        return _as_vector(self.running_grad_g(t, x, g), self.n_g, f"{self.name}.l_g", t)

    @property
    def has_running(self) -> bool:
        return self.running is not _zero_running


@dataclass(frozen=True)
class ErrorEnvelope:
    """Componentwise bound eps(t, x) >= 0 on |g_eps - g_star|."""

    n_g: int
    value: StateFn
    name: str = "eps"

    def eps(self, t: float, x: np.ndarray) -> np.ndarray:
        out = _as_vector(self.value(t, x), self.n_g, self.name, t)
        if np.any(out < 0):
            raise ValidationError(f"{self.name} is negative at t = {t!r}: {out}")
        return out

    def along(self, traj: Trajectory) -> np.ndarray:
        """Envelope samples (nodes, n_g) along a trajectory."""
        return np.array([self.eps(t, x) for t, x in zip(traj.grid.nodes, traj.states, strict=True)])

    @classmethod
    def from_deviation(cls, g_eps: ComponentModel, g_star: ComponentModel) -> ErrorEnvelope:
        """Envelope equal to the absolute deviation |g_eps - g_star|."""

        def value(t: float, x: np.ndarray) -> np.ndarray:
            return np.abs(g_eps.g(t, x) - g_star.g(t, x))

        return cls(g_eps.n_g, value, name=f"|{g_eps.name} - {g_star.name}|")


@dataclass(frozen=True)
class LinearizedSystem:
    """A(t) = f_x + f_g g_x and B(t) = f_g sampled along a nominal trajectory."""

    a: MatrixSignal
    b: MatrixSignal

    def __post_init__(self) -> None:
        if not self.a.grid.same_as(self.b.grid):
            raise DimensionError("A and B must be sampled on the same grid")
        if self.a.shape[0] != self.a.shape[1] or self.b.shape[0] != self.a.shape[0]:
            raise DimensionError(f"incompatible shapes A {self.a.shape}, B {self.b.shape}")

    @property
    def grid(self) -> TimeGrid:
        return self.a.grid

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_g(self) -> int:
        return self.b.shape[1]

    def resample(self, grid: TimeGrid) -> LinearizedSystem:
        """Both signals interpolated linearly onto another grid."""
        return LinearizedSystem(self.a.resample(grid), self.b.resample(grid))


def _check_pair(f: DynamicsModel, g: ComponentModel) -> None:
    if (f.n_x, f.n_g) != (g.n_x, g.n_g):
        raise DimensionError(
            f"dynamics expects (n_x, n_g) = {(f.n_x, f.n_g)}, component gives {(g.n_x, g.n_g)}"
        )


def eval_rhs(f: DynamicsModel, g: ComponentModel, t: float, x: np.ndarray) -> np.ndarray:
    """Superposition f(t, x, g(t, x)).

    Raises:
        DimensionError: if the models or x disagree on dimensions
        EvaluationError: if any evaluator returns a non-finite value
    """
    _check_pair(f, g)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != f.n_x:
        raise DimensionError(f"state has {x.size} entries, expected {f.n_x}")
    return f.f(t, x, g.g(t, x))


def closed_loop_rhs(
    f: DynamicsModel, g: ComponentModel
) -> Callable[[float, np.ndarray], np.ndarray]:
    """Bind f and g into an rhs(t, x) callable for `integrate_ivp`."""
    _check_pair(f, g)

    def rhs(t: float, x: np.ndarray) -> np.ndarray:
        return f.f(t, x, g.g(t, x))

    return rhs


def linearize(f: DynamicsModel, g: ComponentModel, traj: Trajectory) -> LinearizedSystem:
    """Sample A = f_x + f_g g_x and B = f_g at every node of `traj`."""
    _check_pair(f, g)
    if traj.n != f.n_x:
        raise DimensionError(f"trajectory has state dimension {traj.n}, expected {f.n_x}")
    size = traj.grid.size
    a = np.empty((size, f.n_x, f.n_x))
    b = np.empty((size, f.n_x, f.n_g))
    for i, (t, x) in enumerate(zip(traj.grid.nodes, traj.states, strict=True)):
        gv = g.g(t, x)
        fg = f.f_g(t, x, gv)
        a[i] = f.f_x(t, x, gv) + fg @ g.g_x(t, x)
        b[i] = fg
    return LinearizedSystem(MatrixSignal(traj.grid, a), MatrixSignal(traj.grid, b))


# --- derivative checks -----------------------------------------------------


@dataclass(frozen=True)
class ProbePoint:
    """A (t, x, g) location at which derivatives are compared.

    `g` must have one entry per component of every model checked that
    consumes g; component models ignore it.
    """

    t: float
    x: np.ndarray
    g: np.ndarray


@dataclass
class DerivativeReport:
    """Worst relative finite-difference mismatch per declared partial."""

    model: str
    worst: dict[str, float] = field(default_factory=dict)
    probes: int = 0
    step: float = DEFAULT_FD_STEP

    @property
    def max_mismatch(self) -> float:
        return max(self.worst.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_mismatch <= tol

    def record(self, partial: str, mismatch: float) -> None:
        self.worst[partial] = max(self.worst.get(partial, 0.0), mismatch)


def _central_jacobian(
    fn: Callable[[np.ndarray], np.ndarray], at: np.ndarray, h: float
) -> np.ndarray:
    """Central-difference Jacobian of fn at `at`; output axis first."""
    at = np.asarray(at, dtype=float)
    base = np.asarray(fn(at), dtype=float)
    jac = np.empty((*base.shape, at.size))
    for k in range(at.size):
        step = np.zeros_like(at)
        step[k] = h
        jac[..., k] = (np.asarray(fn(at + step)) - np.asarray(fn(at - step))) / (2.0 * h)
    return jac


def _relative_mismatch(fd: np.ndarray, analytic: np.ndarray) -> float:
    fd = np.asarray(fd, dtype=float).reshape(-1)
    analytic = np.asarray(analytic, dtype=float).reshape(-1)
    if fd.size == 0:
        return 0.0
    denom = max(1.0, float(np.max(np.abs(analytic))))
    return float(np.max(np.abs(fd - analytic))) / denom


AnyModel = DynamicsModel | ComponentModel | QoiModel


def _partial_pairs(
    model: AnyModel, t: float, x: np.ndarray, gv: np.ndarray, h: float
) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(name, finite difference, declared) for every partial the model offers."""
    jac = _central_jacobian
    if isinstance(model, DynamicsModel):
        return [
            ("f_x", jac(lambda y: model.f(t, y, gv), x, h), model.f_x(t, x, gv)),
            ("f_g", jac(lambda q: model.f(t, x, q), gv, h), model.f_g(t, x, gv)),
        ]
    if isinstance(model, ComponentModel):
        pairs = [("g_x", jac(lambda y: model.g(t, y), x, h), model.g_x(t, x))]
        if model.hessian is not None:
            pairs.append(("g_xx", jac(lambda y: model.g_x(t, y), x, h), model.g_xx(t, x)))
        return pairs
    pairs = [("grad_phi", jac(lambda y: np.array([model.phi(y)]), x, h)[0], model.grad_phi(x))]
    if model.has_running:
        fd_x = jac(lambda y: np.array([model.l(t, y, gv)]), x, h)[0]
        fd_g = jac(lambda q: np.array([model.l(t, x, q)]), gv, h)[0]
        pairs.append(("l_x", fd_x, model.l_x(t, x, gv)))
        pairs.append(("l_g", fd_g, model.l_g(t, x, gv)))
    return pairs


def _probe_g(model: AnyModel, probe: ProbePoint) -> np.ndarray:
    gv = np.asarray(probe.g, dtype=float).reshape(-1)
    consumes_g = isinstance(model, DynamicsModel) or (
        isinstance(model, QoiModel) and model.has_running
    )
    if consumes_g and gv.size != model.n_g:
        raise DimensionError(f"probe g has {gv.size} entries, model expects n_g = {model.n_g}")
    return gv


def check_derivatives(
    model: AnyModel, probe_points: Sequence[ProbePoint], h: float = DEFAULT_FD_STEP
) -> DerivativeReport:
    """Compare declared partials with central differences at the probes.

    The mismatch of one partial at one probe is max |FD - analytic| divided
    by max(1, max |analytic|). The report keeps the worst value per partial.
    Never raises for large mismatches; callers decide via `passed`.

    Raises:
        DimensionError: if a probe's g does not match the model's n_g
    """
    report = DerivativeReport(model=getattr(model, "name", type(model).__name__), step=h)
    for p in probe_points:
        x, gv = np.asarray(p.x, dtype=float), _probe_g(model, p)
        for name, fd, analytic in _partial_pairs(model, p.t, x, gv, h):
            report.record(name, _relative_mismatch(fd, analytic))
        report.probes += 1
    return report


def random_probes(  # noqa: PLR0913  # box bounds for each of t, x, g
    rng: np.random.Generator,
    count: int,
    t_range: tuple[float, float],
    x_radius: float,
    n_x: int,
    n_g: int,
    g_radius: float = 1.0,
    x_center: np.ndarray | None = None,
) -> list[ProbePoint]:
    """Uniform random probes with x in a ball of radius `x_radius`.

    g values are drawn uniformly from [-g_radius, g_radius]^n_g.
    """
    center = np.zeros(n_x) if x_center is None else np.asarray(x_center, dtype=float)
    probes = []
    for _ in range(count):
        direction = rng.normal(size=n_x)
        direction /= max(np.linalg.norm(direction), 1e-300)
        radius = x_radius * rng.uniform() ** (1.0 / n_x)
        probes.append(
            ProbePoint(
                t=float(rng.uniform(*t_range)),
                x=center + radius * direction,
                g=rng.uniform(-g_radius, g_radius, size=n_g),
            )
        )
    return probes


# --- deviation and sampled norms ---------------------------------------------


@dataclass(frozen=True)
class DeviationReport:
    """delta g = g_eps - g_star along a trajectory plus envelope violations."""

    delta: np.ndarray
    envelope: np.ndarray | None
    violations: np.ndarray

    @property
    def ok(self) -> bool:
        return self.violations.size == 0


def model_deviation(
    g_eps: ComponentModel,
    g_star: ComponentModel,
    traj: Trajectory,
    envelope: ErrorEnvelope | None = None,
) -> DeviationReport:
    """Per-node delta g(t_i, x_i) and the nodes where |delta g| exceeds eps."""
    if (g_eps.n_x, g_eps.n_g) != (g_star.n_x, g_star.n_g):
        raise DimensionError("component models disagree on (n_x, n_g)")
    if traj.n != g_eps.n_x:
        raise DimensionError(f"trajectory has state dimension {traj.n}, expected {g_eps.n_x}")
    nodes, states = traj.grid.nodes, traj.states
    delta = np.array([g_eps.g(t, x) - g_star.g(t, x) for t, x in zip(nodes, states, strict=True)])
    env = None
    violations = np.zeros(0, dtype=int)
    if envelope is not None:
        if envelope.n_g != g_eps.n_g:
            raise DimensionError(f"envelope has {envelope.n_g} components, expected {g_eps.n_g}")
        env = envelope.along(traj)
        excess = np.abs(delta) > env * (1.0 + _ENVELOPE_SLACK)
        violations = np.flatnonzero(np.any(excess, axis=1))
    return DeviationReport(delta=delta, envelope=env, violations=violations)


@dataclass(frozen=True)
class SampleBox:
    """Tensor sampling box over (t, x) for `gnorm_sampled`."""

    t_range: tuple[float, float]
    x_lower: np.ndarray
    x_upper: np.ndarray
    t_count: int = 5
    x_count: int = 9

    def points(self) -> list[tuple[float, np.ndarray]]:
        ts = np.linspace(*self.t_range, self.t_count)
        axes = [
            np.linspace(lo, hi, self.x_count)
            for lo, hi in zip(np.atleast_1d(self.x_lower), np.atleast_1d(self.x_upper), strict=True)
        ]
        return [(float(t), np.array(x)) for t in ts for x in itertools.product(*axes)]


def gnorm_sampled(g: ComponentModel, k: int, sample_spec: SampleBox) -> float:
    """Sampled estimate of the G^k norm of g; a lower bound on the true norm.

    Returns the maximum over the sample points of sum_{n<=k} ||g^(n)(t, x)||
    with the Euclidean norm for g, the spectral norm for g_x and the
    Frobenius norm for g_xx.

    Raises:
        CapabilityError: if k exceeds the derivatives the model provides
    """
    if k not in (0, 1, 2):
        raise ValidationError(f"k must be 0, 1 or 2, got {k}")
    if k > g.order:
        raise CapabilityError(f"{g.name} provides derivatives up to order {g.order}, not {k}")
    best = 0.0
    for t, x in sample_spec.points():
        total = float(np.linalg.norm(g.g(t, x)))
        if k >= 1:
            total += float(np.linalg.norm(g.g_x(t, x), ord=2))
        if k >= 2:  # noqa: PLR2004
            total += float(np.linalg.norm(g.g_xx(t, x)))
        best = max(best, total)
    return best
