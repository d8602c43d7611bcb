"""Built-in benchmark problems and the declarative custom-problem loader.

Each builder returns a `Problem`, which unpacks like the tuple
(f, g_star, g_eps, q, envelope, x0, interval).
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import toml

from odesens.errors import ConfigError
from odesens.models import ComponentModel, DynamicsModel, ErrorEnvelope, QoiModel

# Gradients of the distance QoI are zeroed below this speed.
SPEED_GUARD = 1e-12

# ---- hypersonic vehicle (SI unless noted) -----------------------------------
MASS = 1200.0  # kg
WING_AREA = 10.0  # m^2
RHO_0 = 1.225  # kg/m^3, sea-level density
RHO_DECAY = 0.14  # 1/km
MU = 3.986e14  # m^3/s^2
R_E = 6.371e6  # m
KM = 1000.0  # m per km
HYPERSONIC_TF = 2000.0  # s


@dataclass(frozen=True)
class Problem:
    """A fully wired perturbation study.

    `lipschitz` is the default Gronwall constant; `grid_mode` and
    `grid_nodes` the default discretization. `angle_states` lists state
    indices stored in radians that tables report in degrees.
    """

    name: str
    epsilon: float
    f: DynamicsModel
    g_star: ComponentModel
    g_eps: ComponentModel
    q: QoiModel
    envelope: ErrorEnvelope
    x0: np.ndarray
    interval: tuple[float, float]
    lipschitz: float = 1.0
    grid_mode: str = "fixed"
    grid_nodes: int = 1001
    state_labels: tuple[str, ...] = ()
    angle_states: tuple[int, ...] = ()

    def __iter__(self) -> Iterator[Any]:
        parts = (self.f, self.g_star, self.g_eps, self.q, self.envelope, self.x0, self.interval)
        return iter(parts)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.state_labels or tuple(f"x{i + 1}" for i in range(self.f.n_x))


# --- Zermelo ------------------------------------------------------------------


def zermelo_heading(t: float) -> float:
    """Heading u(t) = (1 - 2t) pi / 3."""
    return (1.0 - 2.0 * t) * math.pi / 3.0


def _cubic_current(scale: float, name: str) -> ComponentModel:
    """g(x1) = 2 + 10 x1 - scale (x1 - 2)^3 with analytic derivatives."""

    def value(t: float, x: np.ndarray) -> np.ndarray:
        return np.array([2.0 + 10.0 * x[0] - scale * (x[0] - 2.0) ** 3])

    def jacobian(t: float, x: np.ndarray) -> np.ndarray:
        return np.array([[10.0 - 3.0 * scale * (x[0] - 2.0) ** 2, 0.0]])

    def hessian(t: float, x: np.ndarray) -> np.ndarray:
        return np.array([[[-6.0 * scale * (x[0] - 2.0), 0.0], [0.0, 0.0]]])

    return ComponentModel(2, 1, value, jacobian, hessian, name=name)


def _zermelo_dynamics() -> DynamicsModel:
    def rhs(t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        u = zermelo_heading(t)
        return np.array([math.cos(u) + g[0] * x[1], math.sin(u)])

    def jac_x(t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return np.array([[0.0, g[0]], [0.0, 0.0]])

    def jac_g(t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return np.array([[x[1]], [0.0]])

    return DynamicsModel(2, 1, rhs, jac_x, jac_g, name="zermelo")


def _distance_qoi() -> QoiModel:
    """Total distance travelled: integral of |x'(t)|."""

    def parts(t: float, x: np.ndarray, g: np.ndarray) -> tuple[float, float]:
        u = zermelo_heading(t)
        along = math.cos(u) + g[0] * x[1]
        return along, math.hypot(along, math.sin(u))

    def running(t: float, x: np.ndarray, g: np.ndarray) -> float:
        return parts(t, x, g)[1]

    def grad_x(t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        along, speed = parts(t, x, g)
        if speed < SPEED_GUARD:
            return np.zeros(2)
        return np.array([0.0, along * g[0] / speed])

    def grad_g(t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        along, speed = parts(t, x, g)
        if speed < SPEED_GUARD:
            return np.zeros(1)
        return np.array([along * x[1] / speed])

    return QoiModel(
        n_x=2,
        n_g=1,
        terminal=lambda x: 0.0,
        terminal_grad=lambda x: np.zeros(2),
        running=running,
        running_grad_x=grad_x,
        running_grad_g=grad_g,
        name="distance",
    )


def build_zermelo(epsilon: float) -> Problem:
    """Boat crossing a river whose current depends on the downstream position."""

    def envelope(t: float, x: np.ndarray) -> np.ndarray:
        return np.array([abs(epsilon * (x[0] - 2.0) ** 3)])

    return Problem(
        name="zermelo",
        epsilon=float(epsilon),
        f=_zermelo_dynamics(),
        g_star=_cubic_current(1.0, "g_star"),
        g_eps=_cubic_current(1.0 - epsilon, "g_eps"),
        q=_distance_qoi(),
        envelope=ErrorEnvelope(1, envelope, name="|eps (x1 - 2)^3|"),
        x0=np.zeros(2),
        interval=(0.0, 1.0),
        lipschitz=4.0,
        grid_mode="fixed",
        grid_nodes=1001,
        state_labels=("x1", "x2"),
    )


# --- hypersonic vehicle -----------------------------------------------------------


def angle_of_attack(t: float) -> float:
    """alpha(t) = (10 - 4 t / 2000) degrees, in radians."""
    return math.radians(10.0 - 4.0 * t / HYPERSONIC_TF)


def density(altitude_km: float) -> float:
    """Exponential atmosphere in kg/m^3; altitude in km."""
    return RHO_0 * math.exp(-RHO_DECAY * altitude_km)


def _aero_coefficients(lift_slope: float, drag_quadratic: float, name: str) -> ComponentModel:
    """(C_L, C_D) of the scheduled angle of attack; independent of the state."""

    def value(t: float, x: np.ndarray) -> np.ndarray:
        a = angle_of_attack(t)
        return np.array([-0.04 + lift_slope * a, 0.012 - 0.01 * a + drag_quadratic * a * a])

    def jacobian(t: float, x: np.ndarray) -> np.ndarray:
        return np.zeros((2, 4))

    def hessian(t: float, x: np.ndarray) -> np.ndarray:
        return np.zeros((2, 4, 4))

    return ComponentModel(4, 2, value, jacobian, hessian, name=name)


def _reentry_dynamics() -> DynamicsModel:
    """Planar point-mass entry; x = (downrange km, altitude km, v m/s, gamma rad)."""

    def forces(x: np.ndarray, g: np.ndarray) -> tuple[float, float, float, float, float]:
        rho = density(x[1])
        qbar = 0.5 * rho * x[2] ** 2
        r = R_E + KM * x[1]
        return rho, qbar, qbar * WING_AREA * g[0], qbar * WING_AREA * g[1], r

    def rhs(t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        _, _, lift, drag, r = forces(x, g)
        v, gam = x[2], x[3]
        grav = MU / r**2
        return np.array(
            [
                v * math.cos(gam) / KM,
                v * math.sin(gam) / KM,
                -drag / MASS - grav * math.sin(gam),
                lift / (MASS * v) - grav * math.cos(gam) / v + v * math.cos(gam) / r,
            ]
        )

    def jac_x(t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        rho, _, lift, drag, r = forces(x, g)
        v, gam = x[2], x[3]
        sin_g, cos_g = math.sin(gam), math.cos(gam)
        grav = MU / r**2
        dgrav = 2.0 * KM * MU / r**3  # -d(grav)/d(x2)
        jac = np.zeros((4, 4))
        jac[0, 2], jac[0, 3] = cos_g / KM, -v * sin_g / KM
        jac[1, 2], jac[1, 3] = sin_g / KM, v * cos_g / KM
        jac[2, 1] = RHO_DECAY * drag / MASS + dgrav * sin_g
        jac[2, 2] = -rho * v * WING_AREA * g[1] / MASS
        jac[2, 3] = -grav * cos_g
        jac[3, 1] = -RHO_DECAY * lift / (MASS * v) + dgrav * cos_g / v - KM * v * cos_g / r**2
        jac[3, 2] = 0.5 * rho * WING_AREA * g[0] / MASS + grav * cos_g / v**2 + cos_g / r
        jac[3, 3] = grav * sin_g / v - v * sin_g / r
        return jac

    def jac_g(t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        _, qbar, _, _, _ = forces(x, g)
        jac = np.zeros((4, 2))
        jac[2, 1] = -qbar * WING_AREA / MASS
        jac[3, 0] = qbar * WING_AREA / (MASS * x[2])
        return jac

    return DynamicsModel(4, 2, rhs, jac_x, jac_g, name="reentry")


def build_hypersonic(epsilon: float) -> Problem:
    """Unpowered glide with perturbed lift/drag models; QoI is the downrange."""

    def envelope(t: float, x: np.ndarray) -> np.ndarray:
        a = angle_of_attack(t)
        return np.array([abs(epsilon) * a, abs(epsilon) * a * a])

    return Problem(
        name="hypersonic",
        epsilon=float(epsilon),
        f=_reentry_dynamics(),
        g_star=_aero_coefficients(0.8, 0.6, "g_star"),
        g_eps=_aero_coefficients(0.8 + epsilon, 0.6 - epsilon, "g_eps"),
        q=QoiModel(
            n_x=4,
            n_g=2,
            terminal=lambda x: float(x[0]),
            terminal_grad=lambda x: np.array([1.0, 0.0, 0.0, 0.0]),
            name="downrange",
        ),
        envelope=ErrorEnvelope(2, envelope, name="(|eps| alpha, |eps| alpha^2)"),
        x0=np.array([0.0, 80.0, 5000.0, math.radians(-5.0)]),
        interval=(0.0, HYPERSONIC_TF),
        lipschitz=1.0,
        grid_mode="adaptive",
        grid_nodes=2001,
        state_labels=("x1_km", "x2_km", "v_mps", "gamma_deg"),
        angle_states=(3,),
    )


# --- custom linear-plus-lookup problems -------------------------------------------


def _matrix(section: dict[str, Any], key: str, shape: tuple[int, int] | None = None) -> np.ndarray:
    if key not in section:
        raise ConfigError(f"custom problem is missing '{key}'")
    try:
        value = np.atleast_2d(np.asarray(section[key], dtype=float))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"custom problem field '{key}' is not numeric: {e}") from e
    if shape is not None and value.shape != shape:
        raise ConfigError(f"custom problem field '{key}' has shape {value.shape}, expected {shape}")
    return value


def _lookup_component(
    knots: np.ndarray, table: np.ndarray, index: int, n_x: int, name: str
) -> ComponentModel:
    """Piecewise-linear g(x) = table interpolated in x[index], clamped outside."""
    slopes = np.diff(table, axis=0) / np.diff(knots)[:, None]

    def value(t: float, x: np.ndarray) -> np.ndarray:
        return np.array([np.interp(x[index], knots, col) for col in table.T])

    def jacobian(t: float, x: np.ndarray) -> np.ndarray:
        jac = np.zeros((table.shape[1], n_x))
        s = x[index]
        if knots[0] <= s < knots[-1]:
            jac[:, index] = slopes[int(np.searchsorted(knots, s, side="right")) - 1]
        return jac

    return ComponentModel(n_x, table.shape[1], value, jacobian, name=name)


def load_custom(path: str | Path, epsilon: float) -> Problem:
    """Load a linear-plus-lookup problem f = A x + B g(x) from a TOML file.

    Required keys under [custom]: A, B, x0, interval and a [custom.lookup]
    table with `state_index`, `knots`, `values` (the reference g) and
    `perturbation` (d, with g_eps = g + epsilon d). The QoI is c^T x(tf)
    with `terminal_weights`. Arbitrary dynamics need the Python API.

    Raises:
        FileNotFoundError: if the file does not exist
        ConfigError: if the file is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Custom problem file not found: {path}")
    try:
        data = toml.load(path)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    section = data.get("custom")
    if not isinstance(section, dict) or not isinstance(section.get("lookup"), dict):
        raise ConfigError(f"{path} needs [custom] and [custom.lookup] sections")
    lookup = section["lookup"]

    a = _matrix(section, "A")
    n_x = a.shape[0]
    if a.shape != (n_x, n_x):
        raise ConfigError(f"A must be square, got {a.shape}")
    knots = _matrix(lookup, "knots").reshape(-1)
    values = _matrix(lookup, "values").reshape(knots.size, -1)
    n_g = values.shape[1]
    b = _matrix(section, "B", (n_x, n_g))
    perturbation = _matrix(lookup, "perturbation", values.shape)
    x0 = _matrix(section, "x0").reshape(-1)
    interval = tuple(float(v) for v in _matrix(section, "interval").reshape(-1))
    weights = np.asarray(section.get("terminal_weights", np.eye(n_x)[0]), dtype=float).reshape(-1)
    index = int(lookup.get("state_index", 0))
    if knots.size < 2 or np.any(np.diff(knots) <= 0):  # noqa: PLR2004
        raise ConfigError("lookup knots must be strictly increasing with at least two entries")
    shapes_ok = x0.size == n_x and weights.size == n_x and len(interval) == 2  # noqa: PLR2004
    if not shapes_ok or not 0 <= index < n_x:
        raise ConfigError("x0, terminal_weights, interval or state_index do not match A")

    g_star = _lookup_component(knots, values, index, n_x, "g_star")
    g_eps = _lookup_component(knots, values + epsilon * perturbation, index, n_x, "g_eps")
    dynamics = DynamicsModel(
        n_x,
        n_g,
        rhs=lambda t, x, g: a @ x + b @ g,
        jac_x=lambda t, x, g: a,
        jac_g=lambda t, x, g: b,
        name=str(section.get("name", path.stem)),
    )
    return Problem(
        name=str(section.get("name", path.stem)),
        epsilon=float(epsilon),
        f=dynamics,
        g_star=g_star,
        g_eps=g_eps,
        q=QoiModel(
            n_x, n_g, terminal=lambda x: float(weights @ x), terminal_grad=lambda x: weights
        ),
        envelope=ErrorEnvelope.from_deviation(g_eps, g_star),
        x0=x0,
        interval=(interval[0], interval[1]),
        lipschitz=float(section.get("lipschitz", float(np.linalg.norm(b, ord=2)))),
        grid_mode=str(section.get("grid_mode", "fixed")),
        grid_nodes=int(section.get("grid_nodes", 1001)),
    )


def build_problem(name: str, epsilon: float, custom_path: str | Path | None = None) -> Problem:
    """Dispatch on the problem name used in configs and on the command line."""
    if name == "zermelo":
        return build_zermelo(epsilon)
    if name == "hypersonic":
        return build_hypersonic(epsilon)
    if name == "custom":
        if custom_path is None:
            raise ConfigError("problem 'custom' needs a problem file")
        return load_custom(custom_path, epsilon)
    raise ConfigError(f"unknown problem '{name}' (expected zermelo, hypersonic or custom)")
