"""Configuration management for odesens runs."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, cast

import numpy as np
import toml

from odesens.errors import ConfigError

if TYPE_CHECKING:
    from odesens.problems import Problem

PROBLEMS = ("zermelo", "hypersonic", "custom")
GRID_MODES = ("auto", "fixed", "adaptive")
AUTO = "auto"

# Environment override for the sweep worker count.
WORKERS_ENV = "ODESENS_WORKERS"

# (section, key) in config files -> ProblemConfig field.
_FILE_KEYS = {
    ("problem", "name"): "problem",
    ("problem", "epsilon"): "epsilon",
    ("problem", "file"): "problem_file",
    ("grid", "mode"): "grid_mode",
    ("grid", "n"): "grid_n",
    ("grid", "rtol"): "rtol",
    ("grid", "atol"): "atol",
    ("bounds", "q"): "q_weights",
    ("bounds", "lipschitz"): "lipschitz",
    ("bounds", "cap"): "cap",
    ("bounds", "restarts"): "restarts",
    ("bounds", "max_iters"): "max_iters",
    ("bounds", "tol"): "tol",
    ("bounds", "seed"): "seed",
    ("bounds", "dense_limit"): "dense_limit",
    ("bounds", "refinement_check"): "refinement_check",
    ("checks", "fd_step"): "fd_step",
    ("checks", "fd_tol"): "fd_tol",
    ("checks", "probes"): "probes",
    ("output", "dir"): "out",
    ("output", "quiet"): "quiet",
    ("sweep", "eps_list"): "eps_list",
    ("sweep", "workers"): "workers",
}


def load_config(config_path: str | Path = "config.toml") -> dict[str, Any]:
    """Load configuration from a TOML file, or JSON when the suffix is .json.

    Args:
        config_path: Path to the configuration file

    Returns:
        Dictionary containing configuration

    Raises:
        FileNotFoundError: If config file doesn't exist
        ConfigError: If config file is invalid
    """
    path = Path(config_path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")

    try:
        with open(path, encoding="utf-8") as f:
            config = json.load(f) if path.suffix.lower() == ".json" else toml.load(f)
    except (json.JSONDecodeError, toml.TomlDecodeError) as e:
        raise ConfigError(f"Invalid config file {config_path}: {e}") from e

    if not isinstance(config, dict):
        raise ConfigError(f"Config file {config_path} must hold a table/object at the top level")
    return cast("dict[str, Any]", config)


@dataclass(frozen=True)
class ProblemConfig:
    """Resolved settings of one run or sweep.

    `grid_n` and `lipschitz` may be "auto" until `with_problem_defaults`
    fills them from the chosen problem. `q_weights` is "identity" or the
    diagonal of a constant weight matrix.
    """

    problem: str = "zermelo"
    epsilon: float = 0.1
    problem_file: str = ""
    grid_mode: str = AUTO
    grid_n: int | str = AUTO
    rtol: float = 1e-8
    atol: float = 1e-10
    q_weights: str | tuple[float, ...] = "identity"
    lipschitz: float | str = AUTO
    cap: float = 1e10
    restarts: int = 8
    max_iters: int = 500
    tol: float = 1e-10
    seed: int = 42
    dense_limit: int = 4096
    refinement_check: bool = True
    fd_step: float = 1e-6
    fd_tol: float = 1e-4
    probes: int = 20
    out: str = "results"
    quiet: bool = False
    eps_list: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)
    workers: int | str = AUTO

    def as_dict(self) -> dict[str, Any]:
        """Plain JSON-ready mapping of every field."""
        values = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}

    def weight_matrix(self, n: int) -> np.ndarray | None:
        """Constant Q; None stands for the identity."""
        if self.q_weights == "identity":
            return None
        diag = np.asarray(self.q_weights, dtype=float)
        if diag.size != n:
            raise ConfigError(f"q has {diag.size} weights, the state has dimension {n}")
        return np.diag(diag)

    def worker_count(self) -> int:
        if self.workers != AUTO:
            return int(self.workers)
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                return max(1, int(env))
            except ValueError as e:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from e
        return os.cpu_count() or 1

    def with_problem_defaults(self, problem: Problem) -> ProblemConfig:
        """Replace every "auto" entry by the problem's default."""
        return replace(
            self,
            grid_mode=problem.grid_mode if self.grid_mode == AUTO else self.grid_mode,
            grid_n=problem.grid_nodes if self.grid_n == AUTO else self.grid_n,
            lipschitz=problem.lipschitz if self.lipschitz == AUTO else self.lipschitz,
        )


def _flatten(file_values: dict[str, Any]) -> dict[str, Any]:
    """Sectioned file layout -> field names; flat layouts pass through."""
    names = {f.name for f in fields(ProblemConfig)}
    flat: dict[str, Any] = {}
    extra: dict[str, Any] = {}
    for key, value in file_values.items():
        if isinstance(value, dict):
            for sub, sub_value in value.items():
                target = _FILE_KEYS.get((key, sub))
                if target is None:
                    extra[f"{key}.{sub}"] = sub_value
                else:
                    flat[target] = sub_value
        elif key in names:
            flat[key] = value
        else:
            extra[key] = value
    if extra:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(extra))}")
    return flat


def _coerce(name: str, value: Any) -> Any:  # noqa: PLR0911  # one branch per field type
    try:
        if name in ("epsilon", "rtol", "atol", "cap", "tol", "fd_step", "fd_tol"):
            return float(value)
        if name in ("restarts", "max_iters", "seed", "dense_limit", "probes"):
            return int(value)
        if name in ("grid_n", "workers"):
            return AUTO if value in (AUTO, None, 0) else int(value)
        if name == "lipschitz":
            return AUTO if value in (AUTO, None) else float(value)
        if name == "eps_list":
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(float(v) for v in value)
        if name == "q_weights":
            return "identity" if value in ("identity", None) else tuple(float(v) for v in value)
        if name in ("refinement_check", "quiet"):
            return bool(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {name}: {value!r}") from e
    return str(value)


def _validate(cfg: ProblemConfig) -> None:  # noqa: C901, PLR0912
    if cfg.problem not in PROBLEMS:
        expected = ", ".join(PROBLEMS)
        raise ConfigError(f"unknown problem '{cfg.problem}' (expected one of {expected})")
    if cfg.problem == "custom" and not cfg.problem_file:
        raise ConfigError("problem 'custom' needs a problem file")
    if not math.isfinite(cfg.epsilon):
        raise ConfigError(f"epsilon must be finite, got {cfg.epsilon}")
    if cfg.grid_mode not in GRID_MODES:
        modes = ", ".join(GRID_MODES)
        raise ConfigError(f"grid mode must be one of {modes}, got '{cfg.grid_mode}'")
    if cfg.grid_n != AUTO and int(cfg.grid_n) < 2:  # noqa: PLR2004
        raise ConfigError(f"grid needs N >= 2 nodes, got {cfg.grid_n}")
    if not (cfg.rtol > 0 and cfg.atol > 0 and cfg.tol > 0 and cfg.fd_step > 0 and cfg.fd_tol > 0):
        raise ConfigError("tolerances and the finite-difference step must be positive")
    if not cfg.cap > 0:
        raise ConfigError(f"cap must be positive, got {cfg.cap}")
    if cfg.lipschitz != AUTO and not float(cfg.lipschitz) >= 0:
        raise ConfigError(f"Lipschitz constant must be >= 0, got {cfg.lipschitz}")
    if cfg.restarts < 0 or cfg.max_iters < 1 or cfg.probes < 1 or cfg.dense_limit < 0:
        raise ConfigError("restarts, max_iters, probes and dense_limit must be non-negative counts")
    if cfg.workers != AUTO and int(cfg.workers) < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    if not cfg.eps_list or not all(math.isfinite(e) for e in cfg.eps_list):
        raise ConfigError("eps_list must be a nonempty list of finite values")
    if cfg.q_weights != "identity" and any(w <= 0 for w in cfg.q_weights):
        raise ConfigError("q weights must be positive")


def resolve_config(
    file_values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None
) -> ProblemConfig:
    """Merge defaults <- config file <- command-line overrides and validate.

    `overrides` uses field names; None values mean "not given".

    Raises:
        ConfigError: on unknown problems, non-finite epsilon, N < 2 and the like
    """
    merged = _flatten(file_values or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    names = {f.name for f in fields(ProblemConfig)}
    unknown = set(merged) - names
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    cfg = ProblemConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    _validate(cfg)
    return cfg
