"""Experiment drivers: one perturbation study, or a sweep over epsilon.

`analyze` runs the numerical pipeline without touching the filesystem;
`run_problem` and `epsilon_sweep` add the console progress lines and write
the CSV tables, manifest.json and report.html into the output directory.
"""

from __future__ import annotations

import json
import platform
import time
from collections.abc import Iterator
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from odesens.config import ProblemConfig
from odesens.errors import ConfigError, StageError
from odesens.gronwall import (
    GronwallReport,
    LogLipschitzSignal,
    gronwall_state_bound,
    log_lipschitz_along,
    scalar_envelope,
)
from odesens.models import (
    DerivativeReport,
    ProbePoint,
    check_derivatives,
    closed_loop_rhs,
    linearize,
    model_deviation,
)
from odesens.ode_core import AdaptiveSpec, GridSpec, TimeGrid, Trajectory, integrate_ivp
from odesens.problems import Problem, build_problem
from odesens.report import render_report
from odesens.sensitivity import (
    evaluate_qoi,
    pointwise_norms,
    qoi_directional_derivative,
    residual_psi,
    solve_adjoint,
    solve_sensitivity,
    state_error_norm,
    weight_samples,
)
from odesens.worst_case import BoundReport, QpOptions, qoi_error_bound, state_error_bound

UTC = timezone.utc

# CSV dialect: RFC 4180 line endings, full double precision.
CSV_FLOAT_FORMAT = "%.17g"
CSV_LINE_TERMINATOR = "\r\n"

SWEEP_COLUMNS = [
    "epsilon",
    "status",
    "true_l2_error",
    "sensitivity_estimate",
    "state_bound",
    "true_qoi_error",
    "adjoint_qoi_estimate",
    "qoi_bound",
    "gronwall_final",
    "message",
]


@dataclass
class Analysis:
    """Everything one perturbation study computes."""

    config: ProblemConfig
    problem: Problem
    traj_eps: Trajectory
    traj_star: Trajectory
    sensitivity: Trajectory
    loglip_star: LogLipschitzSignal
    loglip_eps: LogLipschitzSignal
    gronwall: GronwallReport
    state_bound: BoundReport
    qoi_bound: BoundReport
    scalars: dict[str, float]
    residuals: dict[str, dict[str, float]]
    timings: dict[str, float] = field(default_factory=dict)


@dataclass
class RunArtifacts:
    """Files written by a run or sweep, plus the manifest contents."""

    out_dir: Path
    tables: dict[str, Path]
    manifest: dict[str, Any]
    status: str = "ok"

    @property
    def failed_entries(self) -> int:
        return int(self.manifest.get("failed_entries", 0))


@contextmanager
def _stage(name: str, timings: dict[str, float], echo: bool) -> Iterator[None]:
    """Time one pipeline stage, print its outcome and name it on failure."""
    start = time.perf_counter()
    try:
        yield
    except ConfigError:
        if echo:
            print(f"  ✗ {name}")
        raise
    except Exception as e:
        if echo:
            print(f"  ✗ {name}: {e}")
        raise StageError(name, e) from e
    finally:
        timings[name] = round(time.perf_counter() - start, 6)
    if echo:
        print(f"  ✓ {name} ({timings[name]:.2f}s)")


def grid_spec_for(config: ProblemConfig, problem: Problem) -> GridSpec:
    """Fixed uniform grid for RK4, or an adaptive request with uniform output."""
    t0, tf = problem.interval
    if config.grid_mode == "adaptive":
        return AdaptiveSpec(t0, tf, config.rtol, config.atol, output_nodes=int(config.grid_n))
    return TimeGrid.uniform(t0, tf, int(config.grid_n))


def load_problem(config: ProblemConfig) -> tuple[Problem, ProblemConfig]:
    """Build the configured problem and fill "auto" settings from it.

    Raises:
        ConfigError: if the problem cannot be built from the configuration
    """
    try:
        problem = build_problem(config.problem, config.epsilon, config.problem_file or None)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e
    return problem, config.with_problem_defaults(problem)


def qp_options(config: ProblemConfig) -> QpOptions:
    return QpOptions(
        restarts=config.restarts,
        max_iters=config.max_iters,
        tol=config.tol,
        seed=config.seed,
        dense_limit=config.dense_limit,
    )


def analyze(config: ProblemConfig, echo: bool = False) -> Analysis:  # noqa: PLR0915
    """Run the whole pipeline for one epsilon.

    The nominal solve uses g_eps; the sensitivity, adjoint and both bounds
    are linearized along x_eps with g_eps, and the Gronwall constant uses
    g_star along x_eps.

    Raises:
        ConfigError: if the problem cannot be built from the configuration
        StageError: naming the failing stage for any numerical failure
    """
    timings: dict[str, float] = {}

    with _stage("build", timings, echo):
        problem, config = load_problem(config)
        f, g_star, g_eps, q, envelope, x0, _ = problem
        weight = config.weight_matrix(f.n_x)

    with _stage("solve", timings, echo):
        spec = grid_spec_for(config, problem)
        traj_eps = integrate_ivp(closed_loop_rhs(f, g_eps), x0, spec)
        traj_star = integrate_ivp(closed_loop_rhs(f, g_star), x0, spec)
        if not traj_star.grid.same_as(traj_eps.grid):
            traj_star = traj_star.resample(traj_eps.grid)
        grid = traj_eps.grid
        residuals = {}
        for label, traj, g in (("x_eps", traj_eps, g_eps), ("x_star", traj_star, g_star)):
            dyn, init = residual_psi(traj, f, g, x0)
            residuals[label] = {"dynamics": dyn, "initial": init}

    with _stage("sensitivity", timings, echo):
        lin = linearize(f, g_eps, traj_eps)
        dg = model_deviation(g_eps, g_star, traj_eps).delta
        sens = solve_sensitivity(lin, dg, source_direction="g_eps - g_star along x_eps")
        error = Trajectory(grid, traj_eps.states - traj_star.states)
        true_l2 = state_error_norm(error, weight)
        estimate_l2 = state_error_norm(sens.delta_x, weight)

    with _stage("adjoint", timings, echo):
        adj = solve_adjoint(lin, q, traj_eps, g_eps)
        q_eps = evaluate_qoi(q, traj_eps, g_eps)
        q_star = evaluate_qoi(q, traj_star, g_star)
        q_estimate = qoi_directional_derivative(adj, lin, q, traj_eps, g_eps, dg)

    with _stage("gronwall", timings, echo):
        eps_along = envelope.along(traj_eps)
        loglip_star = log_lipschitz_along(f, g_star, traj_eps, weight)
        loglip_eps = log_lipschitz_along(f, g_eps, traj_eps, weight)
        gronwall = gronwall_state_bound(
            loglip_star, scalar_envelope(eps_along), float(config.lipschitz), config.cap, weight
        )

    with _stage("state-bound", timings, echo):
        state_bound = state_error_bound(
            lin, eps_along, weight, qp_options(config), refinement_check=config.refinement_check
        )

    with _stage("qoi-bound", timings, echo):
        qoi_bound = qoi_error_bound(adj, lin, q, traj_eps, g_eps, eps_along)

    scalars = {
        "epsilon": config.epsilon,
        "true_l2_error": true_l2,
        "sensitivity_estimate": estimate_l2,
        "state_bound": state_bound.value,
        "q_eps": q_eps,
        "q_star": q_star,
        "true_qoi_error": q_eps - q_star,
        "adjoint_qoi_estimate": q_estimate,
        "qoi_bound": qoi_bound.value,
        "gronwall_final": gronwall.final,
    }
    return Analysis(
        config=config,
        problem=problem,
        traj_eps=traj_eps,
        traj_star=traj_star,
        sensitivity=sens.delta_x,
        loglip_star=loglip_star,
        loglip_eps=loglip_eps,
        gronwall=gronwall,
        state_bound=state_bound,
        qoi_bound=qoi_bound,
        scalars=scalars,
        residuals=residuals,
        timings=timings,
    )


# --- tables -----------------------------------------------------------------


def write_table(frame: pd.DataFrame, path: Path) -> Path:
    """CSV with a header row, '.' decimals and 17 significant digits."""
    frame.to_csv(
        path,
        index=False,
        float_format=CSV_FLOAT_FORMAT,
        lineterminator=CSV_LINE_TERMINATOR,
        encoding="utf-8",
    )
    return path


def _display_states(problem: Problem, states: np.ndarray) -> np.ndarray:
    shown = np.array(states, dtype=float)
    for i in problem.angle_states:
        shown[:, i] = np.degrees(shown[:, i])
    return shown


def trajectory_table(result: Analysis) -> pd.DataFrame:
    """t, x_eps components, x_star components, ||x_eps - x_star||_Q."""
    problem = result.problem
    grid = result.traj_eps.grid
    weights = weight_samples(grid, result.config.weight_matrix(problem.f.n_x), problem.f.n_x)
    columns: dict[str, Any] = {"t": grid.nodes}
    for tag, traj in (("eps", result.traj_eps), ("star", result.traj_star)):
        shown = _display_states(problem, traj.states)
        for i, label in enumerate(problem.labels):
            columns[f"{label}_{tag}"] = shown[:, i]
    error = result.traj_eps.states - result.traj_star.states
    columns["error_norm"] = pointwise_norms(error, weights)
    return pd.DataFrame(columns)


def bounds_table(result: Analysis) -> pd.DataFrame:
    """Pointwise norms of the worst-case delta x, the sensitivity and the true error."""
    grid = result.traj_eps.grid
    n = result.problem.f.n_x
    weights = weight_samples(grid, result.config.weight_matrix(n), n)
    certificate = result.state_bound.delta_x
    worst = np.zeros((grid.size, n)) if certificate is None else certificate.states
    return pd.DataFrame(
        {
            "t": grid.nodes,
            "worst_case_dx_norm": pointwise_norms(worst, weights),
            "sensitivity_norm": pointwise_norms(result.sensitivity.states, weights),
            "true_error_norm": pointwise_norms(
                result.traj_eps.states - result.traj_star.states, weights
            ),
            "gronwall_E": result.gronwall.e,
            "gronwall_capped": result.gronwall.capped.astype(int),
            "loglip": result.loglip_star.values,
        }
    )


def loglip_table(result: Analysis) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "t": result.loglip_star.grid.nodes,
            "loglip_g_star": result.loglip_star.values,
            "loglip_g_eps": result.loglip_eps.values,
        }
    )


def qoi_table(result: Analysis) -> pd.DataFrame:
    keys = ["epsilon", "q_eps", "q_star", "true_qoi_error", "adjoint_qoi_estimate", "qoi_bound"]
    return pd.DataFrame([{k: result.scalars[k] for k in keys}])


# --- manifest -----------------------------------------------------------------


def package_versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in ("numpy", "scipy", "pandas", "jinja2", "toml"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def write_manifest(out_dir: Path, manifest: dict[str, Any]) -> Path:
    """Write manifest.json (UTF-8); the only file carrying a timestamp."""
    path = out_dir / "manifest.json"
    manifest = {**manifest, "timestamp": datetime.now(UTC).isoformat()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(manifest), f, indent=2, ensure_ascii=False)
    return path


def _print_summary(title: str, lines: dict[str, Any]) -> None:
    print("\n" + "=" * 50)
    print(f"{title}:")
    for key, value in lines.items():
        shown = f"{value:.6g}" if isinstance(value, float) else value
        print(f"  {key}: {shown}")


# --- drivers --------------------------------------------------------------------


def run_problem(config: ProblemConfig) -> RunArtifacts:
    """Run one study and write trajectories, bounds, loglip, qoi, manifest, report.

    Raises:
        ConfigError: for configuration problems
        StageError: naming the failing stage
    """
    echo = not config.quiet
    out_dir = Path(config.out)
    if echo:
        print(f"odesens run: {config.problem}, epsilon = {config.epsilon:g}")
        print("=" * 50)
    result = analyze(config, echo=echo)

    tables: dict[str, Path] = {}
    with _stage("write", result.timings, echo):
        out_dir.mkdir(parents=True, exist_ok=True)
        tables["trajectories"] = write_table(trajectory_table(result), out_dir / "trajectories.csv")
        tables["bounds"] = write_table(bounds_table(result), out_dir / "bounds.csv")
        tables["loglip"] = write_table(loglip_table(result), out_dir / "loglip.csv")
        tables["qoi"] = write_table(qoi_table(result), out_dir / "qoi.csv")
        diagnostics = {
            "state_bound": result.state_bound.diagnostics,
            "qoi_bound": result.qoi_bound.diagnostics,
            "gronwall": {
                "lipschitz": result.gronwall.lipschitz,
                "cap": result.gronwall.cap,
                "capped": result.gronwall.any_capped,
                "first_capped_time": result.gronwall.first_capped_time,
            },
        }
        manifest = {
            "command": "run",
            "status": "ok",
            "config": result.config.as_dict(),
            "versions": package_versions(),
            "timings": result.timings,
            "scalars": result.scalars,
            "residuals": result.residuals,
            "diagnostics": diagnostics,
            "tables": {k: v.name for k, v in tables.items()},
            "errors": [],
        }
        tables["report"] = render_report(out_dir, "run", manifest)
        write_manifest(out_dir, manifest)

    if echo:
        _print_summary("Run Summary", result.scalars)
    return RunArtifacts(out_dir, tables, manifest)


def derivative_check(config: ProblemConfig) -> list[DerivativeReport]:
    """Finite-difference check of every declared partial of the problem.

    Probes are drawn from nodes of the nominal g_star solve, with g set to
    g_star there, so that they lie where the models are actually used.
    """
    problem, config = load_problem(config)
    f, g_star, g_eps, q, _, x0, _ = problem
    traj = integrate_ivp(closed_loop_rhs(f, g_star), x0, grid_spec_for(config, problem))
    rng = np.random.default_rng(config.seed)
    count = min(config.probes, traj.grid.size)
    picks = np.sort(rng.choice(traj.grid.size, size=count, replace=False))
    probes = []
    for i in picks:
        t, x = float(traj.grid.nodes[i]), traj.states[i]
        probes.append(ProbePoint(t, x, g_star.g(t, x)))
    return [check_derivatives(model, probes, config.fd_step) for model in (f, g_star, g_eps, q)]


def _sweep_entry(config: ProblemConfig, epsilon: float) -> dict[str, Any]:
    """Sweep worker: one silent study; failures become a row, never raise."""
    row: dict[str, Any] = dict.fromkeys(SWEEP_COLUMNS)
    row["epsilon"] = float(epsilon)
    try:
        result = analyze(replace(config, epsilon=float(epsilon), quiet=True), echo=False)
    except Exception as e:  # noqa: BLE001  # a failed entry must not stop the sweep
        row.update(status="failed", message=str(e))
        return row
    for key in SWEEP_COLUMNS:
        if key in result.scalars:
            row[key] = result.scalars[key]
    row.update(status="ok", message="")
    return row


def epsilon_sweep(config: ProblemConfig, eps_list: list[float] | tuple[float, ...]) -> RunArtifacts:
    """Run one study per epsilon (in parallel) and write sweep.csv.

    Rows are sorted by epsilon; failed entries keep their row with
    status "failed", empty numbers and the error message.
    """
    if not eps_list or not all(np.isfinite(e) for e in eps_list):
        raise ConfigError("eps_list must be a nonempty list of finite values")
    echo = not config.quiet
    out_dir = Path(config.out)
    workers = min(config.worker_count(), len(eps_list))
    _, resolved = load_problem(config)
    resolved = replace(resolved, eps_list=tuple(eps_list), workers=workers)
    if echo:
        print(f"odesens sweep: {config.problem}, {len(eps_list)} values, {workers} worker(s)")
        print("=" * 50)

    start = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_entry, [config] * len(eps_list), eps_list))
    else:
        rows = [_sweep_entry(config, e) for e in eps_list]
    rows.sort(key=lambda r: r["epsilon"])
    if echo:
        for row in rows:
            mark = "✓" if row["status"] == "ok" else "✗"
            detail = "" if row["status"] == "ok" else f": {row['message']}"
            print(f"  {mark} epsilon = {row['epsilon']:g}{detail}")

    failed = [r for r in rows if r["status"] != "ok"]
    status = "ok" if not failed else ("failed" if len(failed) == len(rows) else "partial")
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    tables = {"sweep": write_table(frame, out_dir / "sweep.csv")}
    manifest = {
        "command": "sweep",
        "status": status,
        "config": resolved.as_dict(),
        "versions": package_versions(),
        "timings": {"sweep": round(time.perf_counter() - start, 6)},
        "workers": workers,
        "rows": rows,
        "failed_entries": len(failed),
        "tables": {"sweep": "sweep.csv"},
        "errors": [{"epsilon": r["epsilon"], "error": r["message"]} for r in failed],
    }
    tables["report"] = render_report(out_dir, "sweep", manifest)
    write_manifest(out_dir, manifest)

    if echo:
        _print_summary(
            "Sweep Summary", {"entries": len(rows), "failed": len(failed), "output": str(out_dir)}
        )
    return RunArtifacts(out_dir, tables, manifest, status)
