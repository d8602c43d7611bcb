# tests/test_experiments.py
"""Tests for the run, sweep and derivative-check drivers."""

import json
from pathlib import Path
from typing import Any
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from odesens import experiments
from odesens.config import ProblemConfig, resolve_config
from odesens.errors import ConfigError, StageError
from odesens.experiments import analyze, derivative_check, epsilon_sweep, run_problem

# Test constants
SMALL_GRID = 101
RUN_TABLES = ("trajectories.csv", "bounds.csv", "loglip.csv", "qoi.csv")
ZERMELO_GRONWALL_LOOSENESS = 5.0
ZERMELO_QOI_BOUND_SLACK = 1.2
HYPERSONIC_CAP_BEFORE = 20.0  # s


def _small_config(out: Path, **overrides: Any) -> ProblemConfig:
    """Zermelo on a coarse fixed grid, silent, without the refinement pass."""
    values = {
        "grid_n": SMALL_GRID,
        "grid_mode": "fixed",
        "refinement_check": False,
        "quiet": True,
        "out": str(out),
        "workers": 1,
    }
    values.update(overrides)
    return resolve_config({}, values)


def test_analyze_zermelo_scalars(tmp_path: Path) -> None:
    """The pipeline fills every scalar; the bounds sit at or above their estimates."""
    result = analyze(_small_config(tmp_path))
    s = result.scalars
    assert s["epsilon"] == pytest.approx(0.1)
    assert s["true_l2_error"] > 0.0
    assert s["sensitivity_estimate"] > 0.0
    assert s["state_bound"] >= 0.9 * s["sensitivity_estimate"]
    assert s["qoi_bound"] >= abs(s["adjoint_qoi_estimate"]) * (1.0 - 1e-12)
    assert s["true_qoi_error"] == pytest.approx(s["q_eps"] - s["q_star"])
    assert result.traj_eps.grid.size == SMALL_GRID
    assert set(result.timings) == {
        "build",
        "solve",
        "sensitivity",
        "adjoint",
        "gronwall",
        "state-bound",
        "qoi-bound",
    }


def test_analyze_names_failing_stage(tmp_path: Path) -> None:
    """A numerical failure inside a stage surfaces as StageError with that stage."""
    with patch.object(experiments, "solve_sensitivity", side_effect=RuntimeError("boom")):
        with pytest.raises(StageError) as excinfo:
            analyze(_small_config(tmp_path))
    assert excinfo.value.stage == "sensitivity"
    assert "boom" in str(excinfo.value)


def test_analyze_missing_custom_file_is_config_error(tmp_path: Path) -> None:
    """A custom problem whose file does not exist is a configuration problem."""
    config = _small_config(tmp_path, problem="custom", problem_file=str(tmp_path / "none.toml"))
    with pytest.raises(ConfigError):
        analyze(config)


class TestRunProblem:
    """Files written by a single run."""

    def test_writes_tables_manifest_and_report(self, tmp_path: Path) -> None:
        artifacts = run_problem(_small_config(tmp_path))
        for name in RUN_TABLES:
            assert (tmp_path / name).exists()
        assert (tmp_path / "report.html").exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "run"
        assert manifest["status"] == "ok"
        assert manifest["config"]["grid_n"] == SMALL_GRID
        assert "timestamp" in manifest
        assert manifest["tables"]["bounds"] == "bounds.csv"
        assert set(manifest["residuals"]) == {"x_eps", "x_star"}
        assert manifest["residuals"]["x_eps"]["initial"] == 0.0
        assert artifacts.status == "ok"

    def test_trajectory_table_layout(self, tmp_path: Path) -> None:
        run_problem(_small_config(tmp_path))
        raw = (tmp_path / "trajectories.csv").read_bytes()
        assert raw.startswith(b"t,x1_eps,x2_eps,x1_star,x2_star,error_norm\r\n")
        frame = pd.read_csv(tmp_path / "trajectories.csv")
        assert len(frame) == SMALL_GRID
        assert frame["t"].iloc[0] == 0.0
        assert frame["t"].iloc[-1] == pytest.approx(1.0)

    def test_bounds_and_qoi_tables(self, tmp_path: Path) -> None:
        run_problem(_small_config(tmp_path))
        bounds = pd.read_csv(tmp_path / "bounds.csv")
        assert list(bounds.columns) == [
            "t",
            "worst_case_dx_norm",
            "sensitivity_norm",
            "true_error_norm",
            "gronwall_E",
            "gronwall_capped",
            "loglip",
        ]
        assert (bounds["gronwall_E"] >= 0.0).all()
        qoi = pd.read_csv(tmp_path / "qoi.csv")
        assert len(qoi) == 1
        assert qoi["qoi_bound"].iloc[0] >= abs(qoi["adjoint_qoi_estimate"].iloc[0])

    def test_tables_are_deterministic(self, tmp_path: Path) -> None:
        """Same configuration and seed give byte-identical tables."""
        run_problem(_small_config(tmp_path / "a"))
        run_problem(_small_config(tmp_path / "b"))
        for name in RUN_TABLES:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_progress_output(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        run_problem(_small_config(tmp_path, quiet=False))
        out = capsys.readouterr().out
        assert "✓ solve" in out
        assert "Run Summary:" in out


class TestEpsilonSweep:
    """Sweep rows, statuses and failure handling."""

    def test_rows_sorted_by_epsilon(self, tmp_path: Path) -> None:
        artifacts = epsilon_sweep(_small_config(tmp_path), [0.1, 0.01])
        frame = pd.read_csv(tmp_path / "sweep.csv")
        assert list(frame["epsilon"]) == [0.01, 0.1]
        assert list(frame["status"]) == ["ok", "ok"]
        assert artifacts.status == "ok"
        assert artifacts.failed_entries == 0
        assert (frame["state_bound"] >= 0.0).all()

    def test_failed_entry_keeps_its_row(self, tmp_path: Path) -> None:
        """One failing epsilon makes the sweep partial, the others still report."""
        original = experiments.analyze

        def flaky(config: ProblemConfig, echo: bool = False) -> experiments.Analysis:
            if config.epsilon == 0.1:
                raise StageError("solve", RuntimeError("step size collapsed"))
            return original(config, echo=echo)

        with patch.object(experiments, "analyze", side_effect=flaky):
            artifacts = epsilon_sweep(_small_config(tmp_path), [0.1, 0.01])

        assert artifacts.status == "partial"
        assert artifacts.failed_entries == 1
        frame = pd.read_csv(tmp_path / "sweep.csv")
        failed = frame[frame["epsilon"] == 0.1].iloc[0]
        assert failed["status"] == "failed"
        assert "step size collapsed" in failed["message"]
        assert pd.isna(failed["state_bound"])
        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["status"] == "partial"
        assert manifest["errors"][0]["epsilon"] == 0.1

    def test_all_failed(self, tmp_path: Path) -> None:
        with patch.object(experiments, "analyze", side_effect=RuntimeError("nope")):
            artifacts = epsilon_sweep(_small_config(tmp_path), [0.1, 0.2])
        assert artifacts.status == "failed"

    def test_manifest_echoes_resolved_settings(self, tmp_path: Path) -> None:
        """No "auto" survives into the manifest; problem defaults fill the gaps."""
        config = resolve_config({}, {"quiet": True, "out": str(tmp_path)})
        with patch.object(experiments, "analyze", side_effect=RuntimeError("skipped")):
            epsilon_sweep(config, [0.1])
        echoed = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))["config"]
        assert echoed["grid_mode"] == "fixed"
        assert echoed["grid_n"] == 1001
        assert echoed["lipschitz"] == pytest.approx(4.0)
        assert echoed["workers"] == 1
        assert echoed["eps_list"] == [0.1]
        assert "auto" not in json.dumps(echoed)

    def test_rejects_non_finite_epsilon(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="eps_list"):
            epsilon_sweep(_small_config(tmp_path), [0.1, float("nan")])


def test_derivative_check_zermelo(tmp_path: Path) -> None:
    """Every model of the Zermelo problem passes the default tolerance."""
    config = _small_config(tmp_path, probes=5)
    reports = derivative_check(config)
    assert [r.model for r in reports] == ["zermelo", "g_star", "g_eps", "distance"]
    for report in reports:
        assert report.probes == 5
        assert report.passed(config.fd_tol), report.worst


def _default_grid_config(out: Path, problem: str, epsilon: float) -> ProblemConfig:
    """A benchmark at its own default grid, without the refinement pass."""
    values = {
        "problem": problem,
        "epsilon": epsilon,
        "refinement_check": False,
        "quiet": True,
        "out": str(out),
        "workers": 1,
    }
    return resolve_config({}, values)


@pytest.mark.integration
class TestBenchmarkBoundQuality:
    """How estimates and bounds compare with the true errors on both benchmarks."""

    @pytest.mark.parametrize("epsilon", [1e-3, 1e-2])
    def test_zermelo_estimate_and_bound_track_true_error(
        self, tmp_path: Path, epsilon: float
    ) -> None:
        s = analyze(_default_grid_config(tmp_path, "zermelo", epsilon)).scalars
        assert s["sensitivity_estimate"] == pytest.approx(s["true_l2_error"], rel=0.10)
        ratio = s["state_bound"] / s["sensitivity_estimate"]
        assert 0.99 <= ratio <= 1.1

    def test_zermelo_gronwall_is_far_above_worst_case(self, tmp_path: Path) -> None:
        """The a-priori envelope at t = 1 is loose next to the worst-case sensitivity."""
        result = analyze(_default_grid_config(tmp_path, "zermelo", 1e-2))
        worst_final = float(np.linalg.norm(result.state_bound.delta_x.final))
        assert result.gronwall.final >= ZERMELO_GRONWALL_LOOSENESS * worst_final
        assert result.gronwall.final >= ZERMELO_GRONWALL_LOOSENESS * result.scalars["state_bound"]

    @pytest.mark.parametrize("epsilon", [1e-3, 1e-2])
    def test_zermelo_qoi_estimate_and_bound(self, tmp_path: Path, epsilon: float) -> None:
        """The adjoint estimate is within 15%; the LP bound sits up to 20% above |true|.

        The bound integrates |w| |delta g| while the true error integrates
        w delta g, which changes sign along the Zermelo path.
        """
        s = analyze(_default_grid_config(tmp_path, "zermelo", epsilon)).scalars
        true_error = s["true_qoi_error"]
        assert s["adjoint_qoi_estimate"] == pytest.approx(true_error, rel=0.15)
        assert s["qoi_bound"] >= abs(s["adjoint_qoi_estimate"])
        assert s["qoi_bound"] <= ZERMELO_QOI_BOUND_SLACK * abs(true_error)

    def test_hypersonic_gronwall_caps_early_and_bound_is_tight(self, tmp_path: Path) -> None:
        result = analyze(_default_grid_config(tmp_path, "hypersonic", 1e-2))
        first = result.gronwall.first_capped_time
        assert first is not None
        assert first < HYPERSONIC_CAP_BEFORE
        ratio = result.scalars["state_bound"] / result.scalars["true_l2_error"]
        assert 1.0 / 3.0 <= ratio <= 3.0
