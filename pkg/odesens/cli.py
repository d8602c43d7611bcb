"""Command-line front end: `odesens run | sweep | check`.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 partial sweep.
"""

from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from typing import Any

from odesens.config import PROBLEMS, ProblemConfig, load_config, resolve_config
from odesens.errors import ConfigError, OdesensError, StageError
from odesens.experiments import derivative_check, epsilon_sweep, run_problem

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML or JSON configuration file")
    parser.add_argument("--problem", choices=PROBLEMS, help="Benchmark problem")
    parser.add_argument("--problem-file", dest="problem_file", help="Custom problem TOML file")
    parser.add_argument("--epsilon", type=float, help="Perturbation parameter")
    grid = parser.add_mutually_exclusive_group()
    grid.add_argument("--grid-n", dest="grid_n", type=int, help="Fixed RK4 grid with N nodes")
    grid.add_argument("--adaptive", action="store_true", help="Adaptive Dormand-Prince integration")
    parser.add_argument("--rtol", type=float, help="Relative tolerance; implies --adaptive")
    parser.add_argument("--atol", type=float, help="Absolute tolerance; implies --adaptive")
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--quiet", action="store_true", default=None, help="No progress output")


def _add_bounds(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--cap", type=float, help="Cap on the Gronwall envelope")
    parser.add_argument("--lipschitz", type=float, help="Gronwall Lipschitz constant L")
    parser.add_argument("--restarts", type=int, help="Random restarts of the QP solver")
    parser.add_argument("--q", dest="q_weights", type=_float_list, help="Diagonal of Q")
    parser.add_argument(
        "--no-refinement-check",
        dest="refinement_check",
        action="store_false",
        default=None,
        help="Skip the refined-grid recomputation of the state bound",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odesens",
        description=(
            "Sensitivity-based error estimates and bounds for ODEs "
            "with perturbed component functions"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="One perturbation study")
    _add_common(run)
    _add_bounds(run)

    sweep = sub.add_parser("sweep", help="Studies over a list of epsilon values")
    _add_common(sweep)
    _add_bounds(sweep)
    sweep.add_argument("--eps-list", dest="eps_list", type=_float_list, help="e.g. 1e-4,1e-3,1e-2")
    sweep.add_argument("--workers", type=int, help="Worker processes (default: cores)")

    check = sub.add_parser("check", help="Finite-difference derivative validation")
    _add_common(check)
    check.add_argument("--fd-step", dest="fd_step", type=float, help="Central difference step")
    check.add_argument("--fd-tol", dest="fd_tol", type=float, help="Largest accepted mismatch")
    return parser


def config_from_args(args: argparse.Namespace) -> ProblemConfig:
    """Resolve defaults <- --config file <- flags.

    --rtol or --atol select adaptive integration, like --adaptive.
    """
    file_values = load_config(args.config) if args.config else {}
    overrides: dict[str, Any] = {
        k: v for k, v in vars(args).items() if k not in ("command", "config", "adaptive")
    }
    tolerances = args.rtol is not None or args.atol is not None
    if tolerances and args.grid_n is not None:
        raise ConfigError("--rtol/--atol apply to adaptive integration and exclude --grid-n")
    if args.adaptive or tolerances:
        overrides["grid_mode"] = "adaptive"
    elif args.grid_n is not None:
        overrides["grid_mode"] = "fixed"
    return resolve_config(file_values, overrides)


def _print_check(config: ProblemConfig) -> int:
    reports = derivative_check(config)
    print(f"Derivative check: {config.problem} (h = {config.fd_step:g}, tol = {config.fd_tol:g})")
    print("=" * 50)
    print(f"  {'model':<12} {'partial':<10} {'mismatch':>12}")
    worst = 0.0
    for report in reports:
        for partial, mismatch in report.worst.items():
            mark = "✓" if mismatch <= config.fd_tol else "✗"
            print(f"{mark} {report.model:<12} {partial:<10} {mismatch:>12.3e}")
            worst = max(worst, mismatch)
    return EXIT_OK if worst <= config.fd_tol else EXIT_NUMERICAL


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        if args.command == "check":
            return _print_check(config)
        if args.command == "sweep":
            artifacts = epsilon_sweep(config, config.eps_list)
            if artifacts.status == "ok":
                return EXIT_OK
            return EXIT_PARTIAL if artifacts.status == "partial" else EXIT_NUMERICAL
        run_problem(config)
        return EXIT_OK
    except (ConfigError, FileNotFoundError) as e:
        print(f"\nCONFIG ERROR: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"\nFAILED in stage '{e.stage}': {e.cause}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OdesensError as e:
        print(f"\nNUMERICAL ERROR: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
