#!/usr/bin/env python3
"""
Age-Structured Population Control - Main Entry Point
=====================================================

Runs one scenario through one of four commands:

- simulate     uncontrolled march of y(x, a, t) in the Neumann modes
- nullcontrol  explicit null control (birth or age band) + verification
- lq           static / dynamic LQ per mode + turnpike diagnostics
- sweep        aggregated CSV over T, a0/eps, N or K

Exit codes: 0 success, 2 precondition/configuration violation,
3 solver failure (or null-control residual above tolerance), 4 I/O.

Usage:
    python run.py simulate --config inputs/baseline.cfg
    python run.py nullcontrol --config inputs/baseline.cfg --out outputs/null
    python run.py lq --config inputs/lq_long.cfg --modes 2 --workers 2
    python run.py sweep --config inputs/sweep_horizon.cfg
"""

import argparse
import logging
import sys
from pathlib import Path

# Add scripts directory to path
sys.path.insert(0, str(Path(__file__).parent / "scripts"))

from errors import PopulationControlError
from pipeline import COMMANDS
from scenario_config import load_scenario

logger = logging.getLogger("run")

LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"
LOG_DATEFMT = "%H:%M:%S"
IO_EXIT_CODE = 4


def parse_arguments(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description="Simulation and control of an age-structured, spatially diffusing population.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python run.py simulate --config inputs/pure_shift.cfg
  python run.py nullcontrol --config inputs/short_horizon.cfg
  python run.py lq --config inputs/lq_short.cfg --horizon 0.3
        """
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="What to run")
    parser.add_argument("--config", type=str, default=None,
                        help="Scenario file (default: project defaults only)")
    parser.add_argument("--out", type=str, default=None, help="Output directory override")
    parser.add_argument("--seed", type=int, default=None, help="Seed for randomized checks")
    parser.add_argument("--modes", type=int, default=None, help="Number of spatial modes K")
    parser.add_argument("--horizon", type=float, default=None, help="Time horizon T")
    parser.add_argument("--workers", type=int, default=None, help="Threads for per-mode work")
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")
    return parser.parse_args(argv)


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format=LOG_FORMAT, datefmt=LOG_DATEFMT, force=True)


def print_header(command: str):
    """Print the run header."""
    print("\n" + "=" * 70)
    print(f"POPULATION CONTROL - {command.upper()}")
    print("=" * 70)


def print_section(title: str):
    print("\n" + "-" * 50)
    print(title)
    print("-" * 50)


def main(argv=None) -> int:
    """Main entry point."""
    args = parse_arguments(argv)
    configure_logging(args.verbose)
    overrides = {
        "output.directory": args.out,
        "seed": args.seed,
        "discretization.modes": args.modes,
        "discretization.horizon": args.horizon,
        "solver.workers": args.workers,
    }

    print_header(args.command)
    try:
        config = load_scenario(args.config, overrides)
        print(f"Scenario: {args.config or '(project defaults)'}")
        print(f"Output:   {config.output.directory}")
        result = COMMANDS[args.command](config)
    except PopulationControlError as exc:
        print(f"\nError: {exc}")
        logger.debug("Failed with %s", type(exc).__name__)
        return exc.exit_code
    except OSError as exc:
        print(f"\nError: I/O failure on {exc.filename or 'output'}: {exc.strerror or exc}")
        return IO_EXIT_CODE

    print_section("SUMMARY")
    for line in result.summary:
        print(f"  {line}")
    print_section(f"Generated files ({len(result.files)})")
    for path in result.files:
        print(f"  - {path}")
    if result.exit_code:
        print(f"\nError: {result.message}")
    print("=" * 70 + "\n")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
