#!/usr/bin/env python3
"""
Validate Scenario Command

Checks a scenario file without running it and prints the fully resolved
configuration. Exit code 0 when valid, 2 otherwise.
"""

import argparse
import sys
from pathlib import Path

# Add scripts directory to path
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from errors import ConfigError
from scenario_config import load_scenario


def parse_arguments(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description="Validate a scenario file without running it.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python validate-scenario.py inputs/baseline.cfg
  python validate-scenario.py inputs/lq_long.cfg --quiet
        """
    )
    parser.add_argument("config_path", type=str, help="Path to the scenario file")
    parser.add_argument("--quiet", action="store_true", help="Only report PASS/FAIL")
    return parser.parse_args(argv)


def validate_scenario(args) -> int:
    path = Path(args.config_path)
    if not path.exists():
        print(f"Error: scenario file not found: {path}")
        return ConfigError.exit_code
    try:
        config = load_scenario(path)
    except ConfigError as exc:
        print("\nValidation: FAILED")
        print("-" * 40)
        for line in str(exc).splitlines():
            print(f"  {line}")
        return exc.exit_code

    if not args.quiet:
        print("\nResolved configuration:")
        print("-" * 40)
        for line in config.resolved_lines():
            print(f"  {line}")
        print("-" * 40)
    print("Validation: PASSED")
    return 0


def main(argv=None):
    """Main entry point."""
    args = parse_arguments(argv)
    return validate_scenario(args)


if __name__ == "__main__":
    sys.exit(main())
