#!/usr/bin/env python3
"""
Population Control Toolkit Setup Script
=======================================
Installs dependencies, reports installed versions and checks that every
shipped scenario validates.

    python setup_toolkit.py
    python setup_toolkit.py --skip-install
"""

import argparse
import subprocess
import sys
from importlib import metadata
from pathlib import Path

# =============================================================
# CONFIGURATION
# =============================================================

ROOT = Path(__file__).parent.resolve()
REQUIREMENTS = ROOT / "requirements.txt"
INPUTS = ROOT / "inputs"
OUTPUTS = ROOT / "outputs"

MIN_PYTHON = (3, 9)

# distribution name -> import name
NUMERIC_STACK = {
    "numpy": "numpy",
    "scipy": "scipy",
    "pydantic": "pydantic",
    "svgwrite": "svgwrite",
}


# =============================================================
# STEPS
# =============================================================

def banner(text: str):
    print("\n" + "=" * 60)
    print(f"  {text}")
    print("=" * 60)


def python_ok(args) -> bool:
    found = sys.version_info[:3]
    print(f"  Interpreter: {'.'.join(map(str, found))} ({sys.executable})")
    if found[:2] < MIN_PYTHON:
        print(f"  ERROR: needs {MIN_PYTHON[0]}.{MIN_PYTHON[1]} or newer")
        return False
    return True


def folders_ok(args) -> bool:
    missing = [p for p in (INPUTS, OUTPUTS) if not p.is_dir()]
    for folder in missing:
        folder.mkdir(parents=True)
        print(f"  mkdir {folder.relative_to(ROOT)}/")
    if not missing:
        print("  inputs/ and outputs/ present")
    return True


def pip_ok(args) -> bool:
    if args.skip_install:
        print("  --skip-install given, pip not run")
        return True
    if not REQUIREMENTS.is_file():
        print(f"  ERROR: {REQUIREMENTS.name} missing")
        return False
    proc = subprocess.run([sys.executable, "-m", "pip", "install", "-q", "-r", str(REQUIREMENTS)],
                          capture_output=True, text=True)
    if proc.returncode:
        print(f"  ERROR: pip exited with {proc.returncode}")
        print("  " + (proc.stderr or "").strip()[-500:])
        return False
    print("  requirements installed")
    return True


def stack_ok(args) -> bool:
    ok = True
    for dist, module in NUMERIC_STACK.items():
        try:
            __import__(module)
        except ImportError:
            print(f"    {dist:<10} MISSING")
            ok = False
            continue
        print(f"    {dist:<10} {metadata.version(dist)}")
    return ok


def scenarios_ok(args) -> bool:
    """Load every inputs/*.cfg; a broken shipped scenario fails setup."""
    sys.path.insert(0, str(ROOT / "scripts"))
    from errors import ConfigError
    from scenario_config import load_scenario

    failures = 0
    paths = sorted(INPUTS.glob("*.cfg"))
    for path in paths:
        try:
            config = load_scenario(path)
        except ConfigError as exc:
            failures += 1
            print(f"    {path.name}: {exc}")
        else:
            print(f"    {path.name}: control={config.problem.control} T={config.discretization.horizon}")
    print(f"  {len(paths) - failures}/{len(paths)} scenarios valid")
    return failures == 0


STEPS = [
    ("Python version", python_ok),
    ("Input and output folders", folders_ok),
    ("Dependencies", pip_ok),
    ("Numeric stack", stack_ok),
    ("Shipped scenarios", scenarios_ok),
]


# =============================================================
# MAIN
# =============================================================

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Set up the population control toolkit.")
    parser.add_argument("--skip-install", action="store_true", help="Do not run pip")
    args = parser.parse_args(argv)

    banner("POPULATION CONTROL TOOLKIT SETUP")
    failed = []
    for index, (title, step) in enumerate(STEPS, start=1):
        print(f"\n[{index}/{len(STEPS)}] {title}")
        if title == "Shipped scenarios" and "Numeric stack" in failed:
            print("  skipped, numeric stack incomplete")
            continue
        if not step(args):
            failed.append(title)

    if failed:
        banner("SETUP INCOMPLETE: " + ", ".join(failed))
        return 1
    banner("SETUP COMPLETE")
    print("  Next: python run.py simulate --config inputs/baseline.cfg")
    return 0


if __name__ == "__main__":
    sys.exit(main())
