#!/usr/bin/env python3
"""
Scenario Configuration
======================

Scenario files are flat text:

    # comment
    demographics.A = 1.0
    demographics.mortality.kind = closed_form
    problem.omega = 0.0, 1.0

Keys are dotted (up to three levels), values are scalars or comma-separated
lists. Project defaults come from config.json at the repository root,
scenario keys override them, command-line flags override both. Every
validation error is reported as `path:line: key: message`.
"""

import json
import logging
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import (BaseModel, BeforeValidator, ConfigDict, Field, ValidationError,
                      model_validator)

from errors import ConfigError

logger = logging.getLogger(__name__)

PROJECT_CONFIG = Path(__file__).resolve().parent.parent / "config.json"
MAX_KEY_DEPTH = 3
COMMAND_LINE = "<command line>"


def _as_list(value: Any) -> Any:
    if value is None:
        return []
    if isinstance(value, (str, int, float)):
        return [value]
    return value


FloatList = Annotated[List[float], BeforeValidator(_as_list)]
FormatList = Annotated[List[Literal["csv", "svg"]], BeforeValidator(_as_list)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ================================================================
# SECTIONS
# ================================================================

class MortalityConfig(_Section):
    kind: Literal["closed_form", "constant", "tabulated"] = "closed_form"
    c: float = Field(50.0, gt=0)
    rate: float = Field(0.0, ge=0)
    table: Optional[str] = None


class FertilityConfig(_Section):
    kind: Literal["closed_form", "constant", "tabulated"] = "closed_form"
    scale: float = Field(60.0 ** 5, ge=0)
    rate: float = Field(0.0, ge=0)
    support_floor: float = Field(0.0, ge=0)
    table: Optional[str] = None


class DemographicsConfig(_Section):
    A: float = Field(1.0, gt=0)
    L: float = Field(1.0, gt=0)
    mortality: MortalityConfig = MortalityConfig()
    fertility: FertilityConfig = FertilityConfig()
    reproduction_target: Optional[float] = Field(0.8, gt=0)

    @model_validator(mode="after")
    def _check_rates(self):
        if self.fertility.support_floor > self.A:
            raise ValueError("fertility.support_floor must not exceed A")
        for name, block in (("mortality", self.mortality), ("fertility", self.fertility)):
            if block.kind == "tabulated" and not block.table:
                raise ValueError(f"{name}.table is required for tabulated rates")
        return self


class DiscretizationConfig(_Section):
    age_cells: int = Field(200, ge=2)
    space_points: int = Field(512, ge=2)
    modes: int = Field(4, ge=1)
    horizon: float = Field(1.25, gt=0)
    lq_age_cells: int = Field(40, ge=2)
    lq_time_step: float = Field(0.01, gt=0)

    @model_validator(mode="after")
    def _check_modes(self):
        if self.modes > self.space_points - 1:
            raise ValueError("modes must be smaller than space_points")
        return self


class InitialConfig(_Section):
    kind: Literal["bump", "constant", "indicator", "survival", "zero"] = "bump"
    amplitude: float = 1.0
    center: float = 0.5
    width: float = Field(0.15, gt=0)
    lo: float = 0.0
    hi: float = 1.0
    spatial: Literal["uniform", "cosine", "mode"] = "cosine"
    mode: int = Field(1, ge=0)


class TargetConfig(_Section):
    kind: Literal["zero", "survival"] = "zero"
    level: float = 1.0


class ProblemConfig(_Section):
    weight: float = Field(1.0, gt=0)
    initial: InitialConfig = InitialConfig()
    target: TargetConfig = TargetConfig()
    terminal: Literal["none", "half_norm"] = "half_norm"
    control: Literal["birth", "age_band"] = "birth"
    a0: float = Field(0.2, gt=0)
    omega: Optional[Tuple[float, float]] = None
    epsilons: FloatList = [0.4, 0.2, 0.1, 0.05]
    sample_times: FloatList = [0.25, 0.5]


class SolverConfig(_Section):
    are_tolerance: float = Field(1e-10, gt=0)
    newton_max_iterations: int = Field(50, ge=1)
    riccati_max_step: float = Field(1e-2, gt=0)
    null_tolerance: float = Field(1e-2, gt=0)
    workers: int = Field(1, ge=1)


class OutputConfig(_Section):
    directory: str = "outputs/run"
    formats: FormatList = ["csv", "svg"]
    probe_x: Optional[float] = None


class SweepConfig(_Section):
    variable: Literal["T", "a0", "eps", "N", "K"] = "T"
    values: FloatList = []


class ScenarioConfig(_Section):
    demographics: DemographicsConfig = DemographicsConfig()
    discretization: DiscretizationConfig = DiscretizationConfig()
    problem: ProblemConfig = ProblemConfig()
    solver: SolverConfig = SolverConfig()
    output: OutputConfig = OutputConfig()
    sweep: SweepConfig = SweepConfig()
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_problem(self):
        A, L = self.demographics.A, self.demographics.L
        if not 0 < self.problem.a0 < A:
            raise ValueError(f"problem.a0 must lie in (0, A={A})")
        if self.problem.omega is not None:
            lo, hi = self.problem.omega
            if not 0.0 <= lo < hi <= L:
                raise ValueError(f"problem.omega must satisfy 0 <= lo < hi <= L={L}")
        if any(e <= 0 or e >= A for e in self.problem.epsilons):
            raise ValueError("problem.epsilons must lie in (0, A)")
        return self

    def resolved_lines(self) -> List[str]:
        """Fully resolved configuration as sorted `key = value` lines."""
        flat = _flatten(self.model_dump(mode="json"))
        return [f"{key} = {_render(value)}" for key, value in sorted(flat.items())]


# ================================================================
# PARSING
# ================================================================

def _render(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(_render(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    return str(value)


def _flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def _parse_value(raw: str) -> Union[str, List[str], None]:
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if "," in raw:
        return [item.strip() for item in raw.strip("[]()").split(",") if item.strip()]
    return raw


def parse_flat_text(text: str, source: str = "<string>") -> Tuple[Dict[str, Any], Dict[str, int]]:
    """
    Parse `key = value` lines into a flat dict plus the line number of each key.
    """
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{stripped}'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        parts = key.split(".")
        if not key or any(not p for p in parts):
            raise ConfigError(f"{source}:{number}: malformed key '{key}'")
        if len(parts) > MAX_KEY_DEPTH:
            raise ConfigError(f"{source}:{number}: key '{key}' nests deeper than {MAX_KEY_DEPTH} levels")
        if key in values:
            raise ConfigError(f"{source}:{number}: duplicate key '{key}' (first set on line {lines[key]})")
        values[key] = _parse_value(raw)
        lines[key] = number
    return values, lines


def _nest(flat: Dict[str, Any], lines: Dict[str, int], source: str) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for key in sorted(flat):
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{source}:{lines.get(key, 0)}: key '{key}' conflicts with a scalar value")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"{source}:{lines.get(key, 0)}: key '{key}' conflicts with a section")
        node[parts[-1]] = flat[key]
    return tree


def load_project_defaults(path: Path = PROJECT_CONFIG) -> Dict[str, Any]:
    """Flat defaults from the `solver` and `discretization` blocks of config.json."""
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    defaults = {}
    for section in ("solver", "discretization"):
        for key, value in data.get(section, {}).items():
            defaults[f"{section}.{key}"] = value
    return defaults


def _line_for(loc: Tuple[Any, ...], lines: Dict[str, int]) -> Tuple[str, int]:
    parts = [str(p) for p in loc if not isinstance(p, int)]
    while parts:
        key = ".".join(parts)
        if key in lines:
            return key, lines[key]
        prefix = key + "."
        children = [n for k, n in lines.items() if k.startswith(prefix)]
        if children:
            return key, min(children)
        parts.pop()
    return ".".join(str(p) for p in loc) or "<root>", 0


def build_config(flat: Dict[str, Any], lines: Dict[str, int], source: str) -> ScenarioConfig:
    tree = _nest(flat, lines, source)
    try:
        return ScenarioConfig.model_validate(tree)
    except ValidationError as exc:
        messages = []
        for err in exc.errors():
            key, line = _line_for(err["loc"], lines)
            messages.append(f"{source}:{line}: {key}: {err['msg']}")
        raise ConfigError("\n".join(messages)) from exc


def load_scenario(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None,
                  defaults_path: Path = PROJECT_CONFIG) -> ScenarioConfig:
    """
    Resolve project defaults < scenario file < overrides into a ScenarioConfig.

    Args:
        path: scenario file (None for defaults only)
        overrides: dotted keys from the command line; None values are ignored
        defaults_path: project config.json

    Returns:
        validated ScenarioConfig
    """
    flat = dict(load_project_defaults(defaults_path))
    lines = {key: 0 for key in flat}
    source = COMMAND_LINE
    if path is not None:
        path = Path(path)
        source = str(path)
        text = path.read_text(encoding="utf-8")
        file_values, file_lines = parse_flat_text(text, source)
        flat.update(file_values)
        lines.update(file_lines)
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
            lines[key] = 0
    config = build_config(flat, lines, source)
    logger.debug("Loaded scenario %s (%d keys)", source, len(flat))
    return config
