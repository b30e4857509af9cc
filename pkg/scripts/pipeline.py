#!/usr/bin/env python3
"""
Pipeline
========

Builds rates, bases and modal models from a ScenarioConfig and runs the four
commands behind run.py:

    simulate      uncontrolled characteristic march
    nullcontrol   explicit null control + verification
    lq            static and dynamic LQ per mode + turnpike diagnostics
    sweep         one row per value of T, a0/eps, N or K
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np

from demographics import (FertilityRate, MortalityRate, load_rate_table, lotka_root,
                          normalize_fertility, reproduction_number, survival)
from errors import NoRootError, PopulationControlError, PreconditionError
from lqr import (OptimalTriple, closed_loop_rate, gradient_check, modal_systems, solve_are,
                 solve_dynamic_lq, solve_static_lq)
from nullcontrol import (OBSTRUCTION_CITATION, birth_null_control, distributed_null_control,
                         epsilon_limit_study, short_horizon_obstruction, verify_null_control)
from output_generator import OutputGenerator
from scenario_config import ScenarioConfig
from spectral import NeumannBasis, project, reconstruct
from transport import (AgeGrid, ModalModel, ModalState, evolve_uncontrolled, renewal_trace,
                       stack_states)
from turnpike import (DeviationSeries, DissipativityCheck, TurnpikeReport, combine_deviations,
                      deviation_curves, dissipativity_check, turnpike_report)

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["variable", "value", "status", "plateau", "nu_left", "nu_right",
                 "integral_measure", "residual", "pairing_gap", "state_gap"]


@dataclass
class RunResult:
    command: str
    files: List[str] = field(default_factory=list)
    summary: List[str] = field(default_factory=list)
    exit_code: int = 0
    message: str = ""


# ================================================================
# BUILDERS
# ================================================================

def build_rates(config: ScenarioConfig) -> Tuple[MortalityRate, FertilityRate]:
    """Mortality and fertility, fertility rescaled to the reproduction target."""
    demo = config.demographics
    m, f = demo.mortality, demo.fertility
    if m.kind == "tabulated":
        ages, values = load_rate_table(m.table)
        mu = MortalityRate("tabulated", demo.A, ages=ages, values=values)
    else:
        mu = MortalityRate(m.kind, demo.A, c=m.c, rate=m.rate)
    if f.kind == "tabulated":
        ages, values = load_rate_table(f.table)
        beta = FertilityRate("tabulated", demo.A, support_floor=f.support_floor, ages=ages, values=values)
    else:
        beta = FertilityRate(f.kind, demo.A, scale=f.scale, rate=f.rate, support_floor=f.support_floor)
    if demo.reproduction_target is not None:
        beta = normalize_fertility(beta, mu, demo.reproduction_target)
    return mu, beta


def build_basis(config: ScenarioConfig, modes: Optional[int] = None) -> NeumannBasis:
    disc = config.discretization
    return NeumannBasis(config.demographics.L, modes or disc.modes, disc.space_points)


def build_model(config: ScenarioConfig, mu: MortalityRate, beta: FertilityRate,
                basis: NeumannBasis, n_cells: Optional[int] = None) -> ModalModel:
    grid = AgeGrid(config.demographics.A, n_cells or config.discretization.age_cells)
    return ModalModel(grid, mu, beta, basis.eigenvalues)


def age_profile(config: ScenarioConfig, grid: AgeGrid, mu: MortalityRate) -> np.ndarray:
    init = config.problem.initial
    a = grid.ages
    if init.kind == "zero":
        return np.zeros_like(a)
    if init.kind == "constant":
        return np.full_like(a, init.amplitude)
    if init.kind == "indicator":
        return np.where((a > init.lo + 1e-12) & (a <= init.hi + 1e-12), init.amplitude, 0.0)
    if init.kind == "survival":
        return init.amplitude * survival(mu, a)
    return init.amplitude * np.exp(-((a - init.center) / init.width) ** 2)


def initial_field(config: ScenarioConfig, model: ModalModel, basis: NeumannBasis) -> np.ndarray:
    """y0(x, a) = g(x) f(a) projected onto the basis: (K, N_a + 1)."""
    init = config.problem.initial
    f = age_profile(config, model.grid, model.mortality)
    if init.spatial == "uniform":
        coeffs = project(np.ones(basis.n_x), basis)
    elif init.spatial == "cosine":
        coeffs = project(1.0 + 0.5 * np.cos(np.pi * basis.x / basis.L), basis)
    else:
        coeffs = np.zeros(basis.K)
        if init.mode < basis.K:
            coeffs[init.mode] = 1.0
        else:
            logger.warning("Initial mode %d not among the %d computed modes; y0 = 0", init.mode, basis.K)
    return stack_states([ModalState(int(k), c * f, model.grid) for k, c in zip(model.modes, coeffs)])


def target_field(config: ScenarioConfig, grid: AgeGrid, mu: MortalityRate, basis: NeumannBasis) -> np.ndarray:
    """y_d per mode; the survival target is spatially uniform (mode 0 only)."""
    target = config.problem.target
    out = np.zeros((basis.K, grid.n_nodes))
    if target.kind == "survival":
        out[0] = target.level * np.sqrt(basis.L) * survival(mu, grid.ages)
    return out


def parallel_map(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """Ordered map; threads when workers > 1."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _probe_index(config: ScenarioConfig, basis: NeumannBasis) -> int:
    x = config.output.probe_x
    x = basis.L / 2.0 if x is None else x
    return int(np.argmin(np.abs(basis.x - x)))


def _generator(config: ScenarioConfig) -> OutputGenerator:
    return OutputGenerator(config.output.directory, config.resolved_lines(), config.output.formats)


# ================================================================
# SIMULATE
# ================================================================

def cmd_simulate(config: ScenarioConfig) -> RunResult:
    mu, beta = build_rates(config)
    basis = build_basis(config)
    model = build_model(config, mu, beta, basis)
    y0 = initial_field(config, model, basis)
    trajectory = evolve_uncontrolled(y0, config.discretization.horizon, model)
    trace = renewal_trace(trajectory)
    mass = trajectory.total_mass()
    grid = model.grid

    out = _generator(config)
    out.write_csv("trajectory.csv", ["t", "mode", "a", "y"],
                  ((t, int(k), a, trajectory.values[ki, n, i])
                   for n, t in enumerate(trajectory.times)
                   for ki, k in enumerate(model.modes)
                   for i, a in enumerate(grid.ages)))
    out.write_csv("renewal.csv", ["t", "mode", "b"],
                  ((t, int(k), trace.values[ki, n])
                   for n, t in enumerate(trace.times) for ki, k in enumerate(model.modes)))
    out.write_heatmap_svg("state_mode0.svg", grid.ages, trajectory.times, trajectory.values[0],
                          "Uncontrolled state, mode 0")
    out.write_series_svg("renewal.svg", trace.times,
                         {f"mode {int(k)}": trace.values[ki] for ki, k in enumerate(model.modes)},
                         "Renewal trace b(t)", ylabel="b")

    R = reproduction_number(beta, mu)
    try:
        root = f"{lotka_root(beta, mu):.10g}"
    except NoRootError:
        root = "none"
    norms = trajectory.norms()
    summary = [
        "command = simulate",
        f"horizon = {trajectory.times[-1]:.10g}",
        f"steps = {trajectory.times.size - 1}",
        f"modes = {model.K}",
        f"reproduction_number = {R:.10g}",
        f"lotka_root = {root}",
        f"initial_norm = {norms[0]:.10g}",
        f"final_norm = {norms[-1]:.10g}",
    ]
    for ki, k in enumerate(model.modes):
        summary.append(f"mass_mode_{int(k)} = {mass[ki, 0]:.10g} -> {mass[ki, -1]:.10g}")
    out.write_summary("summary.txt", summary)
    return RunResult("simulate", out.generated_files, summary)


# ================================================================
# NULL CONTROL
# ================================================================

def cmd_nullcontrol(config: ScenarioConfig) -> RunResult:
    mu, beta = build_rates(config)
    basis = build_basis(config)
    model = build_model(config, mu, beta, basis)
    y0 = initial_field(config, model, basis)
    problem = config.problem
    T = config.discretization.horizon
    A = model.grid.A

    if problem.control == "age_band":
        if T <= A - problem.a0 + 1e-12:
            witness_norm = None
            if T < A - problem.a0 - 1e-12:
                witness_norm = short_horizon_obstruction(y0, problem.a0, T, model).norm
            raise PreconditionError(
                f"Horizon T={T} <= A - a0 = {A - problem.a0:.6g}: ages above T + a0 are out of reach",
                citation=OBSTRUCTION_CITATION, witness_norm=witness_norm)
        control = distributed_null_control(y0, problem.a0, T, model, basis=basis, omega=problem.omega)
    else:
        control = birth_null_control(y0, T, model, basis=basis, omega=problem.omega)

    report = verify_null_control(y0, control, model)
    out = _generator(config)
    grid = model.grid
    if control.support == "birth":
        out.write_csv("control.csv", ["t", "mode", "v"],
                      ((t, int(k), control.values[ki, n])
                       for n, t in enumerate(control.times) for ki, k in enumerate(model.modes)))
        out.write_series_svg("control.svg", control.times,
                             {f"mode {int(k)}": control.values[ki] for ki, k in enumerate(model.modes)},
                             "Birth null control", ylabel="v")
    else:
        band = grid.ages <= problem.a0 + 1e-12
        out.write_csv("control.csv", ["t", "mode", "a", "v"],
                      ((t, int(k), a, control.values[ki, n, i])
                       for n, t in enumerate(control.times)
                       for ki, k in enumerate(model.modes)
                       for i, a in enumerate(grid.ages) if band[i]))
        out.write_heatmap_svg("control_mode0.svg", grid.ages[band], control.times,
                              control.values[0][:, band], "Age-band null control, mode 0")

    initial_norm = grid.norm(y0)
    relative = report.final_norm / initial_norm if initial_norm > 0 else 0.0
    summary = ["command = nullcontrol"] + report.to_lines() + [
        f"initial_norm = {initial_norm:.10g}",
        f"relative_residual = {relative:.6e}",
        f"tolerance = {config.solver.null_tolerance:.6e}",
    ]
    out.write_summary("summary.txt", summary)
    result = RunResult("nullcontrol", out.generated_files, summary)
    if relative > config.solver.null_tolerance:
        result.exit_code = 3
        result.message = f"final-state residual {relative:.3e} exceeds tolerance {config.solver.null_tolerance:.3e}"
    return result


# ================================================================
# LQ AND TURNPIKE
# ================================================================

@dataclass
class ModeOutcome:
    mode: int
    static: Tuple[np.ndarray, np.ndarray, np.ndarray]
    triple: OptimalTriple
    deviation: DeviationSeries
    closed_loop_rate: float
    gradient_gap: float
    dissipativity: Optional[DissipativityCheck] = None


@dataclass
class LQOutcome:
    basis: NeumannBasis
    grid: AgeGrid
    modes: List[ModeOutcome]
    deviation: DeviationSeries
    report: TurnpikeReport
    initial_gap: float
    terminal_gap: float


def run_lq_core(config: ScenarioConfig, with_rates: bool = True) -> LQOutcome:
    """
    Static and dynamic LQ for every mode plus the combined turnpike report.

    With with_rates the closed-loop rate of every mode is computed from the
    ARE and the adjoint gradient is checked along directions drawn from a
    generator seeded with (seed, mode).
    """
    mu, beta = build_rates(config)
    basis = build_basis(config)
    disc = config.discretization
    model = build_model(config, mu, beta, basis, n_cells=disc.lq_age_cells)
    y0 = initial_field(config, model, basis)
    y_d = target_field(config, model.grid, mu, basis)
    T = disc.horizon
    n_steps = max(1, int(round(T / disc.lq_time_step)))
    solver = config.solver
    terminal = config.problem.terminal
    systems = modal_systems(model, config.problem.weight)

    def solve_mode(index: int) -> ModeOutcome:
        sys = systems[index]
        static = solve_static_lq(sys, y_d[index])
        triple = solve_dynamic_lq(sys, y0[index], y_d[index], T, n_steps, terminal)
        rate = gap = float("nan")
        check = None
        if with_rates:
            are = solve_are(sys, tol=solver.are_tolerance, max_iterations=solver.newton_max_iterations,
                            max_step=solver.riccati_max_step)
            rate = closed_loop_rate(sys, are.E)
            rng = np.random.default_rng([config.seed, index])
            gap = gradient_check(sys, y0[index], T, n_steps, rng, y_d[index], terminal)
            check = dissipativity_check(sys, y0[index], static, T, y_d=y_d[index])
        return ModeOutcome(index, static, triple, deviation_curves(triple, static), rate, gap, check)

    outcomes = parallel_map(solve_mode, range(basis.K), solver.workers)
    combined = combine_deviations([o.deviation for o in outcomes])
    initial_gap = float(np.sqrt(sum(np.sum((y0[o.mode] - o.static[0]) ** 2) for o in outcomes)))
    terminal_gap = float(np.sqrt(sum(np.sum((o.triple.adjoints[-1] - o.static[2]) ** 2) for o in outcomes)))
    report = turnpike_report(combined, initial_gap, terminal_gap)
    return LQOutcome(basis, model.grid, outcomes, combined, report, initial_gap, terminal_gap)


def cmd_lq(config: ScenarioConfig) -> RunResult:
    outcome = run_lq_core(config)
    basis, grid = outcome.basis, outcome.grid
    times = outcome.modes[0].triple.times
    ix = _probe_index(config, basis)
    x_probe = basis.x[ix]

    state_coeffs = np.stack([o.triple.states for o in outcome.modes], axis=-1)
    control_coeffs = np.stack([o.triple.controls[:, 0] for o in outcome.modes], axis=-1)
    state = reconstruct(state_coeffs, basis)[..., ix]
    control = reconstruct(control_coeffs, basis)[..., ix]

    report = outcome.report
    envelope = np.full(times.size, np.nan)
    if report.envelope is not None:
        env = report.envelope
        envelope = env.C * (outcome.initial_gap * np.exp(-env.nu * times)
                            + outcome.terminal_gap * np.exp(-env.nu * (times[-1] - times)))
    dev = outcome.deviation

    out = _generator(config)
    out.write_csv("lq_state.csv", ["t", "a", "y"],
                  ((t, a, state[n, i]) for n, t in enumerate(times) for i, a in enumerate(grid.ages)))
    out.write_csv("lq_control.csv", ["t", "v"], zip(times, control))
    out.write_csv("deviation.csv", ["t", "state", "control", "adjoint", "total", "envelope"],
                  zip(times, dev.state, dev.control, dev.adjoint, dev.total, envelope))
    out.write_heatmap_svg("lq_state.svg", grid.ages, times, state,
                          f"Optimal state at x = {x_probe:.3g}")
    out.write_series_svg("lq_control.svg", times, {"v": control},
                         f"Optimal birth control at x = {x_probe:.3g}", ylabel="v")
    out.write_series_svg("deviation.svg", times, {"d(t)": dev.total}, "Distance to the static optimum",
                         ylabel="d", log_scale=True)

    summary = ["command = lq", f"horizon = {times[-1]:.10g}", f"time_steps = {times.size - 1}",
               f"probe_x = {x_probe:.10g}"] + report.to_lines()
    for o in outcome.modes:
        summary.append(f"closed_loop_rate_mode_{o.mode} = {o.closed_loop_rate:.6e}")
        summary.append(f"kkt_residual_mode_{o.mode} = {o.triple.kkt_residual:.3e}")
        summary.append(f"gradient_check_mode_{o.mode} = {o.gradient_gap:.3e}")
        check = o.dissipativity
        if check is not None:
            summary.append(f"strictly_dissipative_mode_{o.mode} = {str(check.strictly_dissipative).lower()}")
            summary.append(f"min_slack_literal_mode_{o.mode} = {check.min_slack_literal:.6e}")
    out.write_summary("summary.txt", summary)
    return RunResult("lq", out.generated_files, summary)


# ================================================================
# SWEEP
# ================================================================

def _sweep_row(config: ScenarioConfig, variable: str, value: float) -> List:
    row = {name: float("nan") for name in SWEEP_COLUMNS}
    row.update(variable=variable, value=value, status="ok")
    cfg = config.model_copy(deep=True)
    try:
        if variable in ("T", "K"):
            if variable == "T":
                cfg.discretization.horizon = value
            else:
                cfg.discretization.modes = int(value)
            report = run_lq_core(cfg, with_rates=False).report
            row.update(plateau=report.plateau, nu_left=report.left.nu, nu_right=report.right.nu,
                       integral_measure=report.integral_measure, status=report.verdict)
        elif variable == "N":
            cfg.discretization.age_cells = int(value)
            mu, beta = build_rates(cfg)
            basis = build_basis(cfg)
            model = build_model(cfg, mu, beta, basis)
            y0 = initial_field(cfg, model, basis)
            control = birth_null_control(y0, cfg.discretization.horizon, model)
            row["residual"] = verify_null_control(y0, control, model).final_norm
        else:
            mu, beta = build_rates(cfg)
            basis = build_basis(cfg)
            model = build_model(cfg, mu, beta, basis)
            y0 = initial_field(cfg, model, basis)
            study = epsilon_limit_study(y0, [value], cfg.discretization.horizon, model,
                                        sample_times=cfg.problem.sample_times)
            if study.rows:
                r = study.rows[0]
                row.update(pairing_gap=r.pairing_gap, state_gap=max(r.state_gaps.values()))
            else:
                row["status"] = "skipped: " + "; ".join(study.notes)
    except PopulationControlError as exc:
        row["status"] = f"error: {exc}".replace(",", ";").replace("\n", " ")
        logger.warning("Sweep %s=%g failed: %s", variable, value, exc)
    return [row[name] for name in SWEEP_COLUMNS]


def cmd_sweep(config: ScenarioConfig) -> RunResult:
    variable = config.sweep.variable
    values = list(config.sweep.values)
    if not values and variable == "eps":
        values = list(config.problem.epsilons)
    rows = [_sweep_row(config, variable, v) for v in values]
    out = _generator(config)
    out.write_csv("sweep.csv", SWEEP_COLUMNS, rows)

    summary = ["command = sweep", f"variable = {variable}", f"points = {len(rows)}"]
    measures = np.array([r[SWEEP_COLUMNS.index("integral_measure")] for r in rows], dtype=float)
    finite = measures[np.isfinite(measures)]
    if finite.size:
        ratio = float(np.max(finite) / np.min(finite)) if np.min(finite) > 0 else float("inf")
        summary += [f"integral_measure_max = {np.max(finite):.6e}", f"integral_measure_ratio = {ratio:.6e}"]
    failed = sum(1 for r in rows if str(r[2]).startswith("error"))
    summary.append(f"failed_points = {failed}")
    out.write_summary("summary.txt", summary)
    return RunResult("sweep", out.generated_files, summary)


COMMANDS = {
    "simulate": cmd_simulate,
    "nullcontrol": cmd_nullcontrol,
    "lq": cmd_lq,
    "sweep": cmd_sweep,
}
