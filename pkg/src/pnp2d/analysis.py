"""Error norms, order estimation, stability scans and timing tables.

The order estimator uses successive differences between dt-halved runs
sharing one spatial grid and identical initial states: with errors
e_k = ||u(dt_k) - u(dt_k / 2)|| the estimated order between consecutive
refinements is p_k = log2(e_k / e_{k+1}).  No exact solution is assumed
anywhere.

Stability verdicts are growth-based: a run is unstable if the stepper's
overflow guard fired, a solver raised, diagnostics went non-finite, or
the peak concentration grew beyond ``GROWTH_FACTOR`` times its initial
value (the dynamics are purely dissipative, so any sustained growth is
spurious).  Saturating oscillations that never overflow are still caught
this way.
"""

import concurrent.futures
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .linear_algebra import SolverError
from .pnp_model import (
    FemOperators,
    Formulation,
    InitialData,
    PhysicalParams,
    StateVector,
    diagnostics,
    initial_state,
)
from .tableaux import tableau
from .time_integration import ImexStepper, SplitStepper, Trajectory, advance

logger = logging.getLogger(__name__)

GROWTH_FACTOR = 10.0
GROWTH_LAYER_STEPS = 2
GROWTH_LAYER_SAFETY = 2.5
SPLIT_SCHEME = "split"
DEFAULT_EPSILONS = (1e-4, 1e-6, 1e-8, 1e-9, 1e-10, 1e-11)


def l2_norm(u: np.ndarray, mass) -> float:
    """Mass-weighted L2 norm sqrt(u^T B u)."""
    if not np.all(np.isfinite(u)):
        raise ValueError("l2_norm expects a finite field")
    matrix = getattr(mass, "matrix", mass)
    if matrix.shape[0] != u.shape[0]:
        raise ValueError(
            f"field has {u.shape[0]} entries, mass matrix is {matrix.shape[0]}"
        )
    return float(np.sqrt(abs(u @ (matrix @ u))))


# ---------------------------------------------------------------------------
# convergence orders
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    """Successive-difference errors and orders of one dt-refinement sweep.

    ``errors[k]`` is the distance between the runs at dt_k and dt_{k+1};
    ``orders[k]`` compares errors[k] and errors[k+1] and is None whenever
    either member is unavailable (blow-up) or exactly zero.
    """

    scheme: str
    formulation: str
    epsilon: float
    dts: list
    errors: list
    orders: list
    stable: bool
    note: str = ""
    per_species: dict = field(default_factory=dict)

    def finest_order(self):
        for value in reversed(self.orders):
            if value is not None:
                return value
        return None

    def as_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "formulation": self.formulation,
            "epsilon": self.epsilon,
            "dts": list(self.dts),
            "errors": list(self.errors),
            "orders": list(self.orders),
            "stable": self.stable,
            "note": self.note,
            "per_species": self.per_species,
        }


def _orders_from_errors(errors) -> list:
    orders = []
    for a, b in zip(errors, errors[1:]):
        usable = (
            a is not None and b is not None
            and np.isfinite(a) and np.isfinite(b) and a > 0.0 and b > 0.0
        )
        orders.append(math.log2(a / b) if usable else None)
    return orders


def richardson_orders(run, dt0: float, *, levels: int = 4, metric,
                      label=("", "", 0.0)) -> ConvergenceReport:
    """Order estimation from successive dt-halved runs.

    Parameters
    ----------
    run : callable
        ``run(dt)`` returns the final state (any object the metric
        accepts) or None to signal blow-up.
    metric : callable
        ``metric(coarse, fine) -> float`` distance between two final
        states on the shared grid.
    label : tuple
        (scheme, formulation, epsilon) echoed into the report.
    """
    if levels < 3:
        raise ValueError(f"order estimation needs at least 3 levels, got {levels}")
    if not dt0 > 0.0:
        raise ValueError(f"dt0 must be positive, got {dt0}")
    dts = [dt0 / 2**k for k in range(levels)]
    finals = [run(dt) for dt in dts]
    errors = []
    for k in range(levels - 1):
        if finals[k] is None or finals[k + 1] is None:
            errors.append(None)
        else:
            errors.append(float(metric(finals[k], finals[k + 1])))
    stable = all(state is not None for state in finals)
    note = "" if stable else "blow-up in at least one run"
    scheme, formulation, epsilon = label
    return ConvergenceReport(
        scheme=scheme,
        formulation=formulation,
        epsilon=epsilon,
        dts=dts,
        errors=errors,
        orders=_orders_from_errors(errors),
        stable=stable,
        note=note,
    )


# ---------------------------------------------------------------------------
# shared sweep configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    """Everything a study cell needs besides (scheme, formulation, epsilon)."""

    ops: FemOperators
    data: InitialData = InitialData()
    t_final: float = 0.1
    dt_over_h: float = 1.0
    d_plus: float = 1.5
    d_minus: float = 0.5
    m_plus: float = 23.0
    m_minus: float = 265.0
    neutralize: bool = False

    def params(self, epsilon: float) -> PhysicalParams:
        return PhysicalParams(
            epsilon=epsilon,
            d_plus=self.d_plus,
            d_minus=self.d_minus,
            m_plus=self.m_plus,
            m_minus=self.m_minus,
        )

    @property
    def dt(self) -> float:
        return self.dt_over_h * self.ops.h

    def n_steps(self, dt: float) -> int:
        steps = self.t_final / dt
        rounded = round(steps)
        if rounded < 1 or abs(steps - rounded) > 1e-9 * max(1.0, steps):
            raise ValueError(
                f"final time {self.t_final} is not an integer number of steps "
                f"of dt = {dt}"
            )
        return int(rounded)

    def initial(self, epsilon: float, formulation: Formulation) -> StateVector:
        return initial_state(self.data, self.params(epsilon), formulation,
                             self.ops, neutralize=self.neutralize)


def _build_stepper(scheme: str, params: PhysicalParams,
                   formulation: Formulation, ops: FemOperators):
    if scheme == SPLIT_SCHEME:
        if formulation is not Formulation.PRIMITIVE:
            raise ValueError("the split scheme runs on the primitive blocks only")
        return SplitStepper(params, ops)
    return ImexStepper(tableau(scheme), params, formulation, ops)


def _run_cell(scheme, formulation, epsilon, config, dt) -> Trajectory:
    params = config.params(epsilon)
    state = config.initial(epsilon, formulation)
    stepper = _build_stepper(scheme, params, formulation, config.ops)
    return advance(stepper, state, dt, config.n_steps(dt))


def convergence_study(scheme: str, formulation: Formulation, epsilon: float,
                      config: SweepConfig, *, levels: int = 4,
                      dt0: float | None = None) -> ConvergenceReport:
    """Richardson sweep on the concentration blocks.

    The metric is the root of the summed squared per-species L2(B)
    distances between reconstructed concentrations; per-species errors
    and orders are attached for inspection.
    """
    if levels < 3:
        raise ValueError(f"order estimation needs at least 3 levels, got {levels}")
    dt0 = config.dt if dt0 is None else dt0
    ops = config.ops
    params = config.params(epsilon)
    dts = [dt0 / 2**k for k in range(levels)]
    finals = []
    for dt in dts:
        config.n_steps(dt)  # validate divisibility before running
    for dt in dts:
        traj = _run_cell(scheme, formulation, epsilon, config, dt)
        finals.append(None if traj.blew_up else traj.state)
    species_errors = {"plus": [], "minus": []}
    combined = []
    for a, b in zip(finals, finals[1:]):
        if a is None or b is None:
            combined.append(None)
            for key in species_errors:
                species_errors[key].append(None)
            continue
        ca = a.concentrations(params)
        cb = b.concentrations(params)
        e_plus = l2_norm(ca[0] - cb[0], ops.mass)
        e_minus = l2_norm(ca[1] - cb[1], ops.mass)
        species_errors["plus"].append(e_plus)
        species_errors["minus"].append(e_minus)
        combined.append(math.hypot(e_plus, e_minus))
    stable = all(state is not None for state in finals)
    return ConvergenceReport(
        scheme=scheme,
        formulation=formulation.value,
        epsilon=epsilon,
        dts=dts,
        errors=combined,
        orders=_orders_from_errors(combined),
        stable=stable,
        note="" if stable else "blow-up in at least one run",
        per_species={
            key: {"errors": errs, "orders": _orders_from_errors(errs)}
            for key, errs in species_errors.items()
        },
    )


# ---------------------------------------------------------------------------
# stability scan
# ---------------------------------------------------------------------------

@dataclass
class StabilityCell:
    stable: bool
    reason: str = ""
    first_bad_step: int | None = None
    growth: float = 1.0
    n_steps_done: int = 0
    mass_drift: float = 0.0

    def as_dict(self) -> dict:
        return {
            "stable": self.stable,
            "reason": self.reason,
            "first_bad_step": self.first_bad_step,
            "growth": self.growth,
            "n_steps_done": self.n_steps_done,
            "mass_drift": self.mass_drift,
        }


@dataclass
class StabilityMatrix:
    cells: dict
    warnings: list

    def verdict(self, scheme: str, formulation: Formulation, epsilon: float) -> StabilityCell:
        return self.cells[(scheme, formulation.value, epsilon)]

    def as_dict(self) -> dict:
        return {
            "cells": [
                {"scheme": s, "formulation": f, "epsilon": e, **cell.as_dict()}
                for (s, f, e), cell in sorted(self.cells.items())
            ],
            "warnings": list(self.warnings),
        }


def _judge(traj: Trajectory, growth_factor: float,
           layer_allowance: float) -> StabilityCell:
    """Growth-based verdict plus species-mass drift over the stable prefix.

    The first ``GROWTH_LAYER_STEPS`` steps may raise the reference peak,
    but only up to ``layer_allowance`` times its initial value: for
    non-neutral data at tiny epsilon, the first step legitimately slaves
    one species to the other, amplifying its peak by up to the molar-mass
    ratio (an initial-layer adjustment, not an instability).  Growth
    beyond that allowance, or sustained growth past the adjusted
    reference, is an instability.

    ``mass_drift`` accumulates only over rows before the first bad step,
    so a blow-up tail does not pollute the conservation figure of the
    healthy part of the run.
    """
    series = traj.series
    peak0 = max(abs(series[0]["max_c_plus"]), abs(series[0]["max_c_minus"]),
                np.finfo(float).tiny)
    base = peak0
    mass0 = (series[0]["mass_plus"], series[0]["mass_minus"])
    growth = 1.0
    drift = 0.0
    for row in series:
        peak = max(abs(row["max_c_plus"]), abs(row["max_c_minus"]))
        if not np.isfinite(peak):
            return StabilityCell(False, "non-finite diagnostics", row["step"],
                                 float("inf"), traj.n_steps_done, drift)
        row_drift = max(
            abs(row["mass_plus"] - mass0[0]) / abs(mass0[0]),
            abs(row["mass_minus"] - mass0[1]) / abs(mass0[1]),
        )
        if row["step"] <= GROWTH_LAYER_STEPS:
            base = min(max(base, peak), peak0 * layer_allowance)
        growth = max(growth, peak / base)
        if growth > growth_factor:
            return StabilityCell(False, "growth", row["step"], growth,
                                 traj.n_steps_done, drift)
        drift = max(drift, row_drift)
    if traj.blew_up:
        return StabilityCell(False, "overflow guard", traj.blow_up_step,
                             growth, traj.n_steps_done, drift)
    return StabilityCell(True, "", None, growth, traj.n_steps_done, drift)


def judge_trajectory(traj: Trajectory, m_plus: float, m_minus: float, *,
                     growth_factor: float = GROWTH_FACTOR) -> StabilityCell:
    """Public verdict on a finished trajectory (see ``_judge``)."""
    ratio = m_plus / m_minus
    allowance = GROWTH_LAYER_SAFETY * max(ratio, 1.0 / ratio)
    return _judge(traj, growth_factor, allowance)


def stability_scan(schemes, formulations, epsilons, config: SweepConfig, *,
                   growth_factor: float = GROWTH_FACTOR,
                   max_workers: int | None = None) -> StabilityMatrix:
    """Verdict grid over (scheme, formulation, epsilon).

    Inapplicable combinations (split scheme outside the primitive
    formulation, primitive formulation at epsilon = 0) are omitted, not
    failed.  Cells run independently; solver failures inside a cell are
    verdicts, not errors.
    """
    jobs = []
    for scheme in schemes:
        for formulation in formulations:
            if scheme == SPLIT_SCHEME and formulation is not Formulation.PRIMITIVE:
                continue
            for epsilon in epsilons:
                if formulation is Formulation.PRIMITIVE and epsilon == 0.0:
                    continue
                jobs.append((scheme, formulation, epsilon))

    def _cell(job):
        scheme, formulation, epsilon = job
        try:
            traj = _run_cell(scheme, formulation, epsilon, config, config.dt)
        except SolverError as exc:
            return StabilityCell(False, f"solver failure: {exc}", None,
                                 float("nan"), 0)
        return judge_trajectory(traj, config.m_plus, config.m_minus,
                                growth_factor=growth_factor)

    if max_workers is None:
        max_workers = max(1, int(os.environ.get("PNP2D_THREADS",
                                                os.cpu_count() or 1)))
    cells = {}
    if max_workers > 1 and len(jobs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
            for job, cell in zip(jobs, pool.map(_cell, jobs)):
                cells[(job[0], job[1].value, job[2])] = cell
    else:
        for job in jobs:
            cells[(job[0], job[1].value, job[2])] = _cell(job)

    warnings = []
    for scheme in schemes:
        for formulation in formulations:
            line = sorted(
                (eps, cells[(scheme, formulation.value, eps)])
                for eps in epsilons
                if (scheme, formulation.value, eps) in cells
            )
            for (eps_small, small), (eps_large, large) in zip(line, line[1:]):
                if large.stable is False and small.stable is True:
                    message = (
                        f"{scheme}/{formulation.value}: unstable at epsilon = "
                        f"{eps_large:g} but stable at {eps_small:g}"
                    )
                    warnings.append(message)
                    logger.warning("stability monotonicity violated: %s", message)
    return StabilityMatrix(cells=cells, warnings=warnings)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def timing_report(formulations, epsilons, config: SweepConfig, *,
                  scheme: str = "I2", n_iterations: int = 25,
                  warmup: int = 2) -> list:
    """Mean wall-clock seconds per step for each (epsilon, formulation).

    Returns a list of rows ``{"epsilon": eps, "<formulation>": seconds}``
    shaped like a per-iteration cost table; absolute numbers are
    machine-specific and carry no pass/fail semantics.
    """
    if n_iterations <= 0:
        return []
    rows = []
    for epsilon in epsilons:
        row = {"epsilon": epsilon}
        for formulation in formulations:
            params = config.params(epsilon)
            state = config.initial(epsilon, formulation)
            stepper = _build_stepper(scheme, params, formulation, config.ops)
            dt = config.dt
            for _ in range(warmup):
                result = stepper.step(state, dt)
                if result.blew_up:
                    break
                state = result.state
            seconds = []
            for _ in range(n_iterations):
                tic = time.perf_counter()
                result = stepper.step(state, dt)
                seconds.append(time.perf_counter() - tic)
                if result.blew_up:
                    break
                state = result.state
            row[formulation.value] = float(np.mean(seconds))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# merge time
# ---------------------------------------------------------------------------

def merge_time(scheme: str, formulation: Formulation, epsilon: float,
               config: SweepConfig, *, threshold: float,
               t_max: float | None = None) -> float | None:
    """First time the species number densities agree to ``threshold``.

    Agreement is measured by the quasi-neutrality deficit
    ``||c+/m+ - c-/m-||_{L2(B)}``, which the dynamics drive toward the
    conserved-net-charge floor; use charge-neutral initial data so the
    floor sits below any sensible threshold.  Returns the first time at
    which the deficit is at or below the threshold, 0.0 if the initial
    state already qualifies, and None if it never happens by ``t_max``
    (or if the run blows up first).
    """
    t_max = config.t_final if t_max is None else t_max
    params = config.params(epsilon)
    state = config.initial(epsilon, formulation)
    stepper = _build_stepper(scheme, params, formulation, config.ops)
    dt = config.dt
    steps = t_max / dt
    n_steps = round(steps)
    if n_steps < 1 or abs(steps - n_steps) > 1e-9 * max(1.0, steps):
        raise ValueError(
            f"t_max {t_max} is not an integer number of steps of dt = {dt}"
        )
    if diagnostics(state, config.ops, params)["qn_deficit"] <= threshold:
        return 0.0
    for k in range(1, int(n_steps) + 1):
        result = stepper.step(state, dt)
        if result.blew_up:
            return None
        state = result.state
        if diagnostics(state, config.ops, params)["qn_deficit"] <= threshold:
            return k * dt
    return None
