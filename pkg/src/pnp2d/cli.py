"""Command-line front end: single runs, convergence, stability scans, timing.

Artifacts are flat CSV (comma separator, ``.`` decimal point, LF line
endings) plus a JSON report per command.  Every float is serialized with
17 significant digits, enough to reproduce the exact double on re-parse.
Files are written once, atomically (temp file + rename).

Exit codes: 0 success, 2 configuration error, 3 numerical blow-up in a
single run, 1 internal error.  The sweep commands (converge, scan,
timing) treat instability as data, not as a failure, and exit 0.

The optional environment variable ``PNP2D_THREADS`` caps the number of
concurrent sweep cells (default: machine parallelism).
"""

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import (
    DEFAULT_EPSILONS,
    SweepConfig,
    convergence_study,
    judge_trajectory,
    stability_scan,
    timing_report,
)
from .geometry import GeometryError, GridSpec
from .pnp_model import (
    FemOperators,
    Formulation,
    InitialData,
    PhysicalParams,
    UnsupportedConfigurationError,
    initial_state,
)
from .tableaux import TABLEAUX, TableauError, tableau
from .time_integration import ImexStepper, SplitStepper, advance

logger = logging.getLogger(__name__)

VALID_SCHEMES = tuple(sorted(TABLEAUX)) + ("split",)
VALID_FORMULATIONS = tuple(f.value for f in Formulation)

SERIES_HEADER = ("step,t,mass_plus,mass_minus,qn_deficit,min_c_plus,"
                 "min_c_minus,max_c_plus,max_c_minus,peclet_margin")
FIELDS_HEADER = "x,y,class,c_plus,c_minus,phi"
PROFILE_HEADER = "y,c_plus,c_minus,phi"


class ConfigError(ValueError):
    """Carries one message per invalid configuration field."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """One fully-validated simulation setup.

    ``radius = 0`` disables the obstacle (plain unit square).
    ``emit_fields_every``: dump the nodal fields every that many steps
    plus the final step; 0 disables field output entirely; -1 (default)
    dumps the final step only.
    """

    formulation: str = "quasi_neutral"
    scheme: str = "I2"
    epsilon: float = 1e-4
    n: int = 100
    center_x: float = 0.5
    center_y: float = 0.5
    radius: float = 0.15
    dt_over_h: float = 1.0
    t_final: float = 0.1
    d_plus: float = 1.5
    d_minus: float = 0.5
    m_plus: float = 23.0
    m_minus: float = 265.0
    v0: float = 1e-6
    sigma: float = 0.05
    x_plus_in: float = 0.4
    x_minus_in: float = 0.6
    y_in: float = 0.2
    output_dir: str = "out"
    emit_fields_every: int = -1
    profile_x: float | None = None

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def dt(self) -> float:
        return self.dt_over_h * self.h

    @property
    def n_steps(self) -> int:
        return round(self.t_final / self.dt)

    def params(self) -> PhysicalParams:
        return PhysicalParams(
            epsilon=self.epsilon,
            d_plus=self.d_plus,
            d_minus=self.d_minus,
            m_plus=self.m_plus,
            m_minus=self.m_minus,
        )

    def data(self) -> InitialData:
        return InitialData(
            v0=self.v0,
            sigma=self.sigma,
            x_plus=self.x_plus_in,
            y_plus=self.y_in,
            x_minus=self.x_minus_in,
            y_minus=self.y_in,
        )

    def obstacle(self):
        if self.radius == 0.0:
            return None
        return ((self.center_x, self.center_y), self.radius)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_FLOAT_FIELDS = {
    "epsilon", "center_x", "center_y", "radius", "dt_over_h", "t_final",
    "d_plus", "d_minus", "m_plus", "m_minus", "v0", "sigma",
    "x_plus_in", "x_minus_in", "y_in",
}
_INT_FIELDS = {"n", "emit_fields_every"}
_STR_FIELDS = {"formulation", "scheme", "output_dir"}


def _coerce(key: str, value, errors: list):
    if key in _STR_FIELDS:
        if not isinstance(value, str):
            errors.append(f"{key}: expected a string, got {value!r}")
            return None
        return value
    if key == "profile_x":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{key}: expected a number or null, got {value!r}")
            return None
        return float(value)
    if key in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{key}: expected an integer, got {value!r}")
            return None
        return int(value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors.append(f"{key}: expected a number, got {value!r}")
        return None
    return float(value)


def parse_config(mapping=None) -> RunConfig:
    """Validate a flat key-value mapping into a RunConfig.

    Unknown keys are rejected; every invalid field is reported with its
    key path in one ConfigError.  An empty or absent mapping yields the
    full defaults.
    """
    mapping = {} if mapping is None else dict(mapping)
    field_names = [f.name for f in dataclasses.fields(RunConfig)]
    errors = []
    for key in sorted(set(mapping) - set(field_names)):
        errors.append(f"unknown key: {key}")
    values = {}
    for key in field_names:
        if key in mapping:
            coerced = _coerce(key, mapping[key], errors)
            if coerced is not None or (key == "profile_x"
                                       and mapping[key] is None):
                values[key] = coerced
    config = RunConfig(**{k: v for k, v in values.items()})
    _validate(config, errors)
    if errors:
        raise ConfigError(errors)
    return config


def _validate(config: RunConfig, errors: list) -> None:
    def check(ok, key, message):
        if not ok:
            errors.append(f"{key}: {message}")

    check(config.formulation in VALID_FORMULATIONS, "formulation",
          f"unknown formulation {config.formulation!r} "
          f"(valid: {', '.join(VALID_FORMULATIONS)})")
    check(config.scheme in VALID_SCHEMES, "scheme",
          f"unknown scheme {config.scheme!r} "
          f"(valid: {', '.join(VALID_SCHEMES)})")
    check(config.epsilon >= 0.0, "epsilon",
          f"must be >= 0, got {config.epsilon}")
    if config.scheme == "split" and config.formulation != Formulation.PRIMITIVE.value:
        errors.append("scheme: the split scheme requires the primitive formulation")
    if config.formulation == Formulation.PRIMITIVE.value and config.epsilon == 0.0:
        errors.append("epsilon: the primitive formulation requires epsilon > 0")
    check(config.n >= 2, "n", f"must be >= 2, got {config.n}")
    for key in ("center_x", "center_y"):
        value = getattr(config, key)
        check(0.0 < value < 1.0, key, f"must lie inside (0, 1), got {value}")
    check(0.0 <= config.radius < 0.5, "radius",
          f"must lie in [0, 0.5), got {config.radius}")
    for key in ("dt_over_h", "t_final", "d_plus", "d_minus", "m_plus",
                "m_minus", "v0", "sigma"):
        value = getattr(config, key)
        check(value > 0.0, key, f"must be > 0, got {value}")
    for key in ("x_plus_in", "x_minus_in", "y_in"):
        value = getattr(config, key)
        check(0.0 < value < 1.0, key, f"must lie inside (0, 1), got {value}")
    check(config.emit_fields_every >= -1, "emit_fields_every",
          f"must be >= -1, got {config.emit_fields_every}")
    if config.profile_x is not None:
        check(0.0 <= config.profile_x <= 1.0, "profile_x",
              f"must lie in [0, 1], got {config.profile_x}")
    if config.dt_over_h > 0.0 and config.t_final > 0.0 and config.n >= 2:
        steps = config.t_final / config.dt
        check(
            abs(steps - round(steps)) <= 1e-9 * max(1.0, steps)
            and round(steps) >= 1,
            "t_final",
            f"must be an integer number of steps of dt = dt_over_h / n "
            f"(got {steps} steps)",
        )


def load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config file {path} is not valid JSON: {exc}"])
    if not isinstance(payload, dict):
        raise ConfigError([f"config file {path} must hold a JSON object"])
    return payload


# ---------------------------------------------------------------------------
# serialization helpers
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def _json_text(obj, indent: int = 0) -> str:
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if math.isfinite(value):
            return f"{value:.17g}"
        return json.dumps(str(value))  # "inf"/"-inf"/"nan" as strings
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f"{inner}{json.dumps(str(key))}: {_json_text(value, indent + 1)}"
            for key, value in obj.items()
        ]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not len(obj):
            return "[]"
        items = [f"{inner}{_json_text(value, indent + 1)}" for value in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    temp = path.with_name(path.name + ".tmp")
    with open(temp, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    os.replace(temp, path)


def _write_csv(path: Path, header: str, rows) -> None:
    lines = [header]
    lines.extend(",".join(_fmt(cell) for cell in row) for row in rows)
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, _json_text(obj) + "\n")


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------

def _build_ops(config: RunConfig) -> FemOperators:
    return FemOperators.build(GridSpec(config.n), obstacle=config.obstacle())


def _build_stepper(config: RunConfig, ops: FemOperators):
    params = config.params()
    if config.scheme == "split":
        return SplitStepper(params, ops)
    formulation = Formulation(config.formulation)
    return ImexStepper(tableau(config.scheme), params, formulation, ops)


def _field_rows(state, ops: FemOperators, params: PhysicalParams):
    cls = ops.classification
    node_kind = np.where(cls.internal[cls.node_of_dof], "internal", "ghost")
    c_plus, c_minus = state.concentrations(params)
    for i in range(ops.n_dofs):
        yield (ops.x[i], ops.y[i], node_kind[i], c_plus[i], c_minus[i],
               state.phi[i])


def _profile_rows(state, ops: FemOperators, params: PhysicalParams,
                  profile_x: float):
    column = np.rint(profile_x / ops.h)
    on_line = np.abs(ops.x / ops.h - column) < 0.5
    order = np.argsort(ops.y[on_line], kind="stable")
    c_plus, c_minus = state.concentrations(params)
    for i in np.flatnonzero(on_line)[order]:
        yield (ops.y[i], c_plus[i], c_minus[i], state.phi[i])


def _dump_steps(config: RunConfig) -> set:
    if config.emit_fields_every == 0:
        return set()
    if config.emit_fields_every < 0:
        return {config.n_steps}
    periodic = set(range(config.emit_fields_every, config.n_steps + 1,
                         config.emit_fields_every))
    return periodic | {config.n_steps}


def run(config: RunConfig) -> int:
    """Advance one configured trajectory and write its artifacts.

    Returns 0 for a stable run, 3 when the run blew up or was judged
    unstable; partial outputs are retained either way.
    """
    out = Path(config.output_dir)
    ops = _build_ops(config)
    params = config.params()
    formulation = Formulation(config.formulation)
    state = initial_state(config.data(), params, formulation, ops)
    stepper = _build_stepper(config, ops)
    dump_at = _dump_steps(config)

    def on_step(step, current, diag):
        if step in dump_at:
            _write_csv(out / f"fields_{step}.csv", FIELDS_HEADER,
                       _field_rows(current, ops, params))

    traj = advance(stepper, state, config.dt, config.n_steps, on_step=on_step)
    cell = judge_trajectory(traj, config.m_plus, config.m_minus)
    verdict = "stable" if cell.stable else "unstable"

    series_keys = SERIES_HEADER.split(",")
    _write_csv(out / "series.csv", SERIES_HEADER,
               ([row[key] for key in series_keys] for row in traj.series[1:]))
    if config.profile_x is not None:
        _write_csv(out / "profile.csv", PROFILE_HEADER,
                   _profile_rows(traj.state, ops, params, config.profile_x))
    report = {
        "config": config.as_dict(),
        "verdict": verdict,
        "reason": cell.reason,
        "first_bad_step": cell.first_bad_step,
        "growth": cell.growth,
        "mass_drift": cell.mass_drift,
        "blew_up": traj.blew_up,
        "blow_up_step": traj.blow_up_step,
        "n_steps_done": traj.n_steps_done,
        "initial": traj.series[0],
        "final": traj.series[-1],
        "timings": {
            "wall_seconds": traj.wall_seconds,
            "mean_step_seconds": (traj.wall_seconds / len(traj.step_seconds)
                                  if traj.step_seconds else 0.0),
            "n_steps": len(traj.step_seconds),
        },
        "stats": traj.stats,
    }
    _write_json(out / "report.json", report)
    logger.info("run finished: verdict=%s steps=%d wall=%.3gs", verdict,
                traj.n_steps_done, traj.wall_seconds)
    return 0 if cell.stable else 3


# ---------------------------------------------------------------------------
# sweep commands
# ---------------------------------------------------------------------------

def _sweep_config(config: RunConfig, ops: FemOperators, *,
                  neutralize: bool = False) -> SweepConfig:
    return SweepConfig(
        ops=ops,
        data=config.data(),
        t_final=config.t_final,
        dt_over_h=config.dt_over_h,
        d_plus=config.d_plus,
        d_minus=config.d_minus,
        m_plus=config.m_plus,
        m_minus=config.m_minus,
        neutralize=neutralize,
    )


def _parse_floats(text: str, key: str):
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError([f"{key}: expected comma-separated numbers, got {text!r}"])


def cmd_converge(config: RunConfig, epsilons, levels: int) -> int:
    ops = _build_ops(config)
    sweep = _sweep_config(config, ops)
    formulation = Formulation(config.formulation)
    reports = [
        convergence_study(config.scheme, formulation, eps, sweep, levels=levels)
        for eps in epsilons
    ]
    out = Path(config.output_dir)
    rows = []
    for report in reports:
        for k, error in enumerate(report.errors):
            order = report.orders[k - 1] if k >= 1 else None
            rows.append((
                report.scheme, report.formulation, report.epsilon,
                report.dts[k], "" if error is None else error,
                "" if order is None else order,
            ))
    _write_csv(out / "converge.csv",
               "scheme,formulation,epsilon,dt,error,order_vs_previous", rows)
    _write_json(out / "converge_report.json", {
        "config": config.as_dict(),
        "levels": levels,
        "epsilons": list(epsilons),
        "reports": [report.as_dict() for report in reports],
    })
    for report in reports:
        finest = report.finest_order()
        logger.info("converge eps=%g: stable=%s finest order=%s",
                    report.epsilon, report.stable,
                    "n/a" if finest is None else f"{finest:.3f}")
    return 0


def cmd_scan(config: RunConfig, schemes, formulations, epsilons) -> int:
    ops = _build_ops(config)
    sweep = _sweep_config(config, ops)
    matrix = stability_scan(schemes, formulations, epsilons, sweep)
    out = Path(config.output_dir)
    rows = [
        (scheme, formulation, epsilon, cell.stable, cell.reason,
         "" if cell.first_bad_step is None else cell.first_bad_step,
         cell.growth, cell.mass_drift, cell.n_steps_done)
        for (scheme, formulation, epsilon), cell in sorted(matrix.cells.items())
    ]
    _write_csv(out / "scan.csv",
               "scheme,formulation,epsilon,stable,reason,first_bad_step,"
               "growth,mass_drift,n_steps_done", rows)
    _write_json(out / "scan_report.json", {
        "config": config.as_dict(),
        **matrix.as_dict(),
    })
    for warning in matrix.warnings:
        logger.warning("%s", warning)
    return 0


def cmd_timing(config: RunConfig, epsilons, iterations: int) -> int:
    if config.scheme == "split":
        raise ConfigError(
            ["scheme: timing compares both formulations, so it needs an "
             "IMEX scheme (I1..I6)"])
    ops = _build_ops(config)
    sweep = _sweep_config(config, ops)
    formulations = [Formulation.PRIMITIVE, Formulation.QUASI_NEUTRAL]
    rows = timing_report(formulations, epsilons, sweep, scheme=config.scheme,
                         n_iterations=iterations)
    out = Path(config.output_dir)
    _write_csv(out / "timing.csv", "epsilon,primitive,quasi_neutral",
               [(row["epsilon"], row["primitive"], row["quasi_neutral"])
                for row in rows])
    ratios = [row["quasi_neutral"] / row["primitive"] for row in rows]
    warnings = []
    if len(ratios) >= 2 and ratios[-1] <= ratios[0]:
        warnings.append(
            "expected cost trend not observed: quasi-neutral per-step cost "
            "did not grow relative to primitive as epsilon shrank "
            "(machine-specific, informational only)"
        )
    _write_json(out / "timing_report.json", {
        "config": config.as_dict(),
        "iterations": iterations,
        "rows": rows,
        "cost_ratios_quasi_neutral_over_primitive": ratios,
        "warnings": warnings,
    })
    for warning in warnings:
        logger.warning("%s", warning)
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="JSON file with RunConfig keys (flags override)")
    flag = parser.add_argument
    flag("--formulation", choices=VALID_FORMULATIONS)
    flag("--scheme", help=f"one of {', '.join(VALID_SCHEMES)}")
    flag("--epsilon", type=float)
    flag("--n", type=int, help="grid cells per side")
    flag("--center-x", type=float, dest="center_x")
    flag("--center-y", type=float, dest="center_y")
    flag("--radius", type=float, help="obstacle radius (0 = no obstacle)")
    flag("--dt-over-h", type=float, dest="dt_over_h")
    flag("--t-final", type=float, dest="t_final")
    flag("--d-plus", type=float, dest="d_plus")
    flag("--d-minus", type=float, dest="d_minus")
    flag("--m-plus", type=float, dest="m_plus")
    flag("--m-minus", type=float, dest="m_minus")
    flag("--v0", type=float)
    flag("--sigma", type=float)
    flag("--x-plus-in", type=float, dest="x_plus_in")
    flag("--x-minus-in", type=float, dest="x_minus_in")
    flag("--y-in", type=float, dest="y_in")
    flag("--output-dir", dest="output_dir")
    flag("--emit-fields-every", type=int, dest="emit_fields_every")
    flag("--profile-x", type=float, dest="profile_x",
         help="emit profile.csv along the grid line nearest this x")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    mapping = {}
    if args.config:
        mapping.update(load_config_file(args.config))
    for field in dataclasses.fields(RunConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            mapping[field.name] = value
    return parse_config(mapping)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnp2d",
        description=(
            "Two-species drift-diffusion solver on the unit square with an "
            "embedded circular obstacle."
        ),
        epilog="Environment: PNP2D_THREADS caps concurrent sweep cells.",
    )
    parser.add_argument("--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="advance one trajectory, write artifacts")
    _add_config_flags(p_run)

    p_conv = sub.add_parser("converge", help="dt-refinement order study")
    _add_config_flags(p_conv)
    p_conv.add_argument("--epsilons", default="1e-4,1e-6,1e-9,1e-11",
                        help="comma-separated list")
    p_conv.add_argument("--levels", type=int, default=4)

    p_scan = sub.add_parser("scan", help="stability verdict matrix")
    _add_config_flags(p_scan)
    p_scan.add_argument("--schemes", default="I2,split")
    p_scan.add_argument("--formulations", default=",".join(VALID_FORMULATIONS))
    p_scan.add_argument("--epsilons",
                        default=",".join(f"{e:g}" for e in DEFAULT_EPSILONS))

    p_time = sub.add_parser("timing", help="per-step cost table")
    _add_config_flags(p_time)
    p_time.add_argument("--epsilons", default="1e-4,1e-6,1e-9")
    p_time.add_argument("--iterations", type=int, default=25)
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if args.command == "run":
        return run(config)
    if args.command == "converge":
        if args.levels < 3:
            raise ConfigError(["levels: must be >= 3 for order estimation"])
        return cmd_converge(config, _parse_floats(args.epsilons, "epsilons"),
                            args.levels)
    if args.command == "scan":
        schemes = [tok for tok in args.schemes.split(",") if tok.strip()]
        bad = [tok for tok in schemes if tok not in VALID_SCHEMES]
        if bad:
            raise ConfigError(
                [f"schemes: unknown scheme {tok!r} "
                 f"(valid: {', '.join(VALID_SCHEMES)})" for tok in bad])
        names = [tok for tok in args.formulations.split(",") if tok.strip()]
        bad = [tok for tok in names if tok not in VALID_FORMULATIONS]
        if bad:
            raise ConfigError(
                [f"formulations: unknown formulation {tok!r} "
                 f"(valid: {', '.join(VALID_FORMULATIONS)})" for tok in bad])
        formulations = [Formulation(tok) for tok in names]
        return cmd_scan(config, schemes, formulations,
                        _parse_floats(args.epsilons, "epsilons"))
    if args.command == "timing":
        if args.iterations < 0:
            raise ConfigError(["iterations: must be >= 0"])
        return cmd_timing(config, _parse_floats(args.epsilons, "epsilons"),
                          args.iterations)
    raise ConfigError([f"unknown command {args.command!r}"])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _dispatch(args)
    except ConfigError as exc:
        for message in exc.messages:
            print(f"config error: {message}", file=sys.stderr)
        return 2
    except (GeometryError, TableauError, UnsupportedConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
