"""
Command-line front end.

    taperedtrap <command> [--config PATH] [--seed N] [--out PATH]
                          [--format {csv,json}] [-v]

Exit codes: 0 success, 2 configuration error, 3 physics or solver error.
Every run also writes <out>.provenance.json next to its results.
"""

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from taperedtrap import constants as C
from taperedtrap.analysis import (
    MIN_SPECTRUM_SAMPLES,
    axis_rotation_scan,
    balanced_common_voltage,
    compensate,
    fit_eq1,
    fit_linear_epsilon,
    power_spectrum,
    scan_axial,
)
from taperedtrap.config import (
    ConfigError,
    RunConfig,
    build_analytic_model,
    build_drive,
    build_forces,
    build_geometry,
    build_ion,
    load_config,
)
from taperedtrap.dynamics import (
    IonState,
    excitation_sweep,
    micromotion_start,
    simulate,
    thermal_state,
    write_trajectory_csv,
)
from taperedtrap.fieldsolve import (
    CollocationSolver,
    capacitance_matrix,
    load_mesh,
    read_basis_cache,
    solved_field,
    write_basis_cache,
)
from taperedtrap.meshgen import tapered_trap_mesh
from taperedtrap.reports import (
    SIDEBAND_HEADER,
    fit_report,
    fit_report_text,
    provenance_record,
    scan_to_dict,
    sideband_rows,
    write_json,
    write_provenance,
    write_scan,
    write_spectrum,
    write_table_csv,
)
from taperedtrap.sidebands import lamb_dicke, sideband_spectrum, zeeman_lines
from taperedtrap.trapmodel import (
    CalibrationError,
    DomainError,
    EffectiveFieldModel,
    FieldModel,
    IonSpecies,
    TaperedTrapError,
    calibrate_axis_rotation,
    calibrate_drive,
    equilibrium_position,
    mathieu_parameters,
    pseudopotential,
    secular_frequencies,
)

logger = logging.getLogger(__name__)

TWO_PI = 2 * math.pi

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PHYSICS = 3


def _sidecar(out: Path, tag: str) -> Path:
    """scan.csv -> scan.<tag>"""
    return out.with_name(f"{out.stem}.{tag}")


def _model(cfg: RunConfig, ion: IonSpecies, kind: str) -> FieldModel:
    if kind == "analytic":
        return build_analytic_model(cfg, ion)
    if kind == "effective":
        return EffectiveFieldModel(build_analytic_model(cfg, ion), ion)
    if cfg.field.cache is None:
        raise ConfigError("the solved model needs a basis cache", "field.cache")
    bases = read_basis_cache(cfg.field.cache)
    geometry = build_geometry(cfg)
    drive = build_drive(cfg)
    if cfg.calibration.enabled:
        drive = calibrate_drive(
            geometry, ion, cfg.calibration.radial_frequency, cfg.calibration.axial_frequency,
            template=drive, model_factory=lambda g, d: solved_field(bases, d, g))
    return solved_field(bases, drive, geometry)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def pseudo_map_cmd(cfg: RunConfig, out: Path, fmt: str) -> List[Path]:
    ion = build_ion(cfg)
    model = build_analytic_model(cfg, ion)
    m = cfg.map
    xs = np.linspace(m.x_min, m.x_max, m.nx)
    zs = np.linspace(m.z_min, m.z_max, m.nz)
    grid = np.full((len(zs), len(xs)), np.nan)
    for i, z in enumerate(zs):
        for j, x in enumerate(xs):
            r = (float(x), 0.0, float(z))
            if not model.contains(r):
                continue
            try:
                grid[i, j] = pseudopotential(model, ion, r) / C.ELEMENTARY_CHARGE
            except DomainError:
                pass
    logger.info("pseudopotential map: %d x %d points, %d outside the trap",
                len(xs), len(zs), int(np.isnan(grid).sum()))
    if fmt == "json":
        return [write_json(out, {"x_m": xs, "z_m": zs, "phi_eff_eV": grid})]
    rows = ((x, z, grid[i, j]) for i, z in enumerate(zs) for j, x in enumerate(xs))
    return [write_table_csv(out, ["x_m", "z_m", "phi_eff_eV"], rows)]


def simulate_cmd(cfg: RunConfig, out: Path, fmt: str) -> List[Path]:
    ion = build_ion(cfg)
    s = cfg.sim
    model = _model(cfg, ion, s.model)
    position = np.array([s.x0, s.y0, s.z0])
    if s.start == "thermal":
        rng = np.random.default_rng([cfg.run.seed, 1])
        initial = thermal_state(ion, s.temperature, position, rng)
    elif s.start == "micromotion":
        initial = micromotion_start(model, ion, equilibrium_position(model, ion, position))
    else:
        initial = IonState.at_rest(position)
    record = simulate(model, ion, initial, s.duration, s.dt, build_forces(cfg), s.sample_stride)
    if record.escaped:
        logger.warning("ion left the trap at t = %.6e s", record.times[-1])
    outputs: List[Path] = []
    if len(record.times) >= MIN_SPECTRUM_SAMPLES and not record.escaped:
        for axis in "xyz":
            outputs.append(write_spectrum(power_spectrum(record, axis),
                                          _sidecar(out, f"spectrum_{axis}.{fmt}"), fmt))
    else:
        logger.info("record too short or escaped, no spectra written")
    if fmt == "json":
        return [write_json(out, {
            "metadata": record.metadata,
            "escaped": record.escaped,
            "escape_reason": record.escape_reason,
            "t": record.times,
            "position_m": record.positions,
            "velocity_m_per_s": record.velocities,
        })] + outputs
    return [write_trajectory_csv(record, out)] + outputs


def scan_axial_cmd(cfg: RunConfig, out: Path, fmt: str) -> List[Path]:
    ion = build_ion(cfg)
    model = build_analytic_model(cfg, ion)
    s = cfg.scan
    z = np.linspace(s.z_start, s.z_stop, s.points)
    scan = scan_axial(model, ion, z, constant_axial=s.axial_frequency, method=s.method,
                      record_time=s.record_time, workers=s.workers)
    outputs = [write_scan(scan, out, fmt)]
    report = fit_report(scan, fit_eq1(scan), fit_linear_epsilon(scan))
    text_path = _sidecar(out, "fit.txt")
    text_path.write_text(fit_report_text(report), encoding="utf-8")
    outputs += [text_path, write_json(_sidecar(out, "fit.json"), report)]
    logger.info("taper fit: p = %.5g 1/m, largest residual %.2e", report["p_per_m"],
                report["max_relative_residual"])
    return outputs


def sweep_cmd(cfg: RunConfig, out: Path, fmt: str) -> List[Path]:
    ion = build_ion(cfg)
    s = cfg.sweep
    model: FieldModel = build_analytic_model(cfg, ion)
    if s.model == "effective":
        model = EffectiveFieldModel(model, ion)
    forces = build_forces(cfg)
    if forces.mod_force_amp == 0:
        logger.warning("forces.mod_force_amp is zero; the sweep will show no response")
    up = TWO_PI * np.linspace(s.f_start, s.f_stop, s.points)
    directions = ("down", "up") if s.direction == "both" else (s.direction,)
    sweeps = {}
    for direction in directions:
        freqs = np.sort(up) if direction == "up" else np.sort(up)[::-1]
        sweeps[direction] = excitation_sweep(model, ion, forces, freqs, direction,
                                             s.settle_time, s.measure_time)
    if fmt == "json":
        return [write_json(out, {d: scan_to_dict(scan) for d, scan in sweeps.items()})]
    rows = []
    for direction, scan in sweeps.items():
        rows += [[direction] + row for row in scan.rows()]
    return [write_table_csv(out, ["direction", "f_mod_Hz", "amp_x_m", "amp_y_m", "amp_z_m"],
                            rows)]


def compensate_cmd(cfg: RunConfig, out: Path, fmt: str) -> List[Path]:
    ion = build_ion(cfg)
    model = build_analytic_model(cfg, ion)
    c = cfg.compensate
    result = compensate(model, ion, ((c.d13_min, c.d13_max), (c.d24_min, c.d24_max)),
                        method=c.method, cycles=c.cycles)
    report = {
        "d13_V": result.optimum[0],
        "d24_V": result.optimum[1],
        "metric_m_per_s": result.metric,
        "evaluations": result.evaluations,
        "on_boundary": result.on_boundary,
        "converged": result.converged,
        "equilibrium_m": result.equilibrium,
        "method": c.method,
        "search_box_V": [[c.d13_min, c.d13_max], [c.d24_min, c.d24_max]],
        "stray_field_V_per_m": model.drive.stray_field,
    }
    if fmt == "json":
        main_path = write_json(out, report)
    else:
        header = ["d13_V", "d24_V", "metric_m_per_s", "evaluations", "on_boundary",
                  "converged"]
        main_path = write_table_csv(out, header, [[report[k] for k in header]])
    return [main_path, write_json(_sidecar(out, "report.json"), report)]


def sidebands_cmd(cfg: RunConfig, out: Path, fmt: str) -> List[Path]:
    ion = build_ion(cfg)
    s = cfg.sidebands
    lines = zeeman_lines(s.b_field, s.beam_angle, s.polarization)
    transition: Optional[Tuple[float, float]] = None
    if s.m_ground is not None and s.m_excited is not None:
        transition = (s.m_ground, s.m_excited)
    secular = (s.nu_x, s.nu_y, s.nu_z)
    spectrum = sideband_spectrum(lines, secular, s.max_order, transition)
    logger.info("%d Zeeman lines, %d sideband lines", len(lines), len(spectrum))
    if fmt == "json":
        eta = {axis: lamb_dicke(TWO_PI * nu, ion, s.wavelength)
               for axis, nu in zip("xyz", secular)}
        return [write_json(out, {
            "b_field_T": s.b_field,
            "lamb_dicke": eta,
            "lines": [dict(zip(SIDEBAND_HEADER, row)) for row in sideband_rows(spectrum)],
        })]
    return [write_table_csv(out, SIDEBAND_HEADER, sideband_rows(spectrum))]


def solve_field_cmd(cfg: RunConfig, out: Path, fmt: str) -> List[Path]:
    f = cfg.field
    if f.mesh is not None:
        mesh = load_mesh(f.mesh)
    else:
        mesh = tapered_trap_mesh(build_geometry(cfg), f.blade_width, f.n_axial)
    bases = CollocationSolver(mesh, f.max_triangles).solve_all()
    cache = Path(f.cache) if f.cache is not None else _sidecar(out, "basis")
    write_basis_cache(cache, bases)
    ids, matrix = capacitance_matrix(bases)
    names = [mesh.electrode_names.get(i, str(i)) for i in ids]
    if fmt == "json":
        table = write_json(out, {"electrodes": names, "capacitance_F": matrix,
                                 "triangles": mesh.n_triangles})
    else:
        rows = [[name] + list(row) for name, row in zip(names, matrix)]
        table = write_table_csv(out, ["electrode"] + names, rows)
    return [cache, table]


def calibrate_cmd(cfg: RunConfig, out: Path, fmt: str) -> List[Path]:
    ion = build_ion(cfg)
    model = build_analytic_model(cfg, ion)
    drive = model.drive
    secular = secular_frequencies(model, ion)
    mathieu = mathieu_parameters(model, ion)
    table = {
        "v_rf1_V": drive.v_rf1,
        "v_rf2_V": drive.v_rf2,
        "phase_diff_deg": math.degrees(drive.phase_diff),
        "v_d1_V": drive.v_d1,
        "v_d2_V": drive.v_d2,
        "nu_x_Hz": secular.omega_x / TWO_PI,
        "nu_y_Hz": secular.omega_y / TWO_PI,
        "nu_z_Hz": secular.omega_z / TWO_PI,
        "splitting_Hz": (secular.omega_y - secular.omega_x) / TWO_PI,
        "axis_angle_deg": math.degrees(secular.axis_angle),
        "q_x": mathieu.q_x,
        "q_y": mathieu.q_y,
        "a_x": mathieu.a_x,
        "a_y": mathieu.a_y,
        "stable": mathieu.stable,
    }
    if fmt == "json":
        return [write_json(out, table)]
    return [write_table_csv(out, ["quantity", "value"], table.items())]


def axis_scan_cmd(cfg: RunConfig, out: Path, fmt: str) -> List[Path]:
    ion = build_ion(cfg)
    model = build_analytic_model(cfg, ion)
    a = cfg.axis
    if a.anchor:
        beta = calibrate_axis_rotation(model, ion, C.AXIS_ANCHOR_VOLTAGE, C.AXIS_ANCHOR_ANGLE)
        model = model.with_drive(replace(model.drive, beta_quad_xy=beta))
    v_c = np.linspace(a.v_c_start, a.v_c_stop, a.points)
    scan = axis_rotation_scan(model, ion, v_c, a.plane_angle)
    try:
        balanced: Optional[float] = balanced_common_voltage(
            model, ion, (a.v_c_start, a.v_c_stop), a.plane_angle)
    except CalibrationError as exc:
        logger.warning("no balanced voltage in the scanned range: %s", exc)
        balanced = None
    summary = {"balanced_v_c_V": balanced, "beta_quad_xy_per_m2": model.drive.beta_quad_xy,
               "plane_angle_deg": math.degrees(a.plane_angle)}
    return [write_scan(scan, out, fmt), write_json(_sidecar(out, "summary.json"), summary)]


Handler = Callable[[RunConfig, Path, str], List[Path]]

COMMANDS: Dict[str, Tuple[Handler, str]] = {
    "pseudo-map": (pseudo_map_cmd, "Effective potential on an x-z grid"),
    "simulate": (simulate_cmd, "Integrate one ion trajectory"),
    "scan-axial": (scan_axial_cmd, "Radial frequencies against axial position, with fits"),
    "sweep": (sweep_cmd, "Modulated-force excitation sweep"),
    "compensate": (compensate_cmd, "Minimize micromotion over compensation voltages"),
    "sidebands": (sidebands_cmd, "Zeeman and motional sideband line list"),
    "solve-field": (solve_field_cmd, "Solve electrode charge bases and cache them"),
    "calibrate": (calibrate_cmd, "Calibrated drive and secular frequencies"),
    "axis-scan": (axis_scan_cmd, "Principal-axis rotation against compensation voltage"),
}


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def _seed(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"seed must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Config file (default: $TAPEREDTRAP_CONFIG)")
    common.add_argument("--seed", type=_seed, help="Override run.seed")
    common.add_argument("--out", help="Result file (default: <command>.<format>)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="taperedtrap",
                                     description="Tapered Paul trap simulation toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        subparsers.add_parser(name, help=help_text, parents=[common])
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out) if args.out else Path(f"{args.command}.{args.format}")
    handler, _ = COMMANDS[args.command]
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        outputs = handler(cfg, out, args.format)
        record = provenance_record(args.command, cfg.sha256(), cfg.run.seed, outputs)
        outputs.append(write_provenance(out, record))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # Invalid parameter combinations that pass the schema.
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TaperedTrapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    for path in outputs:
        print(path)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
