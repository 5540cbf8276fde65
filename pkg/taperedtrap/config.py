"""
Run configuration: a flat, unit-suffixed key=value file validated by pydantic.

A line reads ``section.quantity_unit = value``, e.g. ``drive.rf_frequency_MHz =
11.17``. Without a suffix the value is SI (angles in rad, angular frequencies
in rad/s). ``#`` starts a comment. Every value is converted to SI once, here;
the rest of the package never sees other units.

If no path is given, load_config() falls back to the file named by the
TAPEREDTRAP_CONFIG environment variable, and then to the built-in defaults.
"""

import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from taperedtrap import constants as C
from taperedtrap.dynamics import ForceConfig
from taperedtrap.trapmodel import (
    AnalyticFieldModel,
    DriveConfig,
    IonSpecies,
    TaperedTrapError,
    TrapGeometry,
    calibrate_drive,
)

logger = logging.getLogger(__name__)

CONFIG_PATH_ENV = "TAPEREDTRAP_CONFIG"

TWO_PI = 2 * math.pi

# Suffix -> factor to SI for each dimension.
UNITS: Dict[str, Dict[str, float]] = {
    "length": {"m": 1.0, "mm": 1e-3, "um": 1e-6, "nm": 1e-9},
    "angle": {"rad": 1.0, "deg": math.pi / 180},
    "angular_frequency": {"rad_per_s": 1.0, "Hz": TWO_PI, "kHz": TWO_PI * 1e3,
                          "MHz": TWO_PI * 1e6},
    "frequency": {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6},
    "rate": {"per_s": 1.0, "Hz": 1.0, "kHz": 1e3, "MHz": 1e6},
    "voltage": {"V": 1.0, "mV": 1e-3},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9},
    "mass": {"kg": 1.0, "amu": C.AMU},
    "magnetic_field": {"T": 1.0, "G": 1e-4},
    "force": {"N": 1.0, "zN": 1e-21},
    "field_strength": {"V_per_m": 1.0, "V_per_mm": 1e3},
    "temperature": {"K": 1.0, "mK": 1e-3},
    "damping": {"kg_per_s": 1.0},
    "momentum": {"kg_m_per_s": 1.0},
    "inverse_length": {"per_m": 1.0, "per_mm": 1e3},
    "inverse_area": {"per_m2": 1.0, "per_mm2": 1e6},
    "dimensionless": {},
    "count": {},
    "flag": {},
    "word": {},
}


class ConfigError(TaperedTrapError):
    """Malformed or invalid configuration; names the key and line when known."""

    def __init__(self, message: str, key: Optional[str] = None,
                 line_number: Optional[int] = None):
        where = "" if line_number is None else f"line {line_number}: "
        if key is not None:
            where += f"{key}: "
        super().__init__(where + message)
        self.key = key
        self.line_number = line_number


def _q(default: Any, dimension: str, **constraints: Any) -> Any:
    """Field carrying the physical dimension the file loader converts from."""
    return Field(default, json_schema_extra={"dimension": dimension}, **constraints)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TrapSection(_Section):
    taper_angle: float = _q(C.TAPER_ANGLE, "angle", gt=-math.pi / 4, lt=math.pi / 4)
    r0: float = _q(C.R0, "length", gt=0)
    blade_length: float = _q(C.BLADE_LENGTH, "length", gt=0)
    endcap_gap: float = _q(C.ENDCAP_GAP, "length", gt=0)


class DriveSection(_Section):
    rf_frequency: float = _q(TWO_PI * C.RF_FREQUENCY, "angular_frequency", gt=0)
    v_rf: Optional[float] = _q(None, "voltage", gt=0)
    probe_amplitude: Optional[float] = _q(None, "voltage", gt=0)
    probe_ratio: float = _q(C.RF_PROBE_RATIO, "dimensionless", gt=0)
    asymmetry: float = _q(C.RADIAL_SPLITTING, "dimensionless", gt=-0.5, lt=0.5)
    phase_diff: float = _q(C.RF_PHASE_DIFF, "angle")
    v_endcap: float = _q(C.ENDCAP_VOLTAGE, "voltage")
    v_endcap_diff: float = _q(0.0, "voltage")
    v_comp_common: float = _q(0.0, "voltage")
    v_comp_13: float = _q(0.0, "voltage")
    v_comp_24: float = _q(0.0, "voltage")
    kappa_axial: float = _q(C.KAPPA_AXIAL, "dimensionless")
    kappa_rf: float = _q(C.KAPPA_RF_BLADES, "dimensionless", gt=0)
    beta_dipole: float = _q(C.BETA_DIPOLE, "inverse_length")
    beta_quad_xy: float = _q(C.BETA_QUAD_XY, "inverse_area")
    stray_x: float = _q(0.0, "field_strength")
    stray_y: float = _q(0.0, "field_strength")
    stray_z: float = _q(0.0, "field_strength")

    @model_validator(mode="after")
    def _one_amplitude(self) -> "DriveSection":
        if self.v_rf is not None and self.probe_amplitude is not None:
            raise ValueError("give either v_rf or probe_amplitude, not both")
        return self

    @property
    def amplitude(self) -> float:
        """RF amplitude on the blades (V)."""
        if self.probe_amplitude is not None:
            return self.probe_amplitude * self.probe_ratio
        return self.v_rf if self.v_rf is not None else C.RF_AMPLITUDE


class IonSection(_Section):
    mass: float = _q(C.CA40_ION_MASS, "mass", gt=0)
    charge_number: float = _q(1.0, "dimensionless")
    label: str = _q("40Ca+", "word")


class ForcesSection(_Section):
    drag_coefficient: float = _q(0.0, "damping", ge=0)
    kick_rate: float = _q(0.0, "rate", ge=0)
    kick_momentum: float = _q(0.0, "momentum", ge=0)
    mod_force_amp: float = _q(0.0, "force", ge=0)
    mod_frequency: float = _q(0.0, "angular_frequency", ge=0)
    mod_axis: Literal["x", "y", "z"] = _q("x", "word")


class SimSection(_Section):
    model: Literal["analytic", "effective", "solved"] = _q("analytic", "word")
    duration: float = _q(1e-4, "time", gt=0)
    dt: Optional[float] = _q(None, "time", gt=0)
    sample_stride: int = _q(5, "count", ge=1)
    x0: float = _q(0.0, "length")
    y0: float = _q(0.0, "length")
    z0: float = _q(0.0, "length")
    start: Literal["rest", "thermal", "micromotion"] = _q("rest", "word")
    temperature: float = _q(1e-3, "temperature", ge=0)


class CalibrationSection(_Section):
    enabled: bool = _q(True, "flag")
    radial_frequency: float = _q(TWO_PI * sum(C.RADIAL_FREQUENCIES) / 2,
                                 "angular_frequency", gt=0)
    axial_frequency: float = _q(TWO_PI * C.AXIAL_FREQUENCY, "angular_frequency", gt=0)


class ScanSection(_Section):
    z_start: float = _q(-50e-6, "length")
    z_stop: float = _q(100e-6, "length")
    points: int = _q(16, "count", ge=2)
    method: Literal["trajectory", "pseudopotential"] = _q("trajectory", "word")
    record_time: float = _q(4e-4, "time", gt=0)
    workers: int = _q(1, "count", ge=1)
    axial_frequency: Optional[float] = _q(None, "angular_frequency", gt=0)


class SweepSection(_Section):
    f_start: float = _q(1.10e6, "frequency", gt=0)
    f_stop: float = _q(1.16e6, "frequency", gt=0)
    points: int = _q(31, "count", ge=2)
    direction: Literal["up", "down", "both"] = _q("both", "word")
    settle_time: Optional[float] = _q(None, "time", gt=0)
    measure_time: Optional[float] = _q(None, "time", gt=0)
    model: Literal["effective", "analytic"] = _q("effective", "word")


class CompensateSection(_Section):
    d13_min: float = _q(-100.0, "voltage")
    d13_max: float = _q(100.0, "voltage")
    d24_min: float = _q(-100.0, "voltage")
    d24_max: float = _q(100.0, "voltage")
    method: Literal["trajectory", "pseudopotential"] = _q("trajectory", "word")
    cycles: int = _q(100, "count", ge=100)

    @model_validator(mode="after")
    def _ordered(self) -> "CompensateSection":
        if not (self.d13_min < self.d13_max and self.d24_min < self.d24_max):
            raise ValueError("search box minimum must be below its maximum")
        return self


class MapSection(_Section):
    x_min: float = _q(-0.3e-3, "length")
    x_max: float = _q(0.3e-3, "length")
    z_min: float = _q(-1.0e-3, "length")
    z_max: float = _q(1.0e-3, "length")
    nx: int = _q(31, "count", ge=2)
    nz: int = _q(41, "count", ge=2)


class SidebandsSection(_Section):
    b_field: float = _q(C.QUANTIZATION_FIELD, "magnetic_field", ge=0)
    beam_angle: float = _q(math.pi / 4, "angle")
    polarization: float = _q(math.pi / 4, "angle")
    max_order: int = _q(2, "count", ge=1)
    nu_x: float = _q(C.RADIAL_FREQUENCIES[0], "frequency", gt=0)
    nu_y: float = _q(C.RADIAL_FREQUENCIES[1], "frequency", gt=0)
    nu_z: float = _q(C.AXIAL_FREQUENCY, "frequency", gt=0)
    m_ground: Optional[float] = _q(None, "dimensionless")
    m_excited: Optional[float] = _q(None, "dimensionless")
    wavelength: float = _q(C.QUADRUPOLE_WAVELENGTH, "length", gt=0)

    @model_validator(mode="after")
    def _transition_pair(self) -> "SidebandsSection":
        if (self.m_ground is None) != (self.m_excited is None):
            raise ValueError("m_ground and m_excited must be given together")
        return self


class FieldSection(_Section):
    mesh: Optional[str] = _q(None, "word")
    cache: Optional[str] = _q(None, "word")
    max_triangles: int = _q(20000, "count", ge=1)
    blade_width: float = _q(2.5e-3, "length", gt=0)
    n_axial: int = _q(16, "count", ge=2)


class AxisSection(_Section):
    v_c_start: float = _q(0.0, "voltage")
    v_c_stop: float = _q(120.0, "voltage")
    points: int = _q(25, "count", ge=2)
    plane_angle: float = _q(C.IMAGING_PLANE_ANGLE, "angle")
    anchor: bool = _q(True, "flag")


class RunSection(_Section):
    seed: int = _q(0, "count", ge=0)


class RunConfig(BaseModel):
    """Complete, validated run configuration in SI units."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    trap: TrapSection = TrapSection()
    drive: DriveSection = DriveSection()
    ion: IonSection = IonSection()
    forces: ForcesSection = ForcesSection()
    sim: SimSection = SimSection()
    calibration: CalibrationSection = CalibrationSection()
    scan: ScanSection = ScanSection()
    sweep: SweepSection = SweepSection()
    compensate: CompensateSection = CompensateSection()
    map: MapSection = MapSection()
    sidebands: SidebandsSection = SidebandsSection()
    field: FieldSection = FieldSection()
    axis: AxisSection = AxisSection()
    run: RunSection = RunSection()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(update={"run": RunSection(seed=seed)})


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _split_quantity(section: type, rest: str) -> Tuple[str, Optional[str]]:
    fields = section.model_fields
    if rest in fields:
        return rest, None
    # Longest field name wins: quantity names contain underscores too.
    for name in sorted(fields, key=len, reverse=True):
        if rest.startswith(name + "_"):
            return name, rest[len(name) + 1:]
    raise KeyError(rest)


def _convert(raw: str, dimension: str, suffix: Optional[str]) -> Any:
    if dimension == "word":
        return raw
    if dimension == "flag":
        lowered = raw.lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if dimension == "count":
        return int(raw)
    value = float(raw)
    if suffix is None:
        return value
    return value * UNITS[dimension][suffix]


def parse_config(text: str) -> RunConfig:
    """Parse and validate configuration text."""
    sections: Dict[str, Dict[str, Any]] = {}
    origin: Dict[Tuple[str, str], Tuple[str, int]] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError("expected 'section.quantity = value'", line_number=number)
        key, raw = (part.strip() for part in content.split("=", 1))
        if "." not in key:
            raise ConfigError("key needs a section prefix", key, number)
        section_name, rest = key.split(".", 1)
        if section_name not in RunConfig.model_fields:
            raise ConfigError(f"unknown section {section_name!r}", key, number)
        section = RunConfig.model_fields[section_name].annotation
        try:
            name, suffix = _split_quantity(section, rest)
        except KeyError:
            raise ConfigError(f"unknown quantity {rest!r}", key, number) from None
        dimension = section.model_fields[name].json_schema_extra["dimension"]
        if suffix is not None and suffix not in UNITS[dimension]:
            allowed = ", ".join(UNITS[dimension]) or "none"
            raise ConfigError(
                f"unknown unit suffix {suffix!r} for a {dimension.replace('_', ' ')} "
                f"(allowed: {allowed})", key, number)
        if (section_name, name) in origin:
            raise ConfigError(
                f"duplicate setting (first on line {origin[(section_name, name)][1]})",
                key, number)
        if raw == "":
            raise ConfigError("missing value", key, number)
        try:
            value = _convert(raw, dimension, suffix)
        except ValueError:
            raise ConfigError(f"cannot read {raw!r} as a {dimension.replace('_', ' ')}",
                              key, number) from None
        sections.setdefault(section_name, {})[name] = value
        origin[(section_name, name)] = (key, number)

    try:
        return RunConfig(**sections)
    except ValidationError as exc:
        error = exc.errors()[0]
        loc = tuple(str(part) for part in error["loc"])
        key, number = None, None
        if len(loc) >= 2 and (loc[0], loc[1]) in origin:
            key, number = origin[(loc[0], loc[1])]
        elif loc:
            key = ".".join(loc)
        message = error["msg"].removeprefix("Value error, ")
        raise ConfigError(message, key, number) from exc


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a config file; with no path use TAPEREDTRAP_CONFIG, else the defaults."""
    if path is None:
        path = os.environ.get(CONFIG_PATH_ENV) or None
    if path is None:
        logger.debug("no config file given; using defaults")
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    logger.info("loading config %s", path)
    return parse_config(text)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_geometry(cfg: RunConfig) -> TrapGeometry:
    t = cfg.trap
    return TrapGeometry(taper_angle=t.taper_angle, r0=t.r0, blade_length=t.blade_length,
                        endcap_gap=t.endcap_gap)


def build_ion(cfg: RunConfig) -> IonSpecies:
    return IonSpecies(mass=cfg.ion.mass, charge=cfg.ion.charge_number * C.ELEMENTARY_CHARGE,
                      label=cfg.ion.label)


def build_drive(cfg: RunConfig) -> DriveConfig:
    """Drive exactly as configured, before any calibration."""
    d = cfg.drive
    try:
        drive = DriveConfig.symmetric(
            d.amplitude, d.asymmetry,
            omega_rf=d.rf_frequency, phase_diff=d.phase_diff,
            kappa_axial=d.kappa_axial, kappa_rf=d.kappa_rf,
            beta_dipole=d.beta_dipole, beta_quad_xy=d.beta_quad_xy,
            stray_field=(d.stray_x, d.stray_y, d.stray_z),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), "drive") from exc
    return (drive.with_endcaps(d.v_endcap, d.v_endcap_diff)
            .with_common_compensation(d.v_comp_common)
            .with_compensation(d.v_comp_13, d.v_comp_24))


def build_forces(cfg: RunConfig) -> ForceConfig:
    f = cfg.forces
    direction = tuple(1.0 if axis == f.mod_axis else 0.0 for axis in "xyz")
    return ForceConfig(drag_coefficient=f.drag_coefficient, kick_rate=f.kick_rate,
                       kick_momentum=f.kick_momentum, mod_force_amp=f.mod_force_amp,
                       mod_freq=f.mod_frequency, mod_direction=direction,
                       rng_seed=cfg.run.seed)


def build_analytic_model(cfg: RunConfig, ion: IonSpecies) -> AnalyticFieldModel:
    """Analytic model; with calibration enabled the RF and endcap voltages are solved."""
    geometry = build_geometry(cfg)
    drive = build_drive(cfg)
    if cfg.calibration.enabled:
        drive = calibrate_drive(geometry, ion, cfg.calibration.radial_frequency,
                                cfg.calibration.axial_frequency, template=drive)
    return AnalyticFieldModel(geometry, drive)
