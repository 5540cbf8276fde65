"""
taperedtrap - simulation toolkit for a Paul trap with tapered RF electrodes.

Analytic and boundary-element field models, pseudopotential analysis,
single-ion dynamics, spectral analysis, micromotion compensation and
S1/2 <-> D5/2 sideband line lists.
"""

from taperedtrap.trapmodel import (
    TaperedTrapError, DomainError, UnstableConfigurationError, CalibrationError, AxisError,
    IonSpecies, TrapGeometry, DriveConfig, FieldModel, AnalyticFieldModel, EffectiveFieldModel,
    SecularResult, MathieuParameters,
    pseudopotential, secular_frequencies, equilibrium_position, radial_freq_eq1,
    mathieu_parameters, calibrate_drive, principal_axis_angle, calibrate_axis_rotation,
)
from taperedtrap.dynamics import (
    IonState, ForceConfig, TrajectoryRecord, ScanResult, EscapeError,
    step_verlet, simulate, excitation_sweep,
)
from taperedtrap.analysis import (
    Spectrum, PeakEstimate, Eq1Fit, LinearFit, CompensationResult,
    power_spectrum, peak_frequency, scan_axial, fit_eq1, fit_linear_epsilon,
    micromotion_metric, compensate, axis_rotation_scan,
)
from taperedtrap.sidebands import ZeemanLine, SidebandLine, zeeman_lines, sideband_comb, lamb_dicke
from taperedtrap.config import RunConfig, ConfigError, load_config

# The boundary-element solver and the CLI are imported on first use; the
# solver assembles dense matrices and most callers only need the analytic model.
_LAZY_EXPORTS = {
    "TriMesh": "taperedtrap.fieldsolve",
    "CollocationSolver": "taperedtrap.fieldsolve",
    "solve_unit_basis": "taperedtrap.fieldsolve",
    "solved_field": "taperedtrap.fieldsolve",
    "parse_mesh": "taperedtrap.fieldsolve",
    "load_mesh": "taperedtrap.fieldsolve",
    "tapered_trap_mesh": "taperedtrap.meshgen",
    "run": "taperedtrap.main",
}


def __getattr__(name: str) -> object:
    """Lazily import solver and CLI symbols on first access (PEP 562)."""
    module_path = _LAZY_EXPORTS.get(name)
    if module_path is not None:
        import importlib
        module = importlib.import_module(module_path)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__version__ = "1.0.0"

__all__ = [
    # Errors
    "TaperedTrapError", "DomainError", "UnstableConfigurationError", "CalibrationError",
    "AxisError", "EscapeError", "ConfigError",

    # Trap model
    "IonSpecies", "TrapGeometry", "DriveConfig", "FieldModel", "AnalyticFieldModel",
    "EffectiveFieldModel", "SecularResult", "MathieuParameters",
    "pseudopotential", "secular_frequencies", "equilibrium_position", "radial_freq_eq1",
    "mathieu_parameters", "calibrate_drive", "principal_axis_angle", "calibrate_axis_rotation",

    # Dynamics
    "IonState", "ForceConfig", "TrajectoryRecord", "ScanResult",
    "step_verlet", "simulate", "excitation_sweep",

    # Analysis
    "Spectrum", "PeakEstimate", "Eq1Fit", "LinearFit", "CompensationResult",
    "power_spectrum", "peak_frequency", "scan_axial", "fit_eq1", "fit_linear_epsilon",
    "micromotion_metric", "compensate", "axis_rotation_scan",

    # Sidebands
    "ZeemanLine", "SidebandLine", "zeeman_lines", "sideband_comb", "lamb_dicke",

    # Configuration
    "RunConfig", "load_config",

    # Field solver (lazy)
    "TriMesh", "CollocationSolver", "solve_unit_basis", "solved_field", "parse_mesh",
    "load_mesh", "tapered_trap_mesh",

    # CLI (lazy)
    "run",
]
