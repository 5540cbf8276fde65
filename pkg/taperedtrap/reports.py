"""
Result files: CSV tables, JSON documents, fit reports and provenance records.

Floats are written with repr() and JSON keys are sorted, so re-running a
command with the same config and seed reproduces every file byte for byte.
NaN (a failed scan point) is written as 'nan' in CSV and null in JSON.
"""

import csv
import json
import logging
import math
import platform
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pydantic
import scipy

from taperedtrap.analysis import Eq1Fit, LinearFit, ScanResult, Spectrum
from taperedtrap.sidebands import SidebandLine

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _plain(value: Any) -> Any:
    """Convert numpy values and non-finite floats into JSON-safe objects."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_table_csv(path: PathLike, header: Sequence[str],
                    rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.info("wrote %s", path)
    return path


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(payload), indent=2, sort_keys=True, allow_nan=False)
                    + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


# ---------------------------------------------------------------------------
# Scans and spectra
# ---------------------------------------------------------------------------

def scan_to_dict(scan: ScanResult) -> Dict[str, Any]:
    return {
        "parameter": scan.parameter,
        "values": scan.values,
        "columns": scan.columns,
        "uncertainties": scan.uncertainties,
        "errors": {str(k): v for k, v in sorted(scan.errors.items())},
        "partial": scan.partial,
        "metadata": scan.metadata,
    }


def write_scan(scan: ScanResult, path: PathLike, fmt: str = "csv") -> Path:
    """Scan table; uncertainty columns carry a sigma_ prefix in CSV."""
    if fmt == "json":
        return write_json(path, scan_to_dict(scan))
    if scan.errors:
        logger.warning("%d scan point(s) failed and are written as nan", len(scan.errors))
    return write_table_csv(path, scan.header, scan.rows())


def write_spectrum(spectrum: Spectrum, path: PathLike, fmt: str = "csv") -> Path:
    if fmt == "json":
        return write_json(path, {"window": spectrum.window, "resolution_Hz": spectrum.resolution,
                                 "freq_Hz": spectrum.freq_axis, "power": spectrum.power})
    return write_table_csv(path, ["freq_Hz", "power"], zip(spectrum.freq_axis, spectrum.power))


# ---------------------------------------------------------------------------
# Fit reports
# ---------------------------------------------------------------------------

def fit_report(scan: ScanResult, curved: Eq1Fit, line: LinearFit) -> Dict[str, Any]:
    """Machine-readable taper-law and linear fit summary.

    Keys: model, n_points, p_per_m, p_sigma_per_m, epsilon_from_p_per_mm,
    converged, residual_norm_rad_s, max_relative_residual, and per column
    omega0_rad_s, omega0_sigma_rad_s, epsilon_linear_per_mm and
    epsilon_linear_sigma_per_mm.
    """
    max_relative = 0.0
    columns: Dict[str, Dict[str, float]] = {}
    for name in curved.omega0:
        measured = 2 * math.pi * scan.column(name)
        ok = np.isfinite(measured)
        predicted = curved.predict(name, scan.values[ok])
        relative = np.abs(predicted - measured[ok]) / measured[ok]
        max_relative = max(max_relative, float(np.max(relative)))
        columns[name] = {
            "omega0_rad_s": curved.omega0[name],
            "omega0_sigma_rad_s": curved.omega0_sigma[name],
            "epsilon_linear_per_mm": line.epsilon[name] * 1e-3,
            "epsilon_linear_sigma_per_mm": line.epsilon_sigma[name] * 1e-3,
        }
    return {
        "model": "omega(z) = omega0 / (1 - p z)^2",
        "n_points": curved.n_points,
        "p_per_m": curved.p,
        "p_sigma_per_m": curved.p_sigma,
        "epsilon_from_p_per_mm": curved.epsilon * 1e-3,
        "converged": curved.converged,
        "residual_norm_rad_s": curved.residual_norm,
        "max_relative_residual": max_relative,
        "columns": columns,
    }


def fit_report_text(report: Dict[str, Any]) -> str:
    lines = [
        "Taper-law fit: " + report["model"],
        f"  points: {report['n_points']}",
        f"  p = {report['p_per_m']:.6g} +/- {report['p_sigma_per_m']:.3g} 1/m"
        f"  (2p = {report['epsilon_from_p_per_mm']:.5g} 1/mm)",
        f"  converged: {'yes' if report['converged'] else 'no'}",
        f"  largest relative residual: {report['max_relative_residual']:.3e}",
    ]
    for name, col in sorted(report["columns"].items()):
        lines.append(f"  {name}: omega0 = {col['omega0_rad_s']:.8g} +/- "
                     f"{col['omega0_sigma_rad_s']:.3g} rad/s, linear epsilon = "
                     f"{col['epsilon_linear_per_mm']:.5g} +/- "
                     f"{col['epsilon_linear_sigma_per_mm']:.2g} 1/mm")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sidebands
# ---------------------------------------------------------------------------

SIDEBAND_HEADER = ["offset_Hz", "m_g", "m_e", "n_x", "n_y", "n_z"]


def sideband_rows(lines: Iterable[SidebandLine]) -> List[List[Any]]:
    return [[s.offset, s.base.m_ground, s.base.m_excited, *s.orders] for s in lines]


# ---------------------------------------------------------------------------
# Provenance
# ---------------------------------------------------------------------------

def provenance_path(out: PathLike) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".provenance.json")


def provenance_record(command: str, config_sha256: str, seed: int,
                      outputs: Optional[Sequence[PathLike]] = None) -> Dict[str, Any]:
    """Command, config hash, seed and package versions; no timestamps."""
    from taperedtrap import __version__

    return {
        "command": command,
        "config_sha256": config_sha256,
        "seed": seed,
        "outputs": sorted(Path(p).name for p in outputs or ()),
        "versions": {
            "taperedtrap": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pydantic": pydantic.VERSION,
            "python": platform.python_version(),
        },
    }


def write_provenance(out: PathLike, record: Dict[str, Any]) -> Path:
    return write_json(provenance_path(out), record)
