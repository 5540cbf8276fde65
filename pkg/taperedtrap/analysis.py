"""
Spectral estimation and characterization experiments.

- power_spectrum / peak_frequency: Hann-windowed periodograms of trajectories
  and sub-bin peak location.
- scan_axial: radial frequencies as the ion is moved along the axis with the
  endcaps, at constant axial frequency.
- fit_eq1 / fit_linear_epsilon: the taper law and its linearization fitted to
  a scan.
- micromotion_metric / compensate: RF-synchronous velocity of the ion and its
  minimization over the differential compensation voltages.
- axis_rotation_scan / balanced_common_voltage: orientation of the radial
  principal axes against the common compensation voltage, as seen by a camera.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import fft, optimize, signal, stats

from taperedtrap import constants as C
from taperedtrap.dynamics import (
    IonState,
    ScanResult,
    TrajectoryRecord,
    micromotion_start,
    simulate,
    step_count,
)
from taperedtrap.trapmodel import (
    AxisError,
    CalibrationError,
    DomainError,
    FieldModel,
    IonSpecies,
    TaperedTrapError,
    equilibrium_position,
    pseudopotential_gradient,
    pseudopotential_hessian,
    radial_freq_eq1,
    radial_minimum,
    secular_frequencies,
)

logger = logging.getLogger(__name__)

__all__ = [
    "BandError", "CompensationResult", "Eq1Fit", "FitError", "LinearFit", "PeakEstimate",
    "ScanResult", "Spectrum", "SpectrumError", "axis_rotation_scan",
    "balanced_common_voltage", "compensate", "fit_eq1", "fit_linear_epsilon",
    "micromotion_metric", "peak_frequency", "power_spectrum",
    "predicted_micromotion_velocity", "scan_axial", "signal_spectrum", "solve_endcaps",
]

MIN_SPECTRUM_SAMPLES = 1024
LOW_CONFIDENCE_DB = 6.0
# Local maxima closer than this many bins belong to the main lobe.
MAIN_LOBE_BINS = 3
MIN_MICROMOTION_CYCLES = 100
RADIAL_COLUMNS = ("nu_x_Hz", "nu_y_Hz")


class SpectrumError(TaperedTrapError):
    """Record too short or not uniformly sampled for a spectrum."""


class BandError(TaperedTrapError):
    """Search band unusable, e.g. band too narrow for the peak it holds."""


class FitError(TaperedTrapError):
    """Data are too few or degenerate for the requested fit."""


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Spectrum:
    """One-sided power spectral density.

    power integrates over freq_axis to the windowed mean square of the signal.
    """
    freq_axis: NDArray[np.float64]
    power: NDArray[np.float64]
    window: str
    resolution: float

    def __len__(self) -> int:
        return len(self.freq_axis)


@dataclass(frozen=True)
class PeakEstimate:
    frequency: float
    uncertainty: float
    prominence_db: float
    low_confidence: bool
    bin_index: int


def signal_spectrum(values: ArrayLike, sample_interval: float,
                    window: str = "hann") -> Spectrum:
    """Windowed periodogram of a uniformly sampled real signal."""
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n < MIN_SPECTRUM_SAMPLES:
        raise SpectrumError(
            f"a spectrum needs at least {MIN_SPECTRUM_SAMPLES} samples, got {n}")
    if not sample_interval > 0:
        raise SpectrumError(f"sample interval must be positive, got {sample_interval}")
    weights = signal.get_window(window, n)
    windowed = x * weights
    power = np.abs(fft.rfft(windowed)) ** 2
    # Fold negative frequencies; DC and an even-length Nyquist bin are unpaired.
    power[1:n - n // 2] *= 2
    norm = float(weights @ weights)
    power *= sample_interval / norm
    resolution = 1.0 / (n * sample_interval)
    total = float(power.sum()) * resolution
    expected = float(windowed @ windowed) / norm
    if abs(total - expected) > 1e-9 * max(expected, np.finfo(float).tiny):
        raise SpectrumError(f"Parseval check failed: {total:.6e} vs {expected:.6e}")
    freqs = fft.rfftfreq(n, sample_interval)
    return Spectrum(freqs, power, window, resolution)


def _check_uniform(record: TrajectoryRecord) -> None:
    steps = np.diff(record.times)
    if len(steps) and np.max(np.abs(steps - record.sample_interval)) > 1e-6 * record.sample_interval:
        raise SpectrumError("trajectory samples are not uniformly spaced")


def power_spectrum(traj: TrajectoryRecord, axis: Union[int, str] = 0,
                   window: str = "hann") -> Spectrum:
    """Spectrum of one position coordinate of a trajectory ('x', 'y', 'z' or 0..2)."""
    index = "xyz".index(axis) if isinstance(axis, str) else int(axis)
    _check_uniform(traj)
    return signal_spectrum(traj.positions[:, index], traj.sample_interval, window)


def peak_frequency(spectrum: Spectrum, search_band: Tuple[float, float]) -> PeakEstimate:
    """Strongest peak in search_band (Hz), refined by a parabola through log-power.

    The uncertainty is the larger of a tenth of a bin and the disagreement
    between the log-power and linear-power parabola vertices.
    """
    lo, hi = search_band
    freqs, power = spectrum.freq_axis, spectrum.power
    if not lo < hi:
        raise BandError(f"empty search band ({lo}, {hi})")
    if lo < freqs[0] or hi > freqs[-1]:
        raise BandError(
            f"search band ({lo:.6e}, {hi:.6e}) Hz is outside the spectrum "
            f"({freqs[0]:.6e}, {freqs[-1]:.6e}) Hz")
    inside = np.nonzero((freqs >= lo) & (freqs <= hi))[0]
    if len(inside) < 3:
        raise BandError("band too narrow: fewer than three bins")
    band = power[inside]
    k = int(inside[int(np.argmax(band))])
    if k == inside[0] or k == inside[-1]:
        raise BandError(f"band too narrow: peak at the band edge ({freqs[k]:.6e} Hz)")

    ref = power[k]
    if not ref > 0:
        raise BandError("no power in the search band")
    floor = ref * 1e-300
    left = math.log(max(power[k - 1], floor) / ref)
    right = math.log(max(power[k + 1], floor) / ref)
    curvature = left + right
    shift = 0.5 * (left - right) / curvature if curvature < 0 else 0.0
    lin_curv = power[k - 1] - 2 * ref + power[k + 1]
    lin_shift = 0.5 * (power[k - 1] - power[k + 1]) / lin_curv if lin_curv < 0 else 0.0
    df = spectrum.resolution
    frequency = float(freqs[k] + shift * df)
    uncertainty = max(df / 10, abs(shift - lin_shift) * df)

    # Prominence against the strongest local maximum outside the main lobe.
    is_max = np.zeros(len(band), dtype=bool)
    is_max[1:-1] = (band[1:-1] >= band[:-2]) & (band[1:-1] >= band[2:])
    offsets = inside - k
    rivals = band[is_max & (np.abs(offsets) >= MAIN_LOBE_BINS)]
    reference = float(rivals.max()) if len(rivals) else float(np.median(band))
    prominence = 10 * math.log10(ref / reference) if reference > 0 else math.inf
    low = prominence < LOW_CONFIDENCE_DB
    if low:
        logger.warning("low-confidence peak at %.6e Hz (prominence %.2f dB)",
                       frequency, prominence)
    return PeakEstimate(frequency, uncertainty, prominence, low, k)


# ---------------------------------------------------------------------------
# Axial scan
# ---------------------------------------------------------------------------

def solve_endcaps(model: FieldModel, ion: IonSpecies, z: float, omega_axial: float,
                  max_iter: int = 20) -> FieldModel:
    """Model with endcap voltages that put the minimum at z with axial frequency omega_axial.

    Newton iteration on (common, differential) endcap voltage.
    """
    target = ion.mass * omega_axial ** 2
    drive = model.drive

    def residual(v: NDArray[np.float64]) -> NDArray[np.float64]:
        trial = model.with_drive(drive.with_endcaps(v[0], v[1]))
        r = radial_minimum(trial, ion, z)
        force = pseudopotential_gradient(trial, ion, r)[2]
        stiffness = pseudopotential_hessian(trial, ion, r)[2, 2]
        # Axial offset of the minimum in um, and relative curvature error.
        return np.array([force / target * 1e6, (stiffness - target) / target])

    v = np.array([drive.endcap_common, drive.v_d1 - drive.v_d2], dtype=float)
    try:
        for _ in range(max_iter):
            f = residual(v)
            if abs(f[0]) < 1e-6 and abs(f[1]) < 1e-8:
                break
            h = 1e-4 * max(1.0, abs(v[0]))
            jac = np.column_stack([(residual(v + [h, 0.0]) - f) / h,
                                   (residual(v + [0.0, h]) - f) / h])
            v = v + np.linalg.solve(jac, -f)
        else:
            raise CalibrationError(f"endcap solve did not converge at z = {z:.3e} m")
    except (np.linalg.LinAlgError, TaperedTrapError) as exc:
        if isinstance(exc, CalibrationError):
            raise
        raise CalibrationError(f"endcap solve failed at z = {z:.3e} m: {exc}") from exc
    logger.debug("endcaps for z=%.3e: common %.5f V, differential %.5f V", z, v[0], v[1])
    return model.with_drive(drive.with_endcaps(v[0], v[1]))


def _measure_point(args: tuple) -> dict:
    """Frequencies at one axial position; runs in worker processes."""
    model, ion, z, omega_axial, method, record_time, dt = args
    moved = solve_endcaps(model, ion, z, omega_axial)
    secular = secular_frequencies(moved, ion, z)
    axes = secular.axes
    result = {
        "nu": [w / (2 * math.pi) for w in secular.omega],
        "sigma": [0.0, 0.0],
        "axes": axes[:2, :2].copy(),
        "v_d": (moved.drive.v_d1, moved.drive.v_d2),
    }
    if method == "trajectory":
        center = np.array(secular.position)
        start = IonState.at_rest(center + 1e-6 * (axes[:, 0] + axes[:, 1]))
        step = dt if dt is not None else moved.drive.rf_period / 100
        record = simulate(moved, ion, start, record_time, step, sample_stride=10)
        if record.escaped:
            raise DomainError(f"ion escaped during the scan at z = {z:.3e} m",
                              bound="escape region")
        for k in range(2):
            projected = (record.positions - center) @ axes[:, k]
            spectrum = signal_spectrum(projected, record.sample_interval)
            guess = result["nu"][k]
            peak = peak_frequency(spectrum, (0.9 * guess, 1.1 * guess))
            result["nu"][k] = peak.frequency
            result["sigma"][k] = peak.uncertainty
    return result


def scan_axial(model: FieldModel, ion: IonSpecies, z_targets: Sequence[float],
               constant_axial: Optional[float] = None, method: str = "trajectory",
               record_time: float = 4e-4, dt: Optional[float] = None,
               workers: int = 1) -> ScanResult:
    """Radial frequencies against axial position at constant axial frequency.

    For each z the endcap voltages are re-solved and a full-RF trajectory is
    integrated; the radial frequencies are the spectral peaks of its motion
    along the two radial axes. method="pseudopotential" reads them from the
    effective-potential Hessian instead, without integrating. Mode labels follow
    eigenvector continuity from point to point. A failed point is recorded and
    the scan continues.
    """
    if method not in ("pseudopotential", "trajectory"):
        raise ValueError(f"unknown scan method {method!r}")
    z_values = np.asarray(z_targets, dtype=float)
    limit = model.geometry.blade_length / 8
    if np.any(np.abs(z_values) > limit):
        raise DomainError(f"scan positions must lie within +/-{limit:.3e} m",
                          bound="blade_length/8")
    if constant_axial is None:
        constant_axial = secular_frequencies(model, ion).omega_z

    jobs = [(model, ion, float(z), constant_axial, method, record_time, dt) for z in z_values]
    outcomes: List[Union[dict, str]] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_measure_point, job) for job in jobs]
            for future in futures:
                try:
                    outcomes.append(future.result())
                except TaperedTrapError as exc:
                    outcomes.append(str(exc))
    else:
        for job in jobs:
            try:
                outcomes.append(_measure_point(job))
            except TaperedTrapError as exc:
                outcomes.append(str(exc))

    n = len(z_values)
    nu = np.full((n, 3), np.nan)
    sigma = np.full((n, 2), np.nan)
    v_d = np.full((n, 2), np.nan)
    errors: Dict[int, str] = {}
    previous = None
    for i, outcome in enumerate(outcomes):
        if isinstance(outcome, str):
            errors[i] = outcome
            logger.warning("scan point z=%.3e m failed: %s", z_values[i], outcome)
            continue
        order = [0, 1]
        axes = outcome["axes"]
        if previous is not None:
            keep = abs(previous[:, 0] @ axes[:, 0]) + abs(previous[:, 1] @ axes[:, 1])
            swap = abs(previous[:, 0] @ axes[:, 1]) + abs(previous[:, 1] @ axes[:, 0])
            if swap > keep:
                order = [1, 0]
                axes = axes[:, order]
        previous = axes
        nu[i] = [outcome["nu"][order[0]], outcome["nu"][order[1]], outcome["nu"][2]]
        sigma[i] = [outcome["sigma"][order[0]], outcome["sigma"][order[1]]]
        v_d[i] = outcome["v_d"]
        logger.info("scan z=%.3e m: nu_x=%.6e Hz nu_y=%.6e Hz", z_values[i], nu[i, 0], nu[i, 1])

    return ScanResult(
        parameter="z_m",
        values=z_values,
        columns={"nu_x_Hz": nu[:, 0], "nu_y_Hz": nu[:, 1], "nu_z_Hz": nu[:, 2],
                 "v_d1_V": v_d[:, 0], "v_d2_V": v_d[:, 1]},
        uncertainties={"nu_x_Hz": sigma[:, 0], "nu_y_Hz": sigma[:, 1]},
        errors=errors,
        partial=bool(errors),
        metadata={"method": method, "omega_axial_rad_s": constant_axial},
    )


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Eq1Fit:
    """Taper-law fit w(z) = w0 / (1 - p z)^2 with p = tan(taper)/r0 shared by both modes.

    omega0 and its sigma are keyed by scan column; residual_norm is in rad/s.
    """
    omega0: Dict[str, float]
    omega0_sigma: Dict[str, float]
    p: float
    p_sigma: float
    residual_norm: float
    converged: bool
    n_points: int
    covariance: NDArray[np.float64] = field(repr=False)

    @property
    def epsilon(self) -> float:
        """Linear slope 2p of the taper law at z = 0 (1/m)."""
        return 2 * self.p

    def predict(self, column: str, z: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(radial_freq_eq1(z, self.omega0[column], math.atan(self.p), 1.0))


@dataclass(frozen=True)
class LinearFit:
    """w(z) = w0 (1 + epsilon z) per scan column, w0 in rad/s and epsilon in 1/m."""
    epsilon: Dict[str, float]
    epsilon_sigma: Dict[str, float]
    intercept: Dict[str, float]
    intercept_sigma: Dict[str, float]
    n_points: Dict[str, int]


def _fit_columns(scan: ScanResult, minimum: int) -> List[Tuple[str, NDArray, NDArray]]:
    data = []
    for name in RADIAL_COLUMNS:
        if name not in scan.columns:
            continue
        values = scan.column(name)
        ok = np.isfinite(values) & np.isfinite(scan.values)
        if ok.sum() < minimum:
            continue
        z = scan.values[ok]
        if len(np.unique(z)) < 2:
            raise FitError(f"degenerate data: all {name} points share one z")
        data.append((name, z, 2 * math.pi * values[ok]))
    if not data:
        raise FitError(f"need at least {minimum} points per axis")
    return data


def fit_linear_epsilon(scan: ScanResult) -> LinearFit:
    """Ordinary least squares of w against z, normalized by the intercept."""
    fits: Dict[str, Dict[str, float]] = {}
    for name, z, omega in _fit_columns(scan, 2):
        line = stats.linregress(z, omega)
        a, b = line.intercept, line.slope
        sa, sb = line.intercept_stderr, line.stderr
        cov_ab = -float(np.mean(z)) * sb ** 2
        var = sb ** 2 / a ** 2 + b ** 2 * sa ** 2 / a ** 4 - 2 * b * cov_ab / a ** 3
        fits[name] = {"epsilon": b / a, "sigma": math.sqrt(max(var, 0.0)),
                      "intercept": a, "intercept_sigma": sa, "n": len(z)}
    return LinearFit(
        epsilon={k: f["epsilon"] for k, f in fits.items()},
        epsilon_sigma={k: f["sigma"] for k, f in fits.items()},
        intercept={k: f["intercept"] for k, f in fits.items()},
        intercept_sigma={k: f["intercept_sigma"] for k, f in fits.items()},
        n_points={k: int(f["n"]) for k, f in fits.items()},
    )


def fit_eq1(scan: ScanResult, max_nfev: int = 200) -> Eq1Fit:
    """Levenberg-Marquardt fit of the taper law with an analytic Jacobian.

    Starts from the linear fit. Raises FitError on fewer than four points per
    axis or a rank-deficient Jacobian.
    """
    data = _fit_columns(scan, 4)
    names = [name for name, _, _ in data]
    # Work in scaled parameters: w0 relative to its start value and p in 1/mm.
    start_w0 = []
    start_p = []
    for _, z, omega in data:
        slope, intercept = np.polyfit(z, omega, 1)
        start_w0.append(intercept)
        start_p.append(slope / (2 * intercept))
    w_ref = np.array(start_w0)
    length = 1e-3
    scale = float(np.mean(w_ref))
    n_axes = len(data)

    def unpack(u: NDArray[np.float64]) -> Tuple[NDArray[np.float64], float]:
        return u[:n_axes] * w_ref, u[n_axes] / length

    def residual(u: NDArray[np.float64]) -> NDArray[np.float64]:
        w0, p = unpack(u)
        return np.concatenate([(w0[k] / (1 - p * z) ** 2 - omega) / scale
                               for k, (_, z, omega) in enumerate(data)])

    def jacobian(u: NDArray[np.float64]) -> NDArray[np.float64]:
        w0, p = unpack(u)
        blocks = []
        for k, (_, z, _) in enumerate(data):
            block = np.zeros((len(z), n_axes + 1))
            base = 1 / (1 - p * z)
            block[:, k] = w_ref[k] * base ** 2 / scale
            block[:, n_axes] = 2 * w0[k] * z * base ** 3 / (length * scale)
            blocks.append(block)
        return np.vstack(blocks)

    u0 = np.concatenate([np.ones(n_axes), [float(np.mean(start_p)) * length]])
    result = optimize.least_squares(residual, u0, jac=jacobian, method="lm",
                                    xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
    jac = jacobian(result.x)
    singular = np.linalg.svd(jac, compute_uv=False)
    if singular[-1] <= 1e-10 * singular[0]:
        raise FitError("degenerate data: rank-deficient Jacobian")
    n_points = sum(len(z) for _, z, _ in data)
    dof = n_points - (n_axes + 1)
    residual_sq = float(result.fun @ result.fun)
    s2 = residual_sq / dof if dof > 0 else math.nan
    cov_scaled = np.linalg.inv(jac.T @ jac) * s2
    units = np.concatenate([w_ref, [1 / length]])
    covariance = cov_scaled * np.outer(units, units)
    sigmas = np.sqrt(np.abs(np.diag(covariance)))
    w0, p = unpack(result.x)
    converged = result.status > 0
    if not converged:
        logger.warning("taper-law fit stopped after %d evaluations: %s",
                       result.nfev, result.message)
    logger.info("taper-law fit: p = %.6e 1/m, residual %.3e rad/s", p,
                math.sqrt(residual_sq) * scale)
    return Eq1Fit(
        omega0={name: float(w0[k]) for k, name in enumerate(names)},
        omega0_sigma={name: float(sigmas[k]) for k, name in enumerate(names)},
        p=float(p),
        p_sigma=float(sigmas[n_axes]),
        residual_norm=math.sqrt(residual_sq) * scale,
        converged=converged,
        n_points=n_points,
        covariance=covariance,
    )


# ---------------------------------------------------------------------------
# Micromotion
# ---------------------------------------------------------------------------

def micromotion_metric(traj: TrajectoryRecord, omega_rf: float) -> float:
    """Velocity amplitude (m/s) at the RF frequency, summed over the three axes.

    Uses the whole number of RF cycles at the start of the record.
    """
    period = 2 * math.pi / omega_rf
    if len(traj) < 2:
        raise SpectrumError("micromotion metric needs a sampled trajectory")
    _check_uniform(traj)
    if traj.sample_interval > period / 4:
        raise SpectrumError("fewer than four samples per RF cycle")
    span = traj.times[-1] - traj.times[0]
    cycles = step_count(span, period)
    if cycles < MIN_MICROMOTION_CYCLES:
        raise SpectrumError(
            f"micromotion metric needs at least {MIN_MICROMOTION_CYCLES} RF cycles, got {cycles}")
    count = step_count(cycles * period, traj.sample_interval)
    times = traj.times[:count]
    velocity = traj.velocities[:count]
    phasor = np.exp(-1j * omega_rf * times)
    component = 2 * (phasor @ velocity) / count
    return float(np.sum(np.abs(component)))


def predicted_micromotion_velocity(model: FieldModel, ion: IonSpecies, r: ArrayLike) -> float:
    """First-order micromotion velocity amplitude at r, summed over axes (m/s)."""
    omega = model.omega_rf
    if omega is None:
        return 0.0
    g_c, g_s = model.rf_phasor_gradients(r)
    return float(np.sum(np.hypot(g_c, g_s))) * abs(ion.charge) / (ion.mass * omega)


@dataclass(frozen=True)
class CompensationResult:
    """Differential compensation voltages (V_C1 - V_C3, V_C2 - V_C4) added to the drive."""
    optimum: Tuple[float, float]
    metric: float
    evaluations: int
    on_boundary: bool
    converged: bool
    equilibrium: Tuple[float, float, float]


def compensate(model: FieldModel, ion: IonSpecies,
               search_box: Tuple[Tuple[float, float], Tuple[float, float]],
               method: str = "trajectory", cycles: int = MIN_MICROMOTION_CYCLES,
               steps_per_cycle: int = 50, xatol: float = 0.05,
               max_evaluations: int = 400) -> CompensationResult:
    """Minimize micromotion over the two differential compensation voltages.

    Each evaluation finds the equilibrium of the compensated model, starts the
    ion on its micromotion orbit there, and measures micromotion_metric over
    the given number of RF cycles. method="pseudopotential" uses the
    first-order prediction instead of a trajectory. Nelder-Mead stops when the
    simplex is smaller than 2 * xatol volts.
    """
    if method not in ("trajectory", "pseudopotential"):
        raise ValueError(f"unknown compensation method {method!r}")
    omega = model.omega_rf
    if omega is None:
        raise ValueError("compensation needs a model with an RF drive")
    (lo13, hi13), (lo24, hi24) = search_box
    if not all(math.isfinite(v) for v in (lo13, hi13, lo24, hi24)):
        raise ValueError("search box bounds must be finite")
    if not (lo13 < hi13 and lo24 < hi24):
        raise ValueError("search box bounds must be increasing")
    base = model.drive
    dt = base.rf_period / steps_per_cycle
    evaluations = 0

    def shifted(d: Sequence[float]) -> Tuple[FieldModel, NDArray[np.float64]]:
        trial = model.with_drive(base.with_compensation(float(d[0]), float(d[1])))
        return trial, equilibrium_position(trial, ion)

    def objective(d: NDArray[np.float64]) -> float:
        nonlocal evaluations
        evaluations += 1
        try:
            trial, r_eq = shifted(d)
        except TaperedTrapError as exc:
            logger.debug("compensation trial %s rejected: %s", d, exc)
            return math.inf
        if method == "pseudopotential":
            return predicted_micromotion_velocity(trial, ion, r_eq)
        record = simulate(trial, ion, micromotion_start(trial, ion, r_eq),
                          cycles * base.rf_period, dt, sample_stride=1)
        if record.escaped:
            return math.inf
        return micromotion_metric(record, omega)

    lower, upper = np.array([lo13, lo24]), np.array([hi13, hi24])
    size = 0.1 * (upper - lower)

    def run_simplex(start: NDArray[np.float64]) -> optimize.OptimizeResult:
        # Edges point into the box so no vertex gets clipped.
        step = np.where(start + size <= upper, size, -size)
        simplex = np.array([start, start + [step[0], 0.0], start + [0.0, step[1]]])
        return optimize.minimize(
            objective, start, method="Nelder-Mead", bounds=list(zip(lower, upper)),
            options={"initial_simplex": simplex, "xatol": xatol, "fatol": math.inf,
                     "maxfev": max_evaluations})

    result = run_simplex((lower + upper) / 2)
    # One restart from the optimum: a collapsed simplex can stall on the
    # kinks of the metric.
    restart = run_simplex(np.asarray(result.x, dtype=float))
    if restart.fun <= result.fun:
        result = restart
    d13, d24 = (float(v) for v in result.x)
    margin13, margin24 = 0.01 * (hi13 - lo13), 0.01 * (hi24 - lo24)
    on_boundary = (d13 - lo13 < margin13 or hi13 - d13 < margin13
                   or d24 - lo24 < margin24 or hi24 - d24 < margin24)
    if on_boundary:
        logger.warning("compensation optimum (%.3f, %.3f) V is on the search-box boundary; "
                       "enlarge the box", d13, d24)
    _, r_eq = shifted((d13, d24))
    logger.info("compensation optimum (%.3f, %.3f) V after %d evaluations, metric %.3e m/s",
                d13, d24, evaluations, result.fun)
    return CompensationResult(
        optimum=(d13, d24),
        metric=float(result.fun),
        evaluations=evaluations,
        on_boundary=on_boundary,
        converged=bool(result.success),
        equilibrium=(float(r_eq[0]), float(r_eq[1]), float(r_eq[2])),
    )


# ---------------------------------------------------------------------------
# Principal axes seen by the camera
# ---------------------------------------------------------------------------

def _projected_weights(axes: NDArray[np.float64], plane_angle: float) -> Tuple[float, float]:
    direction = np.array([math.cos(plane_angle), math.sin(plane_angle), 0.0])
    return abs(float(axes[:, 0] @ direction)), abs(float(axes[:, 1] @ direction))


def axis_rotation_scan(model: FieldModel, ion: IonSpecies, v_c_values: Sequence[float],
                       plane_angle: float = C.IMAGING_PLANE_ANGLE, z: float = 0.0) -> ScanResult:
    """Principal-axis angle and camera-projected mode weights against mean(V_C).

    A radial mode with unit vector u appears in the imaging plane with its
    amplitude scaled by |u . p|, p being the in-plane direction of that plane
    at plane_angle to x.
    """
    values = np.asarray(v_c_values, dtype=float)
    n = len(values)
    angle = np.full(n, np.nan)
    weights = np.full((n, 2), np.nan)
    nu = np.full((n, 2), np.nan)
    errors: Dict[int, str] = {}
    for i, v in enumerate(values):
        trial = model.with_drive(model.drive.with_common_compensation(float(v)))
        try:
            secular = secular_frequencies(trial, ion, z)
            if abs(secular.omega_x - secular.omega_y) <= 1e-9 * secular.radial_mean:
                raise AxisError("undefined axes: radial modes are degenerate")
        except TaperedTrapError as exc:
            errors[i] = str(exc)
            logger.warning("axis scan at V_C = %.3f V failed: %s", v, exc)
            continue
        angle[i] = math.degrees(secular.axis_angle)
        weights[i] = _projected_weights(secular.axes, plane_angle)
        nu[i] = [secular.omega_x / (2 * math.pi), secular.omega_y / (2 * math.pi)]
    return ScanResult(
        parameter="v_c_V",
        values=values,
        columns={"angle_deg": angle, "weight_x": weights[:, 0], "weight_y": weights[:, 1],
                 "nu_x_Hz": nu[:, 0], "nu_y_Hz": nu[:, 1]},
        errors=errors,
        partial=bool(errors),
        metadata={"plane_angle_deg": math.degrees(plane_angle)},
    )


def balanced_common_voltage(model: FieldModel, ion: IonSpecies,
                            bracket: Tuple[float, float] = (0.0, 150.0),
                            plane_angle: float = C.IMAGING_PLANE_ANGLE,
                            z: float = 0.0) -> float:
    """mean(V_C) at which both radial modes project equally onto the imaging plane."""

    def imbalance(v: float) -> float:
        trial = model.with_drive(model.drive.with_common_compensation(v))
        w_x, w_y = _projected_weights(secular_frequencies(trial, ion, z).axes, plane_angle)
        return w_x - w_y

    lo, hi = bracket
    f_lo, f_hi = imbalance(lo), imbalance(hi)
    if f_lo * f_hi > 0:
        raise CalibrationError(
            f"projected weights do not cross between {lo} V and {hi} V")
    v = optimize.brentq(imbalance, lo, hi, xtol=1e-6)
    logger.info("balanced common compensation voltage: %.4f V", v)
    return float(v)
