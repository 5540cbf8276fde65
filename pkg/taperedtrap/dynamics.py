"""
Single-ion time-domain propagation with velocity Verlet.

The ion moves in the full time-dependent field of a FieldModel plus optional
laser forces: an intensity-modulated radiation-pressure force

    F_mod(t) = mod_force_amp * (1 + sin(mod_freq * t)) / 2 * mod_direction,

a linear drag -gamma * v standing in for Doppler cooling, and Poisson-distributed
recoil kicks of fixed momentum in random directions.

Each step moves the position with the current acceleration, evaluates the new
conservative acceleration, and closes the velocity update with the trapezoid
rule. The drag term enters the trapezoid implicitly, which keeps the step
time-reversible when drag is off.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from taperedtrap import constants as C
from taperedtrap.trapmodel import (
    DomainError,
    FieldModel,
    IonSpecies,
    TaperedTrapError,
    equilibrium_position,
    pseudopotential_hessian,
)

logger = logging.getLogger(__name__)

Vector = NDArray[np.float64]

# At least this many steps per RF cycle.
MIN_STEPS_PER_RF_CYCLE = 50
DEFAULT_STEPS_PER_RF_CYCLE = 200
DEFAULT_SAMPLE_STRIDE = 5

SETTLE_PERIODS = 200
MEASURE_PERIODS = 100


class EscapeError(TaperedTrapError):
    """The ion left the escape region; last_state is the final valid state."""

    def __init__(self, message: str, last_state: "IonState"):
        super().__init__(message)
        self.last_state = last_state


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class IonState:
    """Position (m), velocity (m/s) and time (s) of the ion."""
    position: Vector
    velocity: Vector
    time: float = 0.0

    def __post_init__(self) -> None:
        position = np.array(self.position, dtype=float)
        velocity = np.array(self.velocity, dtype=float)
        if position.shape != (3,) or velocity.shape != (3,):
            raise ValueError("position and velocity must be 3-vectors")
        if not (np.all(np.isfinite(position)) and np.all(np.isfinite(velocity))
                and math.isfinite(self.time)):
            raise ValueError("ion state must be finite")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "velocity", velocity)
        object.__setattr__(self, "time", float(self.time))

    @classmethod
    def at_rest(cls, position: ArrayLike = (0.0, 0.0, 0.0), time: float = 0.0) -> "IonState":
        return cls(np.asarray(position, dtype=float), np.zeros(3), time)

    def kinetic_energy(self, ion: IonSpecies) -> float:
        return 0.5 * ion.mass * float(self.velocity @ self.velocity)


@dataclass(frozen=True)
class ForceConfig:
    """Laser forces acting on the ion besides the trap field."""
    drag_coefficient: float = 0.0
    kick_rate: float = 0.0
    kick_momentum: float = 0.0
    mod_force_amp: float = 0.0
    mod_freq: float = 0.0
    mod_direction: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.drag_coefficient >= 0:
            raise ValueError(f"drag_coefficient must be >= 0, got {self.drag_coefficient}")
        if not self.kick_rate >= 0:
            raise ValueError(f"kick_rate must be >= 0, got {self.kick_rate}")
        if not self.kick_momentum >= 0:
            raise ValueError(f"kick_momentum must be >= 0, got {self.kick_momentum}")
        if not self.mod_freq >= 0:
            raise ValueError(f"mod_freq must be >= 0, got {self.mod_freq}")
        if len(self.mod_direction) != 3:
            raise ValueError("mod_direction needs three components")
        direction = tuple(float(c) for c in self.mod_direction)
        if abs(math.sqrt(sum(c * c for c in direction)) - 1.0) > 1e-9:
            raise ValueError(f"mod_direction must be a unit vector, got {direction}")
        object.__setattr__(self, "mod_direction", direction)

    def modulated_force(self, t: float) -> Vector:
        """Radiation-pressure force (N) at time t."""
        scale = self.mod_force_amp * (1 + math.sin(self.mod_freq * t)) / 2
        return scale * np.array(self.mod_direction)


@dataclass(eq=False)
class TrajectoryRecord:
    """Equally spaced samples of a trajectory.

    Sample k is taken after k * sample_stride steps. final_state is the state
    after the last completed step, which need not be a sample.
    """
    times: NDArray[np.float64]
    positions: NDArray[np.float64]
    velocities: NDArray[np.float64]
    dt: float
    sample_stride: int
    metadata: Dict[str, Any] = field(default_factory=dict)
    escaped: bool = False
    escape_reason: Optional[str] = None
    final_state: Optional[IonState] = None

    def __len__(self) -> int:
        return len(self.times)

    @property
    def sample_interval(self) -> float:
        return self.dt * self.sample_stride

    @property
    def samples(self) -> List[IonState]:
        return [IonState(p, v, t) for t, p, v in zip(self.times, self.positions, self.velocities)]

    def axis(self, index: int) -> NDArray[np.float64]:
        return self.positions[:, index]


@dataclass(eq=False)
class ScanResult:
    """Table of measurements against one scanned parameter.

    columns maps a name to one value per scan point; uncertainties reuses the
    column names. Failed points hold NaN and are listed in errors.
    """
    parameter: str
    values: NDArray[np.float64]
    columns: Dict[str, NDArray[np.float64]] = field(default_factory=dict)
    uncertainties: Dict[str, NDArray[np.float64]] = field(default_factory=dict)
    errors: Dict[int, str] = field(default_factory=dict)
    partial: bool = False
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        n = len(self.values)
        self.columns = {k: np.asarray(v, dtype=float) for k, v in self.columns.items()}
        self.uncertainties = {k: np.asarray(v, dtype=float)
                              for k, v in self.uncertainties.items()}
        for name, column in list(self.columns.items()) + list(self.uncertainties.items()):
            if len(column) != n:
                raise ValueError(f"column {name!r} has {len(column)} entries, expected {n}")
        for name, sigma in self.uncertainties.items():
            if name not in self.columns:
                raise ValueError(f"uncertainty for unknown column {name!r}")
            if np.any(sigma[np.isfinite(sigma)] < 0):
                raise ValueError(f"negative uncertainty in {name!r}")

    def __len__(self) -> int:
        return len(self.values)

    def column(self, name: str) -> NDArray[np.float64]:
        return self.columns[name]

    @property
    def header(self) -> List[str]:
        return ([self.parameter] + list(self.columns)
                + [f"sigma_{name}" for name in self.uncertainties])

    def rows(self) -> List[List[float]]:
        table = [self.values] + list(self.columns.values()) + list(self.uncertainties.values())
        return [[float(col[i]) for col in table] for i in range(len(self))]


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------

class _Propagator:
    """Verlet stepping with the conservative acceleration carried between steps."""

    def __init__(self, model: FieldModel, ion: IonSpecies, forces: ForceConfig,
                 dt: float, rng: Optional[np.random.Generator]):
        self.model = model
        self.mass = ion.mass
        self.q_over_m = ion.charge / ion.mass
        self.forces = forces
        self.dt = dt
        self.damping = forces.drag_coefficient / ion.mass
        self.rng = rng

    def acceleration(self, r: Vector, t: float) -> Vector:
        """Acceleration from the trap field and the modulated force."""
        a = -self.q_over_m * self.model.gradient(r, t)
        if self.forces.mod_force_amp:
            a = a + self.forces.modulated_force(t) / self.mass
        return a

    def advance(self, r: Vector, v: Vector, a_cons: Vector,
                t_new: float) -> Tuple[Vector, Vector, Vector]:
        dt = self.dt
        a = a_cons - self.damping * v
        r_new = r + v * dt + (0.5 * dt * dt) * a
        if not self.model.contains(r_new):
            raise _Escaped(f"ion left the escape region at t = {t_new:.6e} s")
        try:
            a_new = self.acceleration(r_new, t_new)
        except DomainError as exc:
            raise _Escaped(f"ion left the model domain at t = {t_new:.6e} s: {exc}") from exc
        v_new = (v + (0.5 * dt) * (a + a_new)) / (1 + 0.5 * dt * self.damping)
        if self.forces.kick_rate and self.rng is not None:
            v_new = v_new + self._kicks()
        return r_new, v_new, a_new

    def _kicks(self) -> Vector:
        assert self.rng is not None
        count = self.rng.poisson(self.forces.kick_rate * abs(self.dt))
        if not count:
            return np.zeros(3)
        directions = self.rng.normal(size=(count, 3))
        directions /= np.linalg.norm(directions, axis=1)[:, None]
        return directions.sum(axis=0) * (self.forces.kick_momentum / self.mass)


class _Escaped(Exception):
    pass


def _check_start(model: FieldModel, state: IonState) -> None:
    if not model.contains(state.position):
        raise DomainError(
            f"initial position {state.position} is outside the escape region",
            bound="escape region")


def step_verlet(state: IonState, model: FieldModel, ion: IonSpecies,
                forces: ForceConfig = ForceConfig(), dt: float = 1e-9,
                rng: Optional[np.random.Generator] = None) -> IonState:
    """Advance the ion by one step of dt (s).

    A negative dt steps backward in time and retraces a drag-free path. Kicks
    draw from rng, or from a generator seeded with forces.rng_seed and the
    bits of state.time, so successive steps draw independent kicks.
    """
    if dt == 0 or not math.isfinite(dt):
        raise ValueError(f"dt must be finite and non-zero, got {dt}")
    _check_start(model, state)
    if rng is None and forces.kick_rate:
        time_bits = int(np.float64(state.time).view(np.uint64))
        rng = np.random.default_rng([forces.rng_seed, time_bits])
    propagator = _Propagator(model, ion, forces, dt, rng)
    a = propagator.acceleration(state.position, state.time)
    t_new = state.time + dt
    try:
        r, v, _ = propagator.advance(state.position, state.velocity, a, t_new)
    except _Escaped as exc:
        raise EscapeError(str(exc), state) from None
    return IonState(r, v, t_new)


def step_count(duration: float, dt: float) -> int:
    """floor(duration/dt), treating ratios within 1e-9 of an integer as exact."""
    ratio = duration / dt
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
        return int(nearest)
    return int(math.floor(ratio))


def check_time_step(model: FieldModel, dt: float) -> None:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    omega = model.omega_rf
    if omega is not None and dt * omega > 2 * math.pi / MIN_STEPS_PER_RF_CYCLE * (1 + 1e-12):
        raise ValueError(
            f"dt = {dt:.3e} s gives fewer than {MIN_STEPS_PER_RF_CYCLE} steps per RF cycle")


def default_time_step(model: FieldModel, ion: IonSpecies,
                      position: ArrayLike = (0.0, 0.0, 0.0)) -> float:
    """RF period / 200, or a fortieth of the fastest secular period for static models."""
    if model.omega_rf is not None:
        return 2 * math.pi / model.omega_rf / DEFAULT_STEPS_PER_RF_CYCLE
    curvature = float(np.max(np.linalg.eigvalsh(pseudopotential_hessian(model, ion, position))))
    if not curvature > 0:
        raise ValueError("static model has no positive curvature to set a time step")
    return 2 * math.pi / math.sqrt(curvature / ion.mass) / 40


def simulate(model: FieldModel, ion: IonSpecies, initial: IonState, duration: float,
             dt: Optional[float] = None, forces: ForceConfig = ForceConfig(),
             sample_stride: int = DEFAULT_SAMPLE_STRIDE) -> TrajectoryRecord:
    """Propagate for duration (s) and sample every sample_stride steps.

    Returns floor(duration/dt/sample_stride) + 1 samples, the first being the
    initial state. An escape truncates the record and sets escaped.
    """
    if dt is None:
        dt = default_time_step(model, ion, initial.position)
    check_time_step(model, dt)
    if not duration >= 0:
        raise ValueError(f"duration must be >= 0, got {duration}")
    if sample_stride < 1:
        raise ValueError(f"sample_stride must be >= 1, got {sample_stride}")
    _check_start(model, initial)

    n_steps = step_count(duration, dt)
    n_samples = n_steps // sample_stride + 1
    times = np.empty(n_samples)
    positions = np.empty((n_samples, 3))
    velocities = np.empty((n_samples, 3))

    rng = np.random.default_rng(forces.rng_seed) if forces.kick_rate else None
    propagator = _Propagator(model, ion, forces, dt, rng)
    t0 = initial.time
    r, v = initial.position.copy(), initial.velocity.copy()
    a = propagator.acceleration(r, t0)
    times[0], positions[0], velocities[0] = t0, r, v
    filled = 1
    escaped, reason = False, None
    completed = 0
    for k in range(1, n_steps + 1):
        try:
            r, v, a = propagator.advance(r, v, a, t0 + k * dt)
        except _Escaped as exc:
            escaped, reason = True, str(exc)
            logger.warning("trajectory truncated: %s", reason)
            break
        completed = k
        if k % sample_stride == 0:
            times[filled] = t0 + k * dt
            positions[filled] = r
            velocities[filled] = v
            filled += 1

    metadata = {
        "model": type(model).__name__,
        "ion": ion.label,
        "duration_s": duration,
        "dt_s": dt,
        "sample_stride": sample_stride,
        "omega_rf_rad_s": model.omega_rf,
        **{f"forces.{k}": value for k, value in asdict(forces).items()},
    }
    logger.debug("simulated %d of %d steps (dt=%.3e s)", completed, n_steps, dt)
    return TrajectoryRecord(times[:filled], positions[:filled], velocities[:filled], dt,
                            sample_stride, metadata, escaped, reason,
                            IonState(r, v, t0 + completed * dt))


# ---------------------------------------------------------------------------
# Starting states and diagnostics
# ---------------------------------------------------------------------------

def thermal_state(ion: IonSpecies, temperature: float,
                  position: ArrayLike = (0.0, 0.0, 0.0),
                  rng: Optional[np.random.Generator] = None, time: float = 0.0) -> IonState:
    """State at position with a Maxwell-Boltzmann velocity at temperature (K)."""
    if not temperature >= 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    rng = rng if rng is not None else np.random.default_rng()
    sigma = math.sqrt(C.BOLTZMANN * temperature / ion.mass)
    return IonState(np.asarray(position, dtype=float), rng.normal(0.0, sigma, 3), time)


def micromotion_start(model: FieldModel, ion: IonSpecies, r_eq: ArrayLike,
                      t0: float = 0.0) -> IonState:
    """State on the first-order micromotion orbit about r_eq at time t0.

    The driven orbit is r_eq + q/(m w^2) (g_c cos wt + g_s sin wt), with g_c
    and g_s the RF phasor gradients at r_eq. Starting on it avoids exciting
    secular motion.
    """
    r_eq = np.asarray(r_eq, dtype=float)
    omega = model.omega_rf
    if omega is None:
        return IonState(r_eq, np.zeros(3), t0)
    g_c, g_s = model.rf_phasor_gradients(r_eq)
    scale = ion.charge / (ion.mass * omega ** 2)
    c, s = math.cos(omega * t0), math.sin(omega * t0)
    position = r_eq + scale * (g_c * c + g_s * s)
    velocity = scale * omega * (-g_c * s + g_s * c)
    return IonState(position, velocity, t0)


def energy_drift(record: TrajectoryRecord, model: FieldModel, ion: IonSpecies) -> float:
    """Secular relative energy drift over the record in a static model.

    The slope of a least-squares line through the sampled total energies, times
    the record length, over the mean energy.
    """
    if model.omega_rf is not None:
        raise ValueError("energy_drift needs a static model")
    if len(record) < 2:
        raise ValueError("energy_drift needs at least two samples")
    kinetic = 0.5 * ion.mass * np.einsum("ij,ij->i", record.velocities, record.velocities)
    potential = np.array([ion.charge * model.static_part(r) for r in record.positions])
    energy = kinetic + potential
    slope, _ = np.polyfit(record.times - record.times[0], energy, 1)
    span = record.times[-1] - record.times[0]
    return abs(slope * span) / abs(float(np.mean(energy)))


def write_trajectory_csv(record: TrajectoryRecord, path: Union[str, Path]) -> Path:
    """Write t,x,y,z,vx,vy,vz rows with metadata as leading '#' lines."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        for key in sorted(record.metadata):
            handle.write(f"# {key}={record.metadata[key]}\n")
        handle.write(f"# escaped={record.escaped}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["t", "x", "y", "z", "vx", "vy", "vz"])
        for t, r, v in zip(record.times, record.positions, record.velocities):
            writer.writerow([repr(float(t))] + [repr(float(c)) for c in r]
                            + [repr(float(c)) for c in v])
    return path


# ---------------------------------------------------------------------------
# Excitation sweeps
# ---------------------------------------------------------------------------

def lock_in_amplitude(record: TrajectoryRecord, omega: float) -> Vector:
    """Per-axis displacement amplitude (m) of the record at angular frequency omega.

    Only the leading samples closest to a whole number of drive periods are used.
    """
    period = 2 * math.pi / omega
    interval = record.sample_interval
    whole = math.floor(len(record) * interval / period)
    n = min(len(record), round(whole * period / interval)) if whole >= 1 else len(record)
    positions = record.positions[:n]
    displacement = positions - positions.mean(axis=0)
    phasor = np.exp(-1j * omega * record.times[:n])
    return np.abs(2 * (phasor @ displacement) / n)


def excitation_sweep(model: FieldModel, ion: IonSpecies, forces: ForceConfig,
                     freq_list: Sequence[float], direction: str = "down",
                     settle_time: Optional[float] = None,
                     measure_time: Optional[float] = None,
                     dt: Optional[float] = None,
                     initial: Optional[IonState] = None) -> ScanResult:
    """Steady-state response to the modulated force across modulation frequencies.

    freq_list is in rad/s and must be ordered along direction. The ion state
    carries over from one frequency to the next, so a strongly driven
    nonlinear mode shows hysteresis between up and down sweeps. Each point
    settles for settle_time (default 200 modulation periods) and measures over
    the whole number of periods closest to measure_time (default 100).
    """
    freqs = np.asarray(freq_list, dtype=float)
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    if len(freqs) == 0 or np.any(freqs <= 0):
        raise ValueError("freq_list must hold positive angular frequencies")
    steps = np.diff(freqs)
    if (direction == "up" and np.any(steps <= 0)) or (direction == "down" and np.any(steps >= 0)):
        raise ValueError(f"freq_list is not sorted for a {direction} sweep")

    if initial is None:
        initial = IonState.at_rest(equilibrium_position(model, ion))
    if dt is None:
        dt = default_time_step(model, ion, initial.position)
        dt = min(dt, 2 * math.pi / float(freqs.max()) / 40)
    state = initial
    amplitudes = np.full((len(freqs), 3), np.nan)
    errors: Dict[int, str] = {}
    partial = False
    for i, omega in enumerate(freqs):
        period = 2 * math.pi / omega
        point_forces = replace(forces, mod_freq=float(omega))
        settle = settle_time if settle_time is not None else SETTLE_PERIODS * period
        periods = max(1, round(measure_time / period)) if measure_time is not None \
            else MEASURE_PERIODS
        stride = max(1, int(period / (20 * dt)))
        settled = simulate(model, ion, state, settle, dt, point_forces,
                           sample_stride=max(1, step_count(settle, dt)))
        state = settled.final_state or state
        reason = settled.escape_reason if settled.escaped else None
        if reason is None:
            measured = simulate(model, ion, state, periods * period, dt, point_forces, stride)
            state = measured.final_state or state
            if measured.escaped:
                reason = measured.escape_reason
        if reason is not None:
            errors[i] = reason
            partial = True
            logger.warning("sweep stopped at %.6e rad/s: %s", omega, reason)
            break
        amplitudes[i] = lock_in_amplitude(measured, omega)
        logger.info("sweep %s f=%.6e Hz amplitude=%s m", direction, omega / (2 * math.pi),
                    np.array2string(amplitudes[i], precision=3))
    return ScanResult(
        parameter="f_mod_Hz",
        values=freqs / (2 * math.pi),
        columns={"amp_x_m": amplitudes[:, 0], "amp_y_m": amplitudes[:, 1],
                 "amp_z_m": amplitudes[:, 2]},
        errors=errors,
        partial=partial,
        metadata={"direction": direction, "dt_s": dt,
                  "mod_force_amp_N": forces.mod_force_amp},
    )
