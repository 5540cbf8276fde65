"""
Tapered Paul trap: geometry, drive, field models and closed-form predictions.

The RF blades of the trap are inclined to the axis by the taper angle, so the
local blade-to-axis distance shrinks along +z:

    rho(z) = r0 - z * tan(taper_angle)

and radial confinement strengthens toward +z. The analytic backend is the
near-axis expansion

    Phi_RF = kappa_rf * [V1(t) x^2 + V2(t) y^2] / rho(z)^2
    Phi_DC = kappa_axial * Vs * (z^2 - (x^2 + y^2)/2) / (gap/2)^2
             + kappa_axial * (V_D1 - V_D2) * z / gap
    Phi_C  = beta_dipole * [(V_C1 - V_C3) x' + (V_C2 - V_C4) y']
             + beta_quad_xy * mean(V_C) * x * y
    Phi_stray = -E_s . r

with x', y' along the diagonal compensation-electrode directions.

Every backend is a FieldModel. A FieldModel splits its potential into a static
part and an RF part written as two phasors,

    Phi(r, t) = Phi_static(r) + A_c(r) cos(w t) + A_s(r) sin(w t),

which keeps the pseudopotential exact for drives whose two blade pairs are not
exactly in antiphase.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize

from taperedtrap import constants as C

logger = logging.getLogger(__name__)

Vector = NDArray[np.float64]

# Central-difference steps (m).
HESSIAN_STEP = 1e-7
GRADIENT_CHECK_STEP = 1e-8

# Escape cylinder radius as a fraction of the local blade distance.
ESCAPE_RADIUS_FRACTION = 0.9


class TaperedTrapError(Exception):
    """Base class for every error raised by taperedtrap."""


class DomainError(TaperedTrapError):
    """Position or parameter outside the region where a model is valid."""

    def __init__(self, message: str, bound: str):
        super().__init__(message)
        self.bound = bound


class UnstableConfigurationError(TaperedTrapError):
    """The effective potential has no stable minimum."""


class CalibrationError(TaperedTrapError):
    """No stable drive reproduces the requested frequencies."""


class AxisError(TaperedTrapError):
    """Radial modes are degenerate, so principal axes are undefined."""


def _as_vector(r: ArrayLike) -> Vector:
    v = np.asarray(r, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    return v


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IonSpecies:
    """A singly trapped ion: mass in kg, charge in C."""
    mass: float
    charge: float
    label: str = "ion"

    def __post_init__(self) -> None:
        if not self.mass > 0:
            raise ValueError(f"ion mass must be positive, got {self.mass}")
        if self.charge == 0:
            raise ValueError("ion charge must be non-zero")

    @classmethod
    def calcium40(cls) -> "IonSpecies":
        return cls(mass=C.CA40_ION_MASS, charge=C.ELEMENTARY_CHARGE, label="40Ca+")


@dataclass(frozen=True)
class TrapGeometry:
    """Electrode dimensions of the tapered trap (SI)."""
    taper_angle: float = C.TAPER_ANGLE
    r0: float = C.R0
    blade_length: float = C.BLADE_LENGTH
    endcap_gap: float = C.ENDCAP_GAP
    endcap_hole_diam: float = C.ENDCAP_HOLE_DIAM
    comp_diag_distance: float = C.COMP_DIAG_DISTANCE
    comp_diam: float = C.COMP_DIAM

    def __post_init__(self) -> None:
        # Negative angles describe the mirrored trap (narrowing toward -z).
        if not abs(self.taper_angle) < math.pi / 4:
            raise ValueError(
                f"taper angle must satisfy |angle| < pi/4, got {self.taper_angle}")
        for name in ("r0", "blade_length", "endcap_gap", "endcap_hole_diam",
                     "comp_diag_distance", "comp_diam"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def tan_taper(self) -> float:
        return math.tan(self.taper_angle)

    def rho(self, z: float) -> float:
        """Local blade-to-axis distance at axial position z."""
        return self.r0 - z * self.tan_taper

    def check_position(self, r: ArrayLike) -> None:
        """Raise DomainError if r is outside the analytic model's validity region."""
        z = float(np.asarray(r, dtype=float)[2])
        if not abs(z) < self.blade_length / 2:
            raise DomainError(
                f"|z| = {abs(z):.3e} m is not below blade_length/2 = "
                f"{self.blade_length / 2:.3e} m", bound="blade_length/2")
        if not self.rho(z) > 0:
            raise DomainError(
                f"rho(z) = {self.rho(z):.3e} m is not positive at z = {z:.3e} m",
                bound="rho(z) > 0")

    def inside_escape_region(self, r: ArrayLike) -> bool:
        """Cylinder of radius 0.9 rho(z), |z| within the endcaps and the blades."""
        x, y, z = (float(c) for c in r)
        if abs(z) > self.endcap_gap / 2 or not abs(z) < self.blade_length / 2:
            return False
        rho = self.rho(z)
        return rho > 0 and math.hypot(x, y) <= ESCAPE_RADIUS_FRACTION * rho


@dataclass(frozen=True)
class DriveConfig:
    """RF drive and static electrode voltages.

    v_comp holds V_C1..V_C4. C1/C3 sit on the +x'/-x' diagonal and C2/C4 on
    the +y'/-y' diagonal, where x' = (x+y)/sqrt(2) and y' = (y-x)/sqrt(2).
    """
    omega_rf: float = 2 * math.pi * C.RF_FREQUENCY
    v_rf1: float = C.RF_AMPLITUDE * (1 + C.RADIAL_SPLITTING / 2)
    v_rf2: float = C.RF_AMPLITUDE * (1 - C.RADIAL_SPLITTING / 2)
    phase_diff: float = C.RF_PHASE_DIFF
    v_d1: float = C.ENDCAP_VOLTAGE
    v_d2: float = C.ENDCAP_VOLTAGE
    v_comp: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    kappa_axial: float = C.KAPPA_AXIAL
    kappa_rf: float = C.KAPPA_RF_BLADES
    beta_dipole: float = C.BETA_DIPOLE
    beta_quad_xy: float = C.BETA_QUAD_XY
    stray_field: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not self.omega_rf > 0:
            raise ValueError(f"omega_rf must be positive, got {self.omega_rf}")
        if abs(self.phase_diff - math.pi) > 0.2:
            raise ValueError(
                f"phase_diff must be within pi +/- 0.2 rad, got {self.phase_diff}")
        if len(self.v_comp) != 4:
            raise ValueError("v_comp needs four voltages V_C1..V_C4")
        if len(self.stray_field) != 3:
            raise ValueError("stray_field needs three components")
        if not self.kappa_rf > 0:
            raise ValueError(f"kappa_rf must be positive, got {self.kappa_rf}")
        object.__setattr__(self, "v_comp", tuple(float(v) for v in self.v_comp))
        object.__setattr__(self, "stray_field", tuple(float(v) for v in self.stray_field))

    @classmethod
    def symmetric(cls, v_rf: float, asymmetry: float = 0.0, **kwargs: object) -> "DriveConfig":
        """Drive with mean amplitude v_rf and (V1 - V2)/mean = asymmetry.

        Defaults to an exact antiphase drive (phase_diff = pi).
        """
        kwargs.setdefault("phase_diff", math.pi)
        return cls(v_rf1=v_rf * (1 + asymmetry / 2), v_rf2=v_rf * (1 - asymmetry / 2),
                   **kwargs)  # type: ignore[arg-type]

    @property
    def rf_period(self) -> float:
        return 2 * math.pi / self.omega_rf

    @property
    def v_rf(self) -> float:
        return (self.v_rf1 + self.v_rf2) / 2

    @property
    def asymmetry(self) -> float:
        return (self.v_rf1 - self.v_rf2) / self.v_rf

    @property
    def endcap_common(self) -> float:
        return (self.v_d1 + self.v_d2) / 2

    @property
    def v_comp_common(self) -> float:
        return sum(self.v_comp) / 4

    @property
    def comp_differentials(self) -> Tuple[float, float]:
        """(V_C1 - V_C3, V_C2 - V_C4)."""
        c1, c2, c3, c4 = self.v_comp
        return c1 - c3, c2 - c4

    def scaled_rf(self, factor: float) -> "DriveConfig":
        return replace(self, v_rf1=self.v_rf1 * factor, v_rf2=self.v_rf2 * factor)

    def with_endcaps(self, common: float, differential: float = 0.0) -> "DriveConfig":
        return replace(self, v_d1=common + differential / 2, v_d2=common - differential / 2)

    def with_compensation(self, d13: float, d24: float) -> "DriveConfig":
        """Add opposite-sign changes to opposite electrodes (common mode untouched)."""
        c1, c2, c3, c4 = self.v_comp
        return replace(self, v_comp=(c1 + d13 / 2, c2 + d24 / 2, c3 - d13 / 2, c4 - d24 / 2))

    def with_common_compensation(self, v_common: float) -> "DriveConfig":
        """Set mean(V_C) to v_common keeping both differentials."""
        shift = v_common - self.v_comp_common
        return replace(self, v_comp=tuple(v + shift for v in self.v_comp))  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Field models
# ---------------------------------------------------------------------------

class FieldModel:
    """Interface for electric field backends.

    Subclasses implement the static part and the two RF phasors; potential()
    and gradient() combine them at a given time.
    """

    geometry: TrapGeometry
    drive: DriveConfig

    @property
    def omega_rf(self) -> Optional[float]:
        """RF angular frequency, or None for a static model."""
        return self.drive.omega_rf

    def check_position(self, r: ArrayLike) -> None:
        self.geometry.check_position(r)

    def contains(self, r: ArrayLike) -> bool:
        """True while r is inside the escape region."""
        return self.geometry.inside_escape_region(r)

    def with_drive(self, drive: DriveConfig) -> "FieldModel":
        """Same backend and geometry with a different drive."""
        raise NotImplementedError

    def static_part(self, r: ArrayLike) -> float:
        raise NotImplementedError

    def static_gradient(self, r: ArrayLike) -> Vector:
        raise NotImplementedError

    def rf_phasor_potentials(self, r: ArrayLike) -> Tuple[float, float]:
        """(A_c, A_s) with Phi_RF = A_c cos(wt) + A_s sin(wt)."""
        raise NotImplementedError

    def rf_phasor_gradients(self, r: ArrayLike) -> Tuple[Vector, Vector]:
        raise NotImplementedError

    def rf_phasor_hessians(self, r: ArrayLike) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Hessians of A_c and A_s by central differences of their gradients."""
        r = _as_vector(r)
        hc = np.empty((3, 3))
        hs = np.empty((3, 3))
        for j in range(3):
            step = np.zeros(3)
            step[j] = HESSIAN_STEP
            gc_p, gs_p = self.rf_phasor_gradients(r + step)
            gc_m, gs_m = self.rf_phasor_gradients(r - step)
            hc[:, j] = (gc_p - gc_m) / (2 * HESSIAN_STEP)
            hs[:, j] = (gs_p - gs_m) / (2 * HESSIAN_STEP)
        return (hc + hc.T) / 2, (hs + hs.T) / 2

    def static_hessian(self, r: ArrayLike) -> NDArray[np.float64]:
        r = _as_vector(r)
        h = np.empty((3, 3))
        for j in range(3):
            step = np.zeros(3)
            step[j] = HESSIAN_STEP
            h[:, j] = (self.static_gradient(r + step)
                       - self.static_gradient(r - step)) / (2 * HESSIAN_STEP)
        return (h + h.T) / 2

    def potential(self, r: ArrayLike, t: float) -> float:
        """Electric potential (V) at position r and time t."""
        self.check_position(r)
        value = self.static_part(r)
        if self.omega_rf is not None:
            a_c, a_s = self.rf_phasor_potentials(r)
            phase = self.omega_rf * t
            value += a_c * math.cos(phase) + a_s * math.sin(phase)
        return value

    def gradient(self, r: ArrayLike, t: float) -> Vector:
        """Potential gradient (V/m) at position r and time t."""
        self.check_position(r)
        g = self.static_gradient(r)
        if self.omega_rf is not None:
            g_c, g_s = self.rf_phasor_gradients(r)
            phase = self.omega_rf * t
            g = g + g_c * math.cos(phase) + g_s * math.sin(phase)
        return g


class AnalyticFieldModel(FieldModel):
    """Closed-form near-axis field of the tapered trap."""

    def __init__(self, geometry: TrapGeometry, drive: DriveConfig):
        self.geometry = geometry
        self.drive = drive
        k = drive.kappa_rf
        dphi = drive.phase_diff - math.pi
        # (cos, sin) phasor coefficients of the x^2 and y^2 terms.
        self._rf_x = (k * drive.v_rf1, 0.0)
        self._rf_y = (-k * drive.v_rf2 * math.cos(dphi), k * drive.v_rf2 * math.sin(dphi))
        half_gap = geometry.endcap_gap / 2
        self._c_dc = drive.kappa_axial * drive.endcap_common / half_gap ** 2
        self._lin_dc = drive.kappa_axial * (drive.v_d1 - drive.v_d2) / geometry.endcap_gap
        d13, d24 = drive.comp_differentials
        ex, ey, ez = drive.stray_field
        s2 = math.sqrt(2.0)
        self._lin = (drive.beta_dipole * (d13 - d24) / s2 - ex,
                     drive.beta_dipole * (d13 + d24) / s2 - ey,
                     self._lin_dc - ez)
        self._q_xy = drive.beta_quad_xy * drive.v_comp_common
        self._tan = geometry.tan_taper

    def __repr__(self) -> str:
        return f"AnalyticFieldModel({self.geometry!r}, {self.drive!r})"

    def with_drive(self, drive: DriveConfig) -> "AnalyticFieldModel":
        return AnalyticFieldModel(self.geometry, drive)

    def _rho(self, z: float) -> float:
        if not abs(z) < self.geometry.blade_length / 2:
            self.geometry.check_position((0.0, 0.0, z))
        rho = self.geometry.r0 - z * self._tan
        if not rho > 0:
            self.geometry.check_position((0.0, 0.0, z))
        return rho

    def static_part(self, r: ArrayLike) -> float:
        x, y, z = (float(c) for c in r)
        lx, ly, lz = self._lin
        return (self._c_dc * (z * z - (x * x + y * y) / 2)
                + lx * x + ly * y + lz * z + self._q_xy * x * y)

    def static_gradient(self, r: ArrayLike) -> Vector:
        x, y, z = (float(c) for c in r)
        lx, ly, lz = self._lin
        return np.array([-self._c_dc * x + lx + self._q_xy * y,
                         -self._c_dc * y + ly + self._q_xy * x,
                         2 * self._c_dc * z + lz])

    def static_hessian(self, r: ArrayLike) -> NDArray[np.float64]:
        c, q = self._c_dc, self._q_xy
        return np.array([[-c, q, 0.0], [q, -c, 0.0], [0.0, 0.0, 2 * c]])

    def rf_phasor_potentials(self, r: ArrayLike) -> Tuple[float, float]:
        x, y, z = (float(c) for c in r)
        inv = 1.0 / self._rho(z) ** 2
        return ((self._rf_x[0] * x * x + self._rf_y[0] * y * y) * inv,
                (self._rf_x[1] * x * x + self._rf_y[1] * y * y) * inv)

    def _phasor_gradient(self, a: float, b: float, x: float, y: float,
                         inv: float, rho: float) -> Vector:
        return np.array([2 * a * x * inv, 2 * b * y * inv,
                         (a * x * x + b * y * y) * 2 * self._tan * inv / rho])

    def rf_phasor_gradients(self, r: ArrayLike) -> Tuple[Vector, Vector]:
        x, y, z = (float(c) for c in r)
        rho = self._rho(z)
        inv = 1.0 / rho ** 2
        return (self._phasor_gradient(self._rf_x[0], self._rf_y[0], x, y, inv, rho),
                self._phasor_gradient(self._rf_x[1], self._rf_y[1], x, y, inv, rho))

    def _phasor_hessian(self, a: float, b: float, x: float, y: float,
                        inv: float, rho: float) -> NDArray[np.float64]:
        t = self._tan
        xz = 4 * a * x * t * inv / rho
        yz = 4 * b * y * t * inv / rho
        zz = (a * x * x + b * y * y) * 6 * t * t * inv / rho ** 2
        return np.array([[2 * a * inv, 0.0, xz], [0.0, 2 * b * inv, yz], [xz, yz, zz]])

    def rf_phasor_hessians(self, r: ArrayLike) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        x, y, z = (float(c) for c in r)
        rho = self._rho(z)
        inv = 1.0 / rho ** 2
        return (self._phasor_hessian(self._rf_x[0], self._rf_y[0], x, y, inv, rho),
                self._phasor_hessian(self._rf_x[1], self._rf_y[1], x, y, inv, rho))

    def potential(self, r: ArrayLike, t: float) -> float:
        x, y, z = (float(c) for c in r)
        inv = 1.0 / self._rho(z) ** 2
        phase = self.drive.omega_rf * t
        cs, sn = math.cos(phase), math.sin(phase)
        a = self._rf_x[0] * cs + self._rf_x[1] * sn
        b = self._rf_y[0] * cs + self._rf_y[1] * sn
        return self.static_part((x, y, z)) + (a * x * x + b * y * y) * inv

    def gradient(self, r: ArrayLike, t: float) -> Vector:
        # Scalar arithmetic: this sits inside the integrator loop.
        x, y, z = (float(c) for c in r)
        rho = self._rho(z)
        inv = 1.0 / (rho * rho)
        phase = self.drive.omega_rf * t
        cs, sn = math.cos(phase), math.sin(phase)
        a = self._rf_x[0] * cs + self._rf_x[1] * sn
        b = self._rf_y[0] * cs + self._rf_y[1] * sn
        lx, ly, lz = self._lin
        c, q = self._c_dc, self._q_xy
        return np.array([
            2 * a * x * inv - c * x + lx + q * y,
            2 * b * y * inv - c * y + ly + q * x,
            (a * x * x + b * y * y) * 2 * self._tan * inv / rho + 2 * c * z + lz,
        ])


class EffectiveFieldModel(FieldModel):
    """Static model whose potential is the pseudopotential energy per charge.

    Integrating in this model follows secular motion only, with time steps
    set by the secular rather than the RF period.
    """

    def __init__(self, model: FieldModel, ion: IonSpecies):
        self.base = model
        self.ion = ion
        self.geometry = model.geometry
        self.drive = model.drive

    @property
    def omega_rf(self) -> Optional[float]:
        return None

    def check_position(self, r: ArrayLike) -> None:
        self.base.check_position(r)

    def contains(self, r: ArrayLike) -> bool:
        return self.base.contains(r)

    def with_drive(self, drive: DriveConfig) -> "EffectiveFieldModel":
        return EffectiveFieldModel(self.base.with_drive(drive), self.ion)

    def static_part(self, r: ArrayLike) -> float:
        return pseudopotential(self.base, self.ion, r) / self.ion.charge

    def static_gradient(self, r: ArrayLike) -> Vector:
        return pseudopotential_gradient(self.base, self.ion, r) / self.ion.charge

    def rf_phasor_potentials(self, r: ArrayLike) -> Tuple[float, float]:
        return 0.0, 0.0

    def rf_phasor_gradients(self, r: ArrayLike) -> Tuple[Vector, Vector]:
        return np.zeros(3), np.zeros(3)

    def rf_phasor_hessians(self, r: ArrayLike) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        return np.zeros((3, 3)), np.zeros((3, 3))


def analytic_potential(geom: TrapGeometry, drive: DriveConfig, r: ArrayLike,
                       t: float) -> float:
    """Potential of the analytic tapered-trap model at (r, t)."""
    return AnalyticFieldModel(geom, drive).potential(r, t)


# ---------------------------------------------------------------------------
# Pseudopotential and secular motion
# ---------------------------------------------------------------------------

def _rf_prefactor(model: FieldModel, ion: IonSpecies) -> float:
    omega = model.omega_rf
    if omega is None:
        return 0.0
    return ion.charge ** 2 / (4 * ion.mass * omega ** 2)


def pseudopotential(model: FieldModel, ion: IonSpecies, r: ArrayLike) -> float:
    """Effective energy (J): q^2 <|grad Phi_RF|^2> / (4 m w^2) + q Phi_static.

    <|grad Phi_RF|^2> is |g_c|^2 + |g_s|^2, which equals |grad A|^2 for an
    in-phase drive.
    """
    r = _as_vector(r)
    model.check_position(r)
    energy = ion.charge * model.static_part(r)
    pref = _rf_prefactor(model, ion)
    if pref:
        g_c, g_s = model.rf_phasor_gradients(r)
        energy += pref * (float(g_c @ g_c) + float(g_s @ g_s))
    return energy


def pseudopotential_gradient(model: FieldModel, ion: IonSpecies, r: ArrayLike) -> Vector:
    """Gradient (N) of the effective energy."""
    r = _as_vector(r)
    model.check_position(r)
    grad = ion.charge * model.static_gradient(r)
    pref = _rf_prefactor(model, ion)
    if pref:
        g_c, g_s = model.rf_phasor_gradients(r)
        h_c, h_s = model.rf_phasor_hessians(r)
        grad = grad + 2 * pref * (h_c @ g_c + h_s @ g_s)
    return grad


def pseudopotential_hessian(model: FieldModel, ion: IonSpecies, r: ArrayLike,
                            step: float = HESSIAN_STEP) -> NDArray[np.float64]:
    """3x3 Hessian (N/m) by central differences of the effective-energy gradient."""
    r = _as_vector(r)
    h = np.empty((3, 3))
    for j in range(3):
        dr = np.zeros(3)
        dr[j] = step
        h[:, j] = (pseudopotential_gradient(model, ion, r + dr)
                   - pseudopotential_gradient(model, ion, r - dr)) / (2 * step)
    return (h + h.T) / 2


@dataclass(frozen=True)
class SecularResult:
    """Secular frequencies (rad/s) ordered x-like, y-like, z-like.

    axes holds the matching unit eigenvectors as columns; position is the
    effective-potential minimum they were evaluated at.
    """
    omega: Tuple[float, float, float]
    axes: NDArray[np.float64] = field(repr=False)
    position: Tuple[float, float, float]

    def __iter__(self) -> Iterator[float]:
        return iter(self.omega)

    @property
    def omega_x(self) -> float:
        return self.omega[0]

    @property
    def omega_y(self) -> float:
        return self.omega[1]

    @property
    def omega_z(self) -> float:
        return self.omega[2]

    @property
    def radial_mean(self) -> float:
        return (self.omega[0] + self.omega[1]) / 2

    @property
    def axis_angle(self) -> float:
        """Angle of the x-like axis to the lab x-axis, in (-pi/2, pi/2]."""
        angle = math.atan2(self.axes[1, 0], self.axes[0, 0])
        if angle <= -math.pi / 2:
            angle += math.pi
        elif angle > math.pi / 2:
            angle -= math.pi
        return angle


def _order_axes(vectors: NDArray[np.float64]) -> list:
    """Column order (x-like, y-like, z-like) by eigenvector dominance."""
    remaining = [0, 1, 2]
    order = []
    for component in (0, 1):
        # argmax keeps the first (lowest-eigenvalue) column on ties.
        best = max(remaining, key=lambda k: (abs(vectors[component, k]), -k))
        order.append(best)
        remaining.remove(best)
    order.append(remaining[0])
    return order


def _minimize_effective(model: FieldModel, ion: IonSpecies, start: Vector,
                        free: Sequence[int]) -> Vector:
    """Minimize the effective potential over the coordinates listed in free."""
    length = 1e-6
    idx = list(free)
    h0 = pseudopotential_hessian(model, ion, start)[np.ix_(idx, idx)]
    curvature = float(np.trace(h0)) / len(idx)
    if not curvature > 0 or np.linalg.eigvalsh(h0)[0] <= 0:
        raise UnstableConfigurationError(
            f"unstable configuration: curvature not positive at {start}")
    scale = curvature * length ** 2

    def point(u: Vector) -> Vector:
        r = start.copy()
        r[idx] = u * length
        return r

    def energy(u: Vector) -> float:
        return pseudopotential(model, ion, point(u)) / scale

    def grad(u: Vector) -> Vector:
        return pseudopotential_gradient(model, ion, point(u))[idx] * length / scale

    def hess(u: Vector) -> NDArray[np.float64]:
        h = pseudopotential_hessian(model, ion, point(u))
        return h[np.ix_(idx, idx)] * length ** 2 / scale

    result = optimize.minimize(energy, start[idx] / length, jac=grad, hess=hess,
                               method="trust-exact", options={"gtol": 1e-10})
    logger.debug("effective minimum over %s: %s (%s)", idx, point(result.x), result.message)
    return point(result.x)


def radial_minimum(model: FieldModel, ion: IonSpecies, z: float,
                   start: Sequence[float] = (0.0, 0.0)) -> Vector:
    """Effective-potential minimum in the x-y plane at fixed z."""
    return _minimize_effective(model, ion, np.array([start[0], start[1], z], dtype=float), (0, 1))


def equilibrium_position(model: FieldModel, ion: IonSpecies,
                         start: Sequence[float] = (0.0, 0.0, 0.0)) -> Vector:
    """Effective-potential minimum in all three coordinates."""
    return _minimize_effective(model, ion, np.asarray(start, dtype=float).copy(), (0, 1, 2))


def secular_frequencies(model: FieldModel, ion: IonSpecies, z: float = 0.0,
                        step: float = HESSIAN_STEP) -> SecularResult:
    """Secular frequencies at the radial effective-potential minimum at z."""
    position = radial_minimum(model, ion, z)
    hessian = pseudopotential_hessian(model, ion, position, step)
    values, vectors = np.linalg.eigh(hessian)
    if values[0] <= 0:
        raise UnstableConfigurationError(
            f"unstable configuration: Hessian eigenvalues {values} at z = {z:.3e} m")
    order = _order_axes(vectors)
    axes = vectors[:, order]
    for k in range(3):
        if axes[k, k] < 0:
            axes[:, k] = -axes[:, k]
    omegas = np.sqrt(values[order] / ion.mass)
    return SecularResult(omega=(float(omegas[0]), float(omegas[1]), float(omegas[2])),
                         axes=axes,
                         position=(float(position[0]), float(position[1]), float(position[2])))


def radial_freq_eq1(z: ArrayLike, omega0: float, taper_angle: float, r0: float):
    """Radial frequency vs axial position: omega0 / (1 - z tan(angle)/r0)^2."""
    z_arr = np.asarray(z, dtype=float)
    denominator = 1.0 - z_arr * math.tan(taper_angle) / r0
    if np.any(denominator <= 0):
        raise DomainError("z tan(angle)/r0 reaches the pole at 1", bound="z*tan/r0 < 1")
    result = omega0 / denominator ** 2
    return float(result) if result.ndim == 0 else result


# ---------------------------------------------------------------------------
# Mathieu parameters
# ---------------------------------------------------------------------------

def _a_lower(q: float) -> float:
    return -q ** 2 / 2 + 7 * q ** 4 / 128 - 29 * q ** 6 / 2304


def _b_upper(q: float) -> float:
    return 1 - q - q ** 2 / 8 + q ** 3 / 64 - q ** 4 / 1536 - 11 * q ** 5 / 36864


@dataclass(frozen=True)
class MathieuParameters:
    """Radial Mathieu parameters; q values are RF curvature amplitudes (>= 0)."""
    q_x: float
    q_y: float
    a_x: float
    a_y: float

    def violations(self) -> list:
        """Human-readable list of violated first-region stability bounds."""
        problems = []
        for axis, a, q in (("x", self.a_x, self.q_x), ("y", self.a_y, self.q_y)):
            if q >= C.MATHIEU_Q_MAX:
                problems.append(f"q_{axis} = {q:.4f} >= {C.MATHIEU_Q_MAX}")
            elif not _a_lower(q) < a < _b_upper(q):
                problems.append(
                    f"a_{axis} = {a:.5f} outside first region "
                    f"({_a_lower(q):.5f}, {_b_upper(q):.5f}) at q = {q:.4f}")
        return problems

    @property
    def stable(self) -> bool:
        return not self.violations()


def mathieu_parameters(model: FieldModel, ion: IonSpecies, z: float = 0.0) -> MathieuParameters:
    """Mathieu a and q of both radial axes on the trap axis at z.

    q = 2 Q H_RF / (m w^2) from the RF curvature amplitude, a = 4 Q H_static / (m w^2).
    """
    omega = model.omega_rf
    if omega is None:
        raise TaperedTrapError("Mathieu parameters need an RF-driven model")
    r = np.array([0.0, 0.0, z])
    h_c, h_s = model.rf_phasor_hessians(r)
    h_static = model.static_hessian(r)
    norm = ion.charge / (ion.mass * omega ** 2)
    q = [2 * norm * math.hypot(h_c[k, k], h_s[k, k]) for k in (0, 1)]
    a = [4 * norm * h_static[k, k] for k in (0, 1)]
    return MathieuParameters(q_x=abs(q[0]), q_y=abs(q[1]), a_x=a[0], a_y=a[1])


def mathieu_secular_frequency(a: float, q: float, omega_rf: float) -> float:
    """Secular frequency w = beta * omega_rf / 2 from the series for beta^2.

    Unlike the pseudopotential (beta^2 ~ a + q^2/2) this carries the q^4 and
    q^6 corrections that a full-RF trajectory shows.
    """
    beta_sq = (a + (0.5 + a / 2) * q ** 2 + (25 / 128 + 273 * a / 512) * q ** 4
               + (317 / 2304 + 59525 * a / 82944) * q ** 6)
    if not 0 < beta_sq < 1:
        raise UnstableConfigurationError(
            f"beta^2 = {beta_sq:.4f} outside (0, 1) for a = {a}, q = {q}")
    return math.sqrt(beta_sq) * omega_rf / 2


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

_CALIBRATION_TOLERANCE = 1e-3


def calibrate_drive(geom: TrapGeometry, ion: IonSpecies, target_radial: float,
                    target_axial: float, template: Optional[DriveConfig] = None,
                    model_factory=AnalyticFieldModel) -> DriveConfig:
    """Solve RF amplitude and endcap voltage for the requested frequencies.

    target_radial is the mean radial frequency (w_x + w_y)/2. The RF
    asymmetry, phase and all efficiency factors of the template are held
    fixed; the endcaps are set symmetric so the minimum stays at z = 0.
    Squared frequencies are close to linear in (V_rf^2, V_endcap), so a
    Newton iteration on that pair converges in a few steps.
    """
    if not (target_radial > 0 and target_axial > 0):
        raise CalibrationError("calibration targets must be positive")
    template = template or DriveConfig()
    base = template.with_endcaps(template.endcap_common or 1.0)
    target = np.array([target_radial ** 2, target_axial ** 2])

    def observe(s: float, v_end: float) -> NDArray[np.float64]:
        drive = base.scaled_rf(math.sqrt(s)).with_endcaps(v_end)
        try:
            result = secular_frequencies(model_factory(geom, drive), ion, 0.0)
        except UnstableConfigurationError as exc:
            raise CalibrationError(f"no stable solution while calibrating: {exc}") from exc
        return np.array([result.radial_mean ** 2, result.omega_z ** 2])

    s, v_end = 1.0, base.endcap_common
    for iteration in range(12):
        current = observe(s, v_end)
        if np.all(np.abs(current - target) <= 1e-8 * target):
            break
        ds, dv = 0.05 * s, 0.05 * abs(v_end)
        jac = np.column_stack([(observe(s + ds, v_end) - current) / ds,
                               (observe(s, v_end + dv) - current) / dv])
        try:
            delta = np.linalg.solve(jac, target - current)
        except np.linalg.LinAlgError as exc:
            raise CalibrationError("calibration Jacobian is singular") from exc
        s, v_end = s + delta[0], v_end + delta[1]
        if s <= 0:
            raise CalibrationError(
                "no stable solution: the radial target is below the static "
                "defocusing of the endcaps (a-bound of the first stability region)")
        logger.debug("calibration iteration %d: rf scale %.6f, endcap %.5f V",
                     iteration, math.sqrt(s), v_end)

    drive = base.scaled_rf(math.sqrt(s)).with_endcaps(v_end)
    model = model_factory(geom, drive)
    params = mathieu_parameters(model, ion)
    if not params.stable:
        raise CalibrationError("no stable solution: " + "; ".join(params.violations()))
    check = secular_frequencies(model, ion, 0.0)
    for name, got, want in (("radial", check.radial_mean, target_radial),
                            ("axial", check.omega_z, target_axial)):
        if abs(got - want) > _CALIBRATION_TOLERANCE * want:
            raise CalibrationError(
                f"{name} round-trip failed: {got:.6e} vs target {want:.6e} rad/s")
    logger.info("calibrated drive: V_rf = %.4f V, endcaps = %.4f V (q_x = %.4f)",
                drive.v_rf, drive.endcap_common, params.q_x)
    return drive


def principal_axis_angle(model: FieldModel, ion: IonSpecies, z: float = 0.0) -> float:
    """Angle of the x-like radial eigenvector to the lab x-axis, in (-pi/2, pi/2]."""
    result = secular_frequencies(model, ion, z)
    if abs(result.omega_x - result.omega_y) <= 1e-9 * result.radial_mean:
        raise AxisError("undefined axes: radial modes are degenerate")
    return result.axis_angle


def calibrate_axis_rotation(model: FieldModel, ion: IonSpecies, v_c_common: float,
                            target_angle: float, z: float = 0.0) -> float:
    """beta_quad_xy (1/m^2) that puts the x-like axis at target_angle for mean(V_C) = v_c_common."""
    if abs(abs(target_angle) - math.pi / 4) < 1e-9 or abs(target_angle) >= math.pi / 2:
        raise CalibrationError("target angle must avoid +/-45 deg and lie inside (-90, 90) deg")
    if v_c_common == 0:
        raise CalibrationError("a common-mode voltage of 0 V cannot rotate the axes")
    drive = replace(model.drive, beta_quad_xy=0.0).with_common_compensation(v_c_common)
    probe = model.with_drive(drive)
    position = radial_minimum(probe, ion, z)
    h = pseudopotential_hessian(probe, ion, position)
    cross = 0.5 * (h[0, 0] - h[1, 1]) * math.tan(2 * target_angle)
    beta = (cross - h[0, 1]) / (ion.charge * v_c_common)
    logger.info("axis rotation calibration: beta_quad_xy = %.5e 1/m^2", beta)
    return beta
