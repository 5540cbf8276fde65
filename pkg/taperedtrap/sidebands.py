"""
Line positions of the S1/2 <-> D5/2 quadrupole transition of a trapped ion.

First-order Zeeman splitting in a uniform field, geometric coupling of a
729 nm beam to each |dm| class, motional sideband combs around each line
and Lamb-Dicke parameters. Only positions and coupling hints are produced;
excitation probabilities are not modeled.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from taperedtrap import constants as C
from taperedtrap.trapmodel import IonSpecies

logger = logging.getLogger(__name__)

__all__ = [
    "SidebandLine", "ZeemanLine", "lamb_dicke", "quadrupole_geometry_factors",
    "sideband_comb", "sideband_spectrum", "zeeman_lines",
]

GROUND_LEVELS = (-0.5, 0.5)
EXCITED_LEVELS = (-2.5, -1.5, -0.5, 0.5, 1.5, 2.5)
DEFAULT_POLARIZATION = math.pi / 4
# Couplings below this are treated as forbidden by the beam geometry.
COUPLING_FLOOR = 1e-12


@dataclass(frozen=True)
class ZeemanLine:
    """One S1/2(m_ground) -> D5/2(m_excited) component.

    offset is in Hz from the zero-field line center; coupling is the relative
    geometric factor of the |delta_m| class for the chosen beam.
    """
    m_ground: float
    m_excited: float
    offset: float
    coupling: float = 1.0

    def __post_init__(self) -> None:
        if self.m_ground not in GROUND_LEVELS:
            raise ValueError(f"m_ground must be +/-1/2, got {self.m_ground}")
        if self.m_excited not in EXCITED_LEVELS:
            raise ValueError(f"m_excited must lie in -5/2..5/2, got {self.m_excited}")
        if abs(self.delta_m) > 2:
            raise ValueError(f"|delta_m| <= 2 for a quadrupole line, got {self.delta_m}")

    @property
    def delta_m(self) -> int:
        return int(round(self.m_excited - self.m_ground))


@dataclass(frozen=True)
class SidebandLine:
    """Motional sideband (n_x, n_y, n_z) of a Zeeman line.

    motional_offset is n . nu exactly; offset adds it to the line's own offset.
    """
    base: ZeemanLine
    orders: Tuple[int, int, int]
    motional_offset: float

    @property
    def offset(self) -> float:
        return self.base.offset + self.motional_offset

    @property
    def total_order(self) -> int:
        return sum(abs(n) for n in self.orders)


def quadrupole_geometry_factors(beam_angle: float,
                                polarization_angle: float = DEFAULT_POLARIZATION
                                ) -> Tuple[float, float, float]:
    """Relative coupling of the |dm| = 0, 1, 2 components.

    beam_angle is between the beam and the magnetic field; polarization_angle
    is between the polarization and the projection of the field onto the
    plane normal to the beam.
    """
    phi, gamma = beam_angle, polarization_angle
    g0 = 0.5 * abs(math.cos(gamma) * math.sin(2 * phi))
    g1 = abs(complex(math.cos(gamma) * math.cos(2 * phi),
                     math.sin(gamma) * math.cos(phi))) / math.sqrt(6)
    g2 = abs(complex(0.5 * math.cos(gamma) * math.sin(2 * phi),
                     math.sin(gamma) * math.sin(phi))) / math.sqrt(6)
    return g0, g1, g2


def zeeman_offset(b_field: float, m_ground: float, m_excited: float) -> float:
    return C.BOHR_MAGNETON * b_field * (C.G_D52 * m_excited - C.G_S12 * m_ground) / C.PLANCK


def zeeman_lines(b_field: float, beam_angle: Optional[float] = math.pi / 4,
                 polarization_angle: float = DEFAULT_POLARIZATION) -> List[ZeemanLine]:
    """Zeeman components at field b_field (T), sorted by offset.

    With beam_angle None every |dm| <= 2 pair is returned (ten lines).
    Otherwise lines whose geometric coupling vanishes are dropped, so a beam
    along the field leaves the four |dm| = 1 lines.
    """
    if not b_field >= 0:
        raise ValueError(f"magnetic field must be >= 0, got {b_field}")
    factors = ((1.0, 1.0, 1.0) if beam_angle is None
               else quadrupole_geometry_factors(beam_angle, polarization_angle))
    lines = []
    for m_g, m_e in itertools.product(GROUND_LEVELS, EXCITED_LEVELS):
        delta = int(round(m_e - m_g))
        if abs(delta) > 2:
            continue
        coupling = factors[abs(delta)]
        if coupling < COUPLING_FLOOR:
            continue
        lines.append(ZeemanLine(m_g, m_e, zeeman_offset(b_field, m_g, m_e), coupling))
    lines.sort(key=lambda line: (line.offset, line.m_ground, line.m_excited))
    logger.debug("%d Zeeman lines at B = %.3e T", len(lines), b_field)
    return lines


def _check_secular(secular: Sequence[float], max_total_order: int) -> Tuple[float, float, float]:
    if len(secular) != 3 or not all(nu > 0 for nu in secular):
        raise ValueError(f"need three positive secular frequencies, got {tuple(secular)}")
    if max_total_order < 1:
        raise ValueError(f"max_total_order must be >= 1, got {max_total_order}")
    return float(secular[0]), float(secular[1]), float(secular[2])


def sideband_comb(line: ZeemanLine, secular: Sequence[float],
                  max_total_order: int = 1) -> List[SidebandLine]:
    """Carrier and every sideband with |n_x| + |n_y| + |n_z| <= max_total_order.

    secular holds (nu_x, nu_y, nu_z) in Hz. Orders mixing modes are the
    hybrid sidebands. Sorted by offset.
    """
    nu = _check_secular(secular, max_total_order)
    span = range(-max_total_order, max_total_order + 1)
    comb = []
    for orders in itertools.product(span, repeat=3):
        if sum(abs(n) for n in orders) > max_total_order:
            continue
        motional = math.fsum(n * f for n, f in zip(orders, nu))
        comb.append(SidebandLine(line, orders, motional))
    comb.sort(key=lambda s: (s.offset, s.orders))
    return comb


def sideband_spectrum(lines: Iterable[ZeemanLine], secular: Sequence[float],
                      max_total_order: int = 1,
                      transition: Optional[Tuple[float, float]] = None) -> List[SidebandLine]:
    """Sideband combs of all lines, or of the (m_ground, m_excited) pair given."""
    chosen = list(lines)
    if transition is not None:
        chosen = [line for line in chosen
                  if (line.m_ground, line.m_excited) == tuple(transition)]
        if not chosen:
            raise ValueError(f"no line for transition {transition}")
    spectrum = [s for line in chosen for s in sideband_comb(line, secular, max_total_order)]
    spectrum.sort(key=lambda s: (s.offset, s.base.m_ground, s.base.m_excited, s.orders))
    return spectrum


def lamb_dicke(omega: float, ion: IonSpecies, wavelength: float = C.QUADRUPOLE_WAVELENGTH,
               projection_angle: float = 0.0) -> float:
    """Lamb-Dicke parameter of a mode at omega (rad/s) for a beam at projection_angle to it."""
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    if not wavelength > 0:
        raise ValueError(f"wavelength must be positive, got {wavelength}")
    k = 2 * math.pi / wavelength
    return abs(k * math.cos(projection_angle)) * math.sqrt(C.HBAR / (2 * ion.mass * omega))
