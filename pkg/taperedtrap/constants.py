"""
Physical constants and the default operating point of the tapered trap.

Fundamental constants come from scipy.constants (CODATA). Everything here is
strict SI; unit conversion happens once, in config.py.
"""

import math

from scipy import constants as _sc

ELEMENTARY_CHARGE = _sc.e
EPSILON_0 = _sc.epsilon_0
HBAR = _sc.hbar
PLANCK = _sc.h
BOLTZMANN = _sc.k
AMU = _sc.physical_constants["atomic mass constant"][0]
ELECTRON_MASS = _sc.m_e
BOHR_MAGNETON = _sc.physical_constants["Bohr magneton"][0]

# 40Ca atomic mass minus one electron.
CA40_ION_MASS = 39.962590863 * AMU - ELECTRON_MASS

# Lande factors of the S1/2 and D5/2 levels of 40Ca+.
G_S12 = 2.00225
G_D52 = 1.2003

# Trap geometry.
TAPER_ANGLE = math.radians(10.0)
EPSILON_MEASURED = 0.552e3  # 1/m, linear slope of radial confinement vs z
R0 = 2.0 * math.tan(TAPER_ANGLE) / EPSILON_MEASURED
BLADE_LENGTH = 4.0e-3
ENDCAP_GAP = 4.8e-3
ENDCAP_HOLE_DIAM = 0.8e-3
COMP_DIAG_DISTANCE = 17.0e-3
COMP_DIAM = 2.0e-3

# RF drive.
RF_FREQUENCY = 11.17e6  # Hz
RF_AMPLITUDE = 95.0
RF_PHASE_DIFF = math.radians(179.51)
RF_PROBE_RATIO = 118.0
# Thin blades with tips at r0: conformal map gives Phi ~ (2V/pi)(x^2-y^2)/r0^2.
KAPPA_RF_BLADES = 2.0 / math.pi

# Observed operating point.
RADIAL_FREQUENCIES = (1.14e6, 1.15e6)  # Hz
AXIAL_FREQUENCY = 99.8e3  # Hz
RADIAL_SPLITTING = -0.007  # (w_x - w_y)/w_mean

# Static electrodes.
KAPPA_AXIAL = 0.05
ENDCAP_VOLTAGE = 9.38
BETA_DIPOLE = 5.0  # 1/m
# Anchors principal_axis_angle(62.5 V) = -22.5 deg at the operating point.
BETA_QUAD_XY = 3.0e3  # 1/m^2
AXIS_ANCHOR_VOLTAGE = 62.5
AXIS_ANCHOR_ANGLE = math.radians(-22.5)
# In-plane direction of the camera's imaging plane; both radial modes sit at
# 45 deg to it at the anchor voltage.
IMAGING_PLANE_ANGLE = AXIS_ANCHOR_ANGLE + math.pi / 4

# Laser wavelengths.
COOLING_WAVELENGTH = 397e-9
QUADRUPOLE_WAVELENGTH = 729e-9
COOLING_LINEWIDTH = 22.1e6  # Hz, natural linewidth of P1/2
QUANTIZATION_FIELD = 3e-4  # T

# Mathieu first stability region along a = 0.
MATHIEU_Q_MAX = 0.908
