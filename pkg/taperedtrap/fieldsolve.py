"""
Mesh-based electrostatics: a surface-charge collocation solver.

Each electrode is a set of flat triangles carrying a uniform charge. For a
unit voltage on one electrode and 0 V on all others, the triangle charges
follow from requiring the right potential at every triangle centroid. The
resulting ChargeBasis objects superpose linearly into a SolvedFieldModel for
any set of electrode voltages.

Matrix entries:
  - distant pairs use the point kernel 1/(4 pi eps0 d)
  - pairs closer than four equivalent-disc radii use the exact potential of
    a uniformly charged triangle
  - the self term is the centre potential of a uniformly charged disc of
    equal area, a / (2 eps0 A) with a = sqrt(A / pi)

Mesh text format (TRAPMESH 1), one record per line, blank lines ignored:

    TRAPMESH 1
    # <name> <id>          binds an electrode name (single token) to an id
    v <x> <y> <z>          vertex in metres
    f <i> <j> <k> <id>     triangle with 0-based vertex indices

Comment lines that are not a name binding are ignored.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from taperedtrap.constants import EPSILON_0
from taperedtrap.trapmodel import (
    DriveConfig,
    FieldModel,
    TaperedTrapError,
    TrapGeometry,
    Vector,
)

logger = logging.getLogger(__name__)

MESH_HEADER = "TRAPMESH 1"
MIN_TRIANGLE_AREA = 1e-18  # m^2
DEFAULT_TRIANGLE_CAP = 20000
RESIDUAL_LIMIT = 1e-3
NEAR_FIELD_RADII = 4.0
# Keeps one assembly block at a few million entries.
ASSEMBLY_BLOCK_ENTRIES = 4_000_000

CACHE_MAGIC = b"TTBASIS\0"
CACHE_VERSION = 1

COULOMB = 1.0 / (4 * math.pi * EPSILON_0)

# Degree-5 symmetric 7-point rule on the triangle (barycentric, weight).
_A1, _B1, _W1 = 0.059715871789770, 0.470142064105115, 0.132394152788506
_A2, _B2, _W2 = 0.797426985353087, 0.101286507323456, 0.125939180544827
QUADRATURE_BARYCENTRIC = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
QUADRATURE_WEIGHTS = np.array([0.225, _W1, _W1, _W1, _W2, _W2, _W2])

# Electrode roles understood by electrode_voltages(); other names are grounded.
RF_ROLES = ("rf1", "rf2")
STATIC_ROLES = ("dc1", "dc2", "c1", "c2", "c3", "c4")


class MeshParseError(TaperedTrapError):
    """Malformed line in a TRAPMESH or OFF file."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class MeshValidationError(TaperedTrapError):
    """Mesh content violates an invariant (indices, areas, names)."""


class SolverError(TaperedTrapError):
    """Collocation system could not be solved to the required accuracy."""

    def __init__(self, message: str, condition_estimate: Optional[float] = None):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class BasisConfigurationError(TaperedTrapError):
    """Charge bases do not match the electrodes a model needs."""


class CacheFormatError(TaperedTrapError):
    """Binary basis cache is truncated or has the wrong layout."""


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh whose triangles are tagged with electrode ids."""
    vertices: NDArray[np.float64]
    triangles: NDArray[np.int64]
    electrode_ids: NDArray[np.int64]
    electrode_names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "electrode_ids", np.asarray(self.electrode_ids, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "electrode_names", dict(self.electrode_names))
        validate_mesh(self)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def corners(self) -> NDArray[np.float64]:
        """(n, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    @property
    def centroids(self) -> NDArray[np.float64]:
        return self.corners.mean(axis=1)

    @property
    def areas(self) -> NDArray[np.float64]:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @property
    def equivalent_radii(self) -> NDArray[np.float64]:
        return np.sqrt(self.areas / math.pi)

    @property
    def diameter(self) -> float:
        used = self.vertices[np.unique(self.triangles)]
        return float(np.linalg.norm(used.max(axis=0) - used.min(axis=0)))

    def electrode(self, name: str) -> int:
        for eid, label in self.electrode_names.items():
            if label == name:
                return eid
        raise KeyError(name)

    def quadrature_points(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Points (n*7, 3) and area weights (n, 7) of the 7-point rule."""
        points = np.einsum("qk,nkd->nqd", QUADRATURE_BARYCENTRIC, self.corners)
        return points.reshape(-1, 3), np.outer(self.areas, QUADRATURE_WEIGHTS)


def validate_mesh(mesh: TriMesh) -> None:
    """Raise MeshValidationError if the mesh violates an invariant."""
    if mesh.n_triangles == 0:
        raise MeshValidationError("no triangles")
    if len(mesh.electrode_ids) != mesh.n_triangles:
        raise MeshValidationError("one electrode id per triangle is required")
    n_vertices = len(mesh.vertices)
    bad = np.nonzero((mesh.triangles < 0) | (mesh.triangles >= n_vertices))[0]
    if len(bad):
        raise MeshValidationError(
            f"triangle {int(bad[0])} references a vertex outside 0..{n_vertices - 1}")
    degenerate = np.nonzero(mesh.areas <= MIN_TRIANGLE_AREA)[0]
    if len(degenerate):
        listed = ", ".join(str(int(i)) for i in degenerate[:10])
        raise MeshValidationError(f"zero-area triangles: {listed}")
    unnamed = sorted(set(int(e) for e in mesh.electrode_ids) - set(mesh.electrode_names))
    if unnamed:
        raise MeshValidationError(f"electrode ids without a name: {unnamed}")


def parse_mesh(text: str) -> TriMesh:
    """Parse TRAPMESH text into a validated TriMesh, preserving input order."""
    vertices: List[Tuple[float, float, float]] = []
    triangles: List[Tuple[int, int, int]] = []
    electrode_ids: List[int] = []
    names: Dict[int, str] = {}
    seen_header = False

    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if not seen_header:
            if line != MESH_HEADER:
                raise MeshParseError(f"expected header '{MESH_HEADER}', got '{line}'", line_number)
            seen_header = True
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2:
                try:
                    eid = int(parts[1])
                except ValueError:
                    continue
                if eid in names and names[eid] != parts[0]:
                    raise MeshParseError(f"electrode {eid} named twice", line_number)
                names[eid] = parts[0]
            continue
        parts = line.split()
        tag, fields = parts[0], parts[1:]
        try:
            if tag == "v" and len(fields) == 3:
                vertices.append((float(fields[0]), float(fields[1]), float(fields[2])))
            elif tag == "f" and len(fields) == 4:
                i, j, k, eid = (int(f) for f in fields)
                triangles.append((i, j, k))
                electrode_ids.append(eid)
            else:
                raise MeshParseError(f"unrecognised record '{line}'", line_number)
        except ValueError:
            raise MeshParseError(f"bad number in '{line}'", line_number) from None

    if not seen_header:
        raise MeshParseError(f"missing header '{MESH_HEADER}'", 1)
    return TriMesh(np.array(vertices, dtype=float).reshape(-1, 3),
                   np.array(triangles, dtype=np.int64).reshape(-1, 3),
                   np.array(electrode_ids, dtype=np.int64), names)


def serialize_mesh(mesh: TriMesh) -> str:
    """TRAPMESH text for a mesh; parse_mesh(serialize_mesh(m)) reproduces m exactly."""
    lines = [MESH_HEADER]
    lines += [f"# {name} {eid}" for eid, name in sorted(mesh.electrode_names.items())]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {i} {j} {k} {e}"
              for (i, j, k), e in zip(mesh.triangles.tolist(), mesh.electrode_ids.tolist())]
    return "\n".join(lines) + "\n"


def load_mesh(path: Union[str, Path]) -> TriMesh:
    """Read a TRAPMESH file, or an OFF file (by suffix) as one electrode named after it."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".off":
        return mesh_from_off(text, name=path.stem)
    return parse_mesh(text)


def mesh_from_off(text: str, electrode_id: int = 0, name: str = "electrode",
                  scale: float = 1.0) -> TriMesh:
    """Convert an OFF polygon file to a single-electrode TriMesh.

    Polygons with more than three corners are fan-triangulated; coordinates
    are multiplied by scale (OFF files are often in millimetres).
    """
    rows = []
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append((line_number, line.split()))
    if not rows or rows[0][1][0] != "OFF":
        raise MeshParseError("missing OFF header", rows[0][0] if rows else 1)
    header_tail = rows[0][1][1:]
    cursor = 1
    if not header_tail:
        if len(rows) < 2:
            raise MeshParseError("OFF header without a counts line", rows[0][0])
        header_tail = rows[1][1]
        cursor = 2
    try:
        n_vertices, n_faces = int(header_tail[0]), int(header_tail[1])
    except (ValueError, IndexError):
        raise MeshParseError("bad OFF counts line", rows[cursor - 1][0]) from None
    if n_vertices < 0 or n_faces < 0:
        raise MeshParseError("negative OFF counts", rows[cursor - 1][0])
    if len(rows) < cursor + n_vertices + n_faces:
        raise MeshParseError("OFF file is truncated", rows[-1][0])

    vertices = []
    for line_number, parts in rows[cursor:cursor + n_vertices]:
        if len(parts) < 3:
            raise MeshParseError("vertex needs three coordinates", line_number)
        try:
            vertices.append([float(p) * scale for p in parts[:3]])
        except ValueError:
            raise MeshParseError("bad vertex", line_number) from None
    triangles = []
    for line_number, parts in rows[cursor + n_vertices:cursor + n_vertices + n_faces]:
        try:
            count = int(parts[0])
            corners = [int(p) for p in parts[1:1 + count]]
        except ValueError:
            raise MeshParseError("bad face", line_number) from None
        if count < 3 or len(corners) != count:
            raise MeshParseError("face needs at least three corners", line_number)
        triangles += [(corners[0], corners[k], corners[k + 1]) for k in range(1, count - 1)]
    return TriMesh(np.array(vertices), np.array(triangles),
                   np.full(len(triangles), electrode_id), {electrode_id: name})


def merge_meshes(meshes: Iterable[TriMesh]) -> TriMesh:
    """Concatenate meshes; electrode ids must agree on names across inputs."""
    vertices, triangles, ids = [], [], []
    names: Dict[int, str] = {}
    offset = 0
    for mesh in meshes:
        for eid, name in mesh.electrode_names.items():
            if names.setdefault(eid, name) != name:
                raise MeshValidationError(
                    f"electrode {eid} is '{names[eid]}' in one mesh and '{name}' in another")
        vertices.append(mesh.vertices)
        triangles.append(mesh.triangles + offset)
        ids.append(mesh.electrode_ids)
        offset += len(mesh.vertices)
    if not vertices:
        raise MeshValidationError("no triangles")
    return TriMesh(np.vstack(vertices), np.vstack(triangles), np.concatenate(ids), names)


# ---------------------------------------------------------------------------
# Collocation
# ---------------------------------------------------------------------------

def uniform_triangle_integral(corners: NDArray[np.float64],
                              points: NDArray[np.float64]) -> NDArray[np.float64]:
    """Integral of 1/|r - r'| over each triangle for the matching point.

    corners has shape (k, 3, 3), points (k, 3). Closed form built from the
    three edges; edges whose line passes through the projected point add
    nothing.
    """
    corners = np.asarray(corners, dtype=float)
    points = np.asarray(points, dtype=float)
    normal = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    height = np.einsum("kd,kd->k", points - corners[:, 0], normal)
    abs_height = np.abs(height)
    projected = points - height[:, None] * normal
    total = np.zeros(len(points))

    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(3):
            start = corners[:, i]
            end = corners[:, (i + 1) % 3]
            length = np.linalg.norm(end - start, axis=1)
            along = (end - start) / length[:, None]
            outward = np.cross(along, normal)
            s = np.einsum("kd,kd->k", start - projected, outward)
            l_plus = np.einsum("kd,kd->k", end - projected, along)
            l_minus = np.einsum("kd,kd->k", start - projected, along)
            r0_sq = s * s + height * height
            r_plus = np.linalg.norm(points - end, axis=1)
            r_minus = np.linalg.norm(points - start, axis=1)
            log_term = np.log((r_plus + l_plus) / (r_minus + l_minus))
            atan_term = (np.arctan(s * l_plus / (r0_sq + abs_height * r_plus))
                         - np.arctan(s * l_minus / (r0_sq + abs_height * r_minus)))
            contribution = s * log_term - abs_height * atan_term
            total += np.where(np.abs(s) > 1e-12 * length, contribution, 0.0)
    return total


def collocation_matrix(mesh: TriMesh) -> NDArray[np.float64]:
    """Potential (V) at each centroid per coulomb on each triangle."""
    centroids = mesh.centroids
    areas = mesh.areas
    radii = mesh.equivalent_radii
    corners = mesh.corners
    n = mesh.n_triangles
    block_rows = max(1, ASSEMBLY_BLOCK_ENTRIES // n)
    matrix = np.empty((n, n))

    for start in range(0, n, block_rows):
        stop = min(n, start + block_rows)
        diff = centroids[start:stop, None, :] - centroids[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        with np.errstate(divide="ignore"):
            block = 1.0 / dist
        rows, cols = np.nonzero(dist < NEAR_FIELD_RADII * radii[None, :])
        if len(rows):
            block[rows, cols] = (uniform_triangle_integral(corners[cols], centroids[start + rows])
                                 / areas[cols])
        own = np.arange(start, stop)
        block[own - start, own] = 2.0 / radii[own]
        matrix[start:stop] = COULOMB * block
    return matrix


@dataclass(frozen=True, eq=False)
class ChargeBasis:
    """Triangle charges (C) for 1 V on one electrode and 0 V on the rest."""
    electrode_id: int
    charges: NDArray[np.float64]
    mesh: TriMesh = field(repr=False)

    @property
    def name(self) -> str:
        return self.mesh.electrode_names[self.electrode_id]

    @property
    def total_charge(self) -> float:
        return float(self.charges.sum())

    def charge_on(self, electrode_id: int) -> float:
        return float(self.charges[self.mesh.electrode_ids == electrode_id].sum())


class CollocationSolver:
    """Assembles and factorizes the collocation system of one mesh.

    The LU factors are reused for every electrode, so solving all bases of a
    mesh costs one factorization.
    """

    def __init__(self, mesh: TriMesh, max_triangles: int = DEFAULT_TRIANGLE_CAP):
        if mesh.n_triangles > max_triangles:
            raise SolverError(
                f"{mesh.n_triangles} triangles exceed the configured cap of {max_triangles}")
        self.mesh = mesh
        logger.info("assembling collocation matrix for %d triangles", mesh.n_triangles)
        self.matrix = collocation_matrix(mesh)
        anorm = float(np.linalg.norm(self.matrix, 1))
        self.lu, self.piv = linalg.lu_factor(self.matrix, check_finite=True)
        gecon, = linalg.lapack.get_lapack_funcs(("gecon",), (self.lu,))
        rcond, info = gecon(self.lu, anorm, norm="1")
        self.condition_estimate = math.inf if rcond == 0 else 1.0 / rcond
        logger.debug("collocation condition estimate %.3e", self.condition_estimate)
        if info != 0 or rcond < np.finfo(float).eps:
            raise SolverError(
                f"collocation matrix is singular or ill-conditioned "
                f"(condition estimate {self.condition_estimate:.3e})",
                condition_estimate=self.condition_estimate)

    def solve(self, electrode_id: int) -> ChargeBasis:
        if electrode_id not in set(self.mesh.electrode_ids.tolist()):
            raise BasisConfigurationError(
                f"electrode {electrode_id} has no triangles in the mesh")
        boundary = (self.mesh.electrode_ids == electrode_id).astype(float)
        charges = linalg.lu_solve((self.lu, self.piv), boundary)
        residual = float(np.max(np.abs(self.matrix @ charges - boundary)))
        if not residual < RESIDUAL_LIMIT:
            raise SolverError(
                f"boundary residual {residual:.3e} exceeds {RESIDUAL_LIMIT}",
                condition_estimate=self.condition_estimate)
        basis = ChargeBasis(electrode_id, charges, self.mesh)
        logger.info("solved electrode %s: total charge %.4e C/V", basis.name, basis.total_charge)
        return basis

    def solve_all(self) -> List[ChargeBasis]:
        return [self.solve(eid) for eid in sorted(self.mesh.electrode_names)
                if np.any(self.mesh.electrode_ids == eid)]


def solve_unit_basis(mesh: TriMesh, electrode_id: int,
                     max_triangles: int = DEFAULT_TRIANGLE_CAP) -> ChargeBasis:
    """Charges for 1 V on electrode_id with every other electrode grounded."""
    if electrode_id not in set(mesh.electrode_ids.tolist()):
        raise BasisConfigurationError(f"electrode {electrode_id} has no triangles in the mesh")
    return CollocationSolver(mesh, max_triangles).solve(electrode_id)


def capacitance_matrix(bases: Sequence[ChargeBasis]) -> Tuple[List[int], NDArray[np.float64]]:
    """Maxwell capacitance matrix C[i, j]: charge on electrode i per volt on basis j."""
    ids = [b.electrode_id for b in bases]
    matrix = np.array([[b.charge_on(i) for b in bases] for i in ids])
    return ids, matrix


# ---------------------------------------------------------------------------
# Solved field
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ElectrodeVoltages:
    """Per-electrode static voltage and RF phasor amplitudes (cos, sin)."""
    static: Dict[int, float] = field(default_factory=dict)
    rf_cos: Dict[int, float] = field(default_factory=dict)
    rf_sin: Dict[int, float] = field(default_factory=dict)

    @property
    def driven(self) -> List[int]:
        return sorted(set(self.static) | set(self.rf_cos) | set(self.rf_sin))

    @property
    def has_rf(self) -> bool:
        return any(self.rf_cos.values()) or any(self.rf_sin.values())


def electrode_voltages(names: Mapping[int, str], drive: DriveConfig) -> ElectrodeVoltages:
    """Map drive settings onto electrodes by role name (rf1, rf2, dc1, dc2, c1..c4)."""
    static: Dict[int, float] = {}
    rf_cos: Dict[int, float] = {}
    rf_sin: Dict[int, float] = {}
    dphi = drive.phase_diff - math.pi
    comp = dict(zip(("c1", "c2", "c3", "c4"), drive.v_comp))
    for eid, name in names.items():
        role = name.lower()
        if role == "rf1":
            rf_cos[eid], rf_sin[eid] = drive.v_rf1, 0.0
        elif role == "rf2":
            rf_cos[eid] = -drive.v_rf2 * math.cos(dphi)
            rf_sin[eid] = drive.v_rf2 * math.sin(dphi)
        elif role == "dc1":
            static[eid] = drive.v_d1
        elif role == "dc2":
            static[eid] = drive.v_d2
        elif role in comp:
            static[eid] = comp[role]
    return ElectrodeVoltages(static, rf_cos, rf_sin)


class SolvedFieldModel(FieldModel):
    """Field of superposed charge bases, evaluated from quadrature point charges.

    With geometry=None the model is valid everywhere; otherwise positions are
    checked against the trap geometry like the analytic backend.
    """

    def __init__(self, bases: Sequence[ChargeBasis], drive: Optional[DriveConfig] = None,
                 geometry: Optional[TrapGeometry] = None,
                 voltages: Optional[ElectrodeVoltages] = None):
        if not bases:
            raise BasisConfigurationError("at least one charge basis is required")
        mesh = bases[0].mesh
        if any(b.mesh is not mesh for b in bases):
            raise BasisConfigurationError("charge bases come from different meshes")
        if voltages is None:
            if drive is None:
                raise BasisConfigurationError("either a drive or explicit voltages are required")
            voltages = electrode_voltages(mesh.electrode_names, drive)
        by_id = {b.electrode_id: b for b in bases}
        for eid in voltages.driven:
            if eid not in by_id:
                name = mesh.electrode_names.get(eid, str(eid))
                raise BasisConfigurationError(f"missing charge basis for electrode '{name}'")

        self.bases = list(bases)
        self.mesh = mesh
        self.drive = drive if drive is not None else DriveConfig()
        self._static_only = drive is None or not voltages.has_rf
        self.geometry = geometry  # type: ignore[assignment]
        self.voltages = voltages

        def combine(table: Mapping[int, float]) -> NDArray[np.float64]:
            total = np.zeros(mesh.n_triangles)
            for eid, volts in table.items():
                if volts:
                    total += volts * by_id[eid].charges
            return total

        points, weights = mesh.quadrature_points()
        per_area = weights / mesh.areas[:, None]
        self._points = points
        self._charges = np.stack([
            (combine(table)[:, None] * per_area).reshape(-1)
            for table in (voltages.static, voltages.rf_cos, voltages.rf_sin)
        ])
        self._stray = np.asarray(self.drive.stray_field, dtype=float) if drive else np.zeros(3)

    @property
    def omega_rf(self) -> Optional[float]:
        return None if self._static_only else self.drive.omega_rf

    def check_position(self, r: ArrayLike) -> None:
        if self.geometry is not None:
            self.geometry.check_position(r)

    def contains(self, r: ArrayLike) -> bool:
        return True if self.geometry is None else self.geometry.inside_escape_region(r)

    def with_drive(self, drive: DriveConfig) -> "SolvedFieldModel":
        return SolvedFieldModel(self.bases, drive, self.geometry)

    def _potentials(self, r: ArrayLike) -> NDArray[np.float64]:
        dist = np.linalg.norm(np.asarray(r, dtype=float) - self._points, axis=1)
        return COULOMB * (self._charges @ (1.0 / dist))

    def _gradients(self, r: ArrayLike) -> NDArray[np.float64]:
        diff = np.asarray(r, dtype=float) - self._points
        inv = 1.0 / np.linalg.norm(diff, axis=1)
        return -COULOMB * ((self._charges * inv ** 3) @ diff)

    def static_part(self, r: ArrayLike) -> float:
        return float(self._potentials(r)[0] - self._stray @ np.asarray(r, dtype=float))

    def static_gradient(self, r: ArrayLike) -> Vector:
        return self._gradients(r)[0] - self._stray

    def rf_phasor_potentials(self, r: ArrayLike) -> Tuple[float, float]:
        values = self._potentials(r)
        return float(values[1]), float(values[2])

    def rf_phasor_gradients(self, r: ArrayLike) -> Tuple[Vector, Vector]:
        grads = self._gradients(r)
        return grads[1], grads[2]

    def potential(self, r: ArrayLike, t: float) -> float:
        self.check_position(r)
        values = self._potentials(r)
        value = float(values[0] - self._stray @ np.asarray(r, dtype=float))
        if self.omega_rf is not None:
            phase = self.omega_rf * t
            value += float(values[1] * math.cos(phase) + values[2] * math.sin(phase))
        return value

    def gradient(self, r: ArrayLike, t: float) -> Vector:
        self.check_position(r)
        grads = self._gradients(r)
        g = grads[0] - self._stray
        if self.omega_rf is not None:
            phase = self.omega_rf * t
            g = g + grads[1] * math.cos(phase) + grads[2] * math.sin(phase)
        return g


def solved_field(bases: Sequence[ChargeBasis], drive: DriveConfig,
                 geometry: Optional[TrapGeometry] = None) -> SolvedFieldModel:
    """FieldModel for a drive applied to electrodes named by role."""
    return SolvedFieldModel(bases, drive, geometry if geometry is not None else TrapGeometry())


# ---------------------------------------------------------------------------
# Binary basis cache
# ---------------------------------------------------------------------------

_COUNTS = struct.Struct("<IIII")
_LENGTH = struct.Struct("<I")


def write_basis_cache(path: Union[str, Path], bases: Sequence[ChargeBasis]) -> None:
    """Write bases of one mesh: magic, version, counts, arrays, JSON names."""
    if not bases:
        raise BasisConfigurationError("nothing to write: no charge bases")
    mesh = bases[0].mesh
    names = json.dumps({str(k): v for k, v in sorted(mesh.electrode_names.items())},
                       sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(_COUNTS.pack(CACHE_VERSION, len(mesh.vertices), mesh.n_triangles, len(bases)))
        fh.write(mesh.vertices.astype("<f8").tobytes())
        fh.write(mesh.triangles.astype("<u4").tobytes())
        fh.write(mesh.electrode_ids.astype("<u4").tobytes())
        fh.write(np.array([b.electrode_id for b in bases], dtype="<u4").tobytes())
        fh.write(np.stack([b.charges for b in bases]).astype("<f8").tobytes())
        fh.write(_LENGTH.pack(len(names)))
        fh.write(names)
    logger.info("wrote %d charge bases to %s", len(bases), path)


def read_basis_cache(path: Union[str, Path]) -> List[ChargeBasis]:
    data = Path(path).read_bytes()
    if data[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a basis cache (bad magic)")
    cursor = len(CACHE_MAGIC)

    def take(n_bytes: int) -> bytes:
        nonlocal cursor
        if cursor + n_bytes > len(data):
            raise CacheFormatError(f"{path}: truncated basis cache")
        chunk = data[cursor:cursor + n_bytes]
        cursor += n_bytes
        return chunk

    version, n_v, n_t, n_b = _COUNTS.unpack(take(_COUNTS.size))
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    vertices = np.frombuffer(take(8 * 3 * n_v), dtype="<f8").reshape(n_v, 3)
    triangles = np.frombuffer(take(4 * 3 * n_t), dtype="<u4").reshape(n_t, 3)
    ids = np.frombuffer(take(4 * n_t), dtype="<u4")
    basis_ids = np.frombuffer(take(4 * n_b), dtype="<u4")
    charges = np.frombuffer(take(8 * n_b * n_t), dtype="<f8").reshape(n_b, n_t)
    (name_length,) = _LENGTH.unpack(take(_LENGTH.size))
    try:
        names = {int(k): v for k, v in json.loads(take(name_length).decode("utf-8")).items()}
    except (ValueError, UnicodeDecodeError) as exc:
        raise CacheFormatError(f"{path}: bad electrode name table") from exc
    if cursor != len(data):
        raise CacheFormatError(f"{path}: {len(data) - cursor} trailing bytes")
    try:
        mesh = TriMesh(vertices.astype(float), triangles.astype(np.int64),
                       ids.astype(np.int64), names)
    except MeshValidationError as exc:
        raise CacheFormatError(f"{path}: {exc}") from exc
    return [ChargeBasis(int(eid), charges[k].astype(float), mesh)
            for k, eid in enumerate(basis_ids)]
