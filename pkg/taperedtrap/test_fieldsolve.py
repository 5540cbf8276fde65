"""
Tests for the collocation field solver (fieldsolve.py) and mesh generators.

The physics checks use bodies with known answers: an isolated sphere
(C = 4 pi eps0 R) and a parallel-plate capacitor (E = V/g). Bases of the
larger meshes are solved once per module.
"""

import math

import numpy as np
import pytest

from taperedtrap.constants import EPSILON_0
from taperedtrap.fieldsolve import (
    COULOMB,
    BasisConfigurationError,
    CacheFormatError,
    ChargeBasis,
    CollocationSolver,
    ElectrodeVoltages,
    MeshParseError,
    MeshValidationError,
    SolvedFieldModel,
    SolverError,
    capacitance_matrix,
    electrode_voltages,
    load_mesh,
    merge_meshes,
    mesh_from_off,
    parse_mesh,
    read_basis_cache,
    serialize_mesh,
    solve_unit_basis,
    solved_field,
    uniform_triangle_integral,
    write_basis_cache,
)
from taperedtrap.meshgen import SPHERE_LEVELS, parallel_plates, tapered_trap_mesh, uv_sphere
from taperedtrap.trapmodel import (
    AnalyticFieldModel,
    DriveConfig,
    IonSpecies,
    TrapGeometry,
    secular_frequencies,
)

RADIUS = 1e-3
SINGLE_TRIANGLE = """TRAPMESH 1
# plate 0
v 0 0 0
v 1 0 0
v 0 1 0
f 0 1 2 0
"""


@pytest.fixture(scope="module")
def sphere_basis():
    return solve_unit_basis(uv_sphere(RADIUS), 0)


@pytest.fixture(scope="module")
def plate_bases():
    return CollocationSolver(parallel_plates()).solve_all()


@pytest.fixture(scope="module")
def trap_bases():
    return CollocationSolver(tapered_trap_mesh(TrapGeometry())).solve_all()


def subdivided_integral(corners, point, n=64):
    """Centroid-rule integral of 1/R over n^2 sub-triangles."""
    a, b, c = corners
    total = 0.0
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a)) / n ** 2
    du, dv = (b - a) / n, (c - a) / n
    for i in range(n):
        for j in range(n - i):
            base = a + i * du + j * dv
            up = base + (du + dv) / 3
            total += area / np.linalg.norm(point - up)
            if i + j < n - 1:
                down = base + 2 * (du + dv) / 3
                total += area / np.linalg.norm(point - down)
    return total


# ---------------------------------------------------------------------------
# Mesh text format
# ---------------------------------------------------------------------------

class TestParseMesh:
    def test_single_triangle(self):
        mesh = parse_mesh(SINGLE_TRIANGLE)
        assert len(mesh.vertices) == 3
        assert mesh.n_triangles == 1
        assert mesh.electrode_names == {0: "plate"}
        assert mesh.areas[0] == pytest.approx(0.5)

    def test_no_triangles(self):
        with pytest.raises(MeshValidationError, match="no triangles"):
            parse_mesh("TRAPMESH 1\nv 0 0 0\n")

    def test_missing_header(self):
        with pytest.raises(MeshParseError) as excinfo:
            parse_mesh("v 0 0 0\n")
        assert excinfo.value.line_number == 1

    def test_malformed_line_reports_line_number(self):
        text = SINGLE_TRIANGLE.replace("v 1 0 0", "v 1 zero 0")
        with pytest.raises(MeshParseError, match="line 4") as excinfo:
            parse_mesh(text)
        assert excinfo.value.line_number == 4

    def test_unknown_record(self):
        with pytest.raises(MeshParseError) as excinfo:
            parse_mesh(SINGLE_TRIANGLE + "q 1 2 3\n")
        assert excinfo.value.line_number == 7

    def test_dangling_index(self):
        with pytest.raises(MeshValidationError, match="triangle 0"):
            parse_mesh(SINGLE_TRIANGLE.replace("f 0 1 2 0", "f 0 1 3 0"))

    def test_zero_area_lists_triangle(self):
        text = SINGLE_TRIANGLE + "v 2 0 0\nf 0 1 3 0\n"
        with pytest.raises(MeshValidationError, match="zero-area triangles: 1"):
            parse_mesh(text)

    def test_unnamed_electrode(self):
        with pytest.raises(MeshValidationError, match=r"\[5\]"):
            parse_mesh(SINGLE_TRIANGLE.replace("f 0 1 2 0", "f 0 1 2 5"))

    def test_sphere_round_trip_is_identical(self):
        text = serialize_mesh(uv_sphere(RADIUS))
        mesh = parse_mesh(text)
        assert mesh.n_triangles == 2000
        assert serialize_mesh(mesh) == text

    def test_off_import_triangulates_quads(self):
        off = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
        mesh = mesh_from_off(off, electrode_id=3, name="pad", scale=1e-3)
        assert mesh.n_triangles == 2
        assert mesh.areas.sum() == pytest.approx(1e-6)
        assert mesh.electrode_names == {3: "pad"}

    @pytest.mark.parametrize("text,message", [
        ("OFF\n", "line 1: OFF header without a counts line"),
        ("OFF 3\n", "line 1: bad OFF counts line"),
        ("OFF\n3 1 0\n0 0 0\n", "line 3: OFF file is truncated"),
        ("OFF\n-1 0 0\n", "line 2: negative OFF counts"),
        ("OFF\n3 1 0\n0 0\n1 0 0\n0 1 0\n3 0 1 2\n", "line 3: vertex needs three coordinates"),
    ])
    def test_off_import_rejects_malformed_files(self, text, message):
        with pytest.raises(MeshParseError, match=message):
            mesh_from_off(text)

    def test_off_file_loaded_by_suffix(self, tmp_path):
        path = tmp_path / "pad.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        mesh = load_mesh(path)
        assert mesh.n_triangles == 1
        assert mesh.electrode_names == {0: "pad"}

    def test_merge_rejects_conflicting_names(self):
        a = parse_mesh(SINGLE_TRIANGLE)
        b = parse_mesh(SINGLE_TRIANGLE.replace("# plate 0", "# other 0"))
        with pytest.raises(MeshValidationError, match="plate"):
            merge_meshes([a, b])


class TestGenerators:
    @pytest.mark.parametrize("stacks,slices,count", [(8, 12, 168), (14, 20, 520), (26, 40, 2000)])
    def test_sphere_triangle_counts(self, stacks, slices, count):
        assert uv_sphere(RADIUS, stacks, slices).n_triangles == count

    def test_sphere_area_approaches_exact(self):
        area = uv_sphere(RADIUS).areas.sum()
        assert area == pytest.approx(4 * math.pi * RADIUS ** 2, rel=0.01)

    def test_trap_mesh_electrodes(self):
        mesh = tapered_trap_mesh(TrapGeometry())
        assert sorted(mesh.electrode_names.values()) == sorted(
            ["rf1", "rf2", "dc1", "dc2", "c1", "c2", "c3", "c4"])
        blade_tips = mesh.vertices[mesh.triangles[mesh.electrode_ids == 0]].reshape(-1, 3)
        assert np.abs(blade_tips[:, 0]).min() == pytest.approx(
            TrapGeometry().rho(TrapGeometry().blade_length / 2), rel=1e-9)


# ---------------------------------------------------------------------------
# Collocation
# ---------------------------------------------------------------------------

class TestTriangleIntegral:
    def test_far_point_behaves_like_point_charge(self):
        corners = np.array([[[0, 0, 0], [1e-3, 0, 0], [0, 1e-3, 0]]], dtype=float)
        point = np.array([[0.3e-3, 0.2e-3, 0.1]])
        centroid = corners[0].mean(axis=0)
        expected = 0.5e-6 / np.linalg.norm(point[0] - centroid)
        assert uniform_triangle_integral(corners, point)[0] == pytest.approx(expected, rel=1e-4)

    @pytest.mark.parametrize("point", [(0.2, 0.3, 0.3), (1.2, -0.4, 0.2), (0.5, 0.5, -0.6)])
    def test_matches_subdivided_quadrature(self, point):
        corners = np.array([[0.0, 0.0, 0.0], [1.0, 0.1, 0.0], [0.2, 0.9, 0.0]])
        p = np.array(point)
        exact = uniform_triangle_integral(corners[None], p[None])[0]
        assert exact == pytest.approx(subdivided_integral(corners, p), rel=1e-3)

    def test_independent_of_corner_order(self):
        corners = np.array([[0.0, 0.0, 0.0], [1.0, 0.1, 0.0], [0.2, 0.9, 0.0]])
        p = np.array([[0.4, 0.2, 0.05]])
        forward = uniform_triangle_integral(corners[None], p)[0]
        backward = uniform_triangle_integral(corners[None, ::-1], p)[0]
        assert forward == pytest.approx(backward, rel=1e-12)


class TestSphere:
    def test_capacitance(self, sphere_basis):
        expected = 4 * math.pi * EPSILON_0 * RADIUS
        assert sphere_basis.total_charge == pytest.approx(expected, rel=0.02)

    def test_refinement_converges(self):
        expected = 4 * math.pi * EPSILON_0 * RADIUS
        errors = [abs(solve_unit_basis(uv_sphere(RADIUS, s, n), 0).total_charge - expected)
                  for s, n in SPHERE_LEVELS]
        assert errors[0] > errors[1] > errors[2]

    def test_far_field_is_point_charge(self, sphere_basis):
        model = SolvedFieldModel([sphere_basis], voltages=ElectrodeVoltages(static={0: 1.0}))
        distance = 20 * sphere_basis.mesh.diameter
        for direction in ([1, 0, 0], [0, 0.6, 0.8], [-0.48, 0.6, -0.64]):
            r = distance * np.array(direction)
            expected = COULOMB * sphere_basis.total_charge / distance
            assert model.static_part(r) == pytest.approx(expected, rel=0.01)

    def test_absent_electrode_is_an_error(self):
        with pytest.raises(BasisConfigurationError, match="electrode 7"):
            solve_unit_basis(uv_sphere(RADIUS, 8, 12), 7)

    def test_triangle_cap(self):
        with pytest.raises(SolverError, match="cap"):
            solve_unit_basis(uv_sphere(RADIUS, 8, 12), 0, max_triangles=100)


class TestParallelPlates:
    def test_interior_field(self, plate_bases):
        model = SolvedFieldModel(plate_bases, voltages=ElectrodeVoltages(static={0: 0.5, 1: -0.5}))
        field = -model.static_gradient((0.0, 0.0, 0.0))
        assert np.linalg.norm(field) == pytest.approx(1.0 / 1e-3, rel=0.05)
        assert field[2] < 0

    def test_capacitance_matrix(self, plate_bases):
        ids, matrix = capacitance_matrix(plate_bases)
        assert ids == [0, 1]
        assert matrix[0, 0] > 0 and matrix[0, 1] < 0
        assert matrix[0, 1] == pytest.approx(matrix[1, 0], rel=0.02)
        side, gap = 8e-3, 1e-3
        # Fringing adds to the ideal value.
        assert 1.0 < -matrix[0, 1] / (EPSILON_0 * side ** 2 / gap) < 1.6

    def test_linear_superposition(self, plate_bases):
        rng = np.random.default_rng(3)
        points = rng.uniform(-2e-3, 2e-3, (5, 3)) * np.array([1, 1, 0.2])
        singles = [SolvedFieldModel(plate_bases, voltages=ElectrodeVoltages(static={k: 1.0}))
                   for k in (0, 1)]
        for _ in range(5):
            v = rng.normal(size=2)
            combined = SolvedFieldModel(
                plate_bases, voltages=ElectrodeVoltages(static={0: v[0], 1: v[1]}))
            for r in points:
                expected = v[0] * singles[0].static_gradient(r) + v[1] * singles[1].static_gradient(r)
                got = combined.static_gradient(r)
                assert np.linalg.norm(got - expected) <= 1e-10 * np.linalg.norm(expected)

    def test_zero_and_scaled_voltages(self, plate_bases):
        r = (1e-4, -2e-4, 1e-4)
        zero = SolvedFieldModel(plate_bases, voltages=ElectrodeVoltages(static={0: 0.0, 1: 0.0}))
        assert zero.static_part(r) == 0.0
        base = SolvedFieldModel(plate_bases, voltages=ElectrodeVoltages(static={0: 0.7, 1: -0.2}))
        scaled = SolvedFieldModel(plate_bases, voltages=ElectrodeVoltages(static={0: 2.1, 1: -0.6}))
        assert scaled.static_part(r) == pytest.approx(3 * base.static_part(r), rel=1e-12)

    def test_cache_round_trip(self, plate_bases, tmp_path):
        path = tmp_path / "plates.bin"
        write_basis_cache(path, plate_bases)
        loaded = read_basis_cache(path)
        assert [b.electrode_id for b in loaded] == [0, 1]
        for original, copy in zip(plate_bases, loaded):
            np.testing.assert_array_equal(copy.charges, original.charges)
            np.testing.assert_array_equal(copy.mesh.vertices, original.mesh.vertices)
        assert loaded[0].mesh.electrode_names == {0: "top", 1: "bottom"}

    def test_cache_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTACACHE" + bytes(64))
        with pytest.raises(CacheFormatError, match="magic"):
            read_basis_cache(path)

    def test_cache_rejects_truncation(self, plate_bases, tmp_path):
        path = tmp_path / "short.bin"
        write_basis_cache(path, plate_bases)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CacheFormatError, match="truncated"):
            read_basis_cache(path)


# ---------------------------------------------------------------------------
# Solved trap field
# ---------------------------------------------------------------------------

class TestSolvedTrapField:
    def test_role_mapping(self):
        drive = DriveConfig(v_comp=(1.0, 2.0, 3.0, 4.0))
        names = {0: "rf1", 1: "rf2", 2: "dc1", 5: "c2", 9: "shield"}
        volts = electrode_voltages(names, drive)
        assert volts.rf_cos[0] == drive.v_rf1
        assert volts.rf_cos[1] < 0
        assert volts.static == {2: drive.v_d1, 5: 2.0}
        assert 9 not in volts.driven

    def test_missing_basis_names_electrode(self, trap_bases):
        without_dc1 = [b for b in trap_bases if b.name != "dc1"]
        with pytest.raises(BasisConfigurationError, match="dc1"):
            solved_field(without_dc1, DriveConfig())

    def test_gradient_matches_potential(self, trap_bases):
        model = solved_field(trap_bases, DriveConfig())
        rng = np.random.default_rng(5)
        h = 1e-8
        for _ in range(10):
            r = rng.uniform(-1e-4, 1e-4, 3)
            t = rng.uniform(0, model.drive.rf_period)
            fd = np.array([(model.potential(r + h * e, t) - model.potential(r - h * e, t)) / (2 * h)
                           for e in np.eye(3)])
            g = model.gradient(r, t)
            assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(g)

    def test_zero_drive_is_zero_field(self, trap_bases):
        drive = DriveConfig(v_rf1=0.0, v_rf2=0.0, v_d1=0.0, v_d2=0.0)
        model = solved_field(trap_bases, drive)
        assert model.omega_rf is None
        assert model.potential((1e-5, 2e-5, 3e-5), 0.0) == 0.0

    def test_radial_frequency_close_to_analytic(self, trap_bases):
        ion = IonSpecies.calcium40()
        drive = DriveConfig()
        solved = secular_frequencies(solved_field(trap_bases, drive), ion)
        analytic = secular_frequencies(AnalyticFieldModel(TrapGeometry(), drive), ion)
        assert solved.radial_mean == pytest.approx(analytic.radial_mean, rel=0.15)

    def test_bases_from_one_mesh_only(self, trap_bases, sphere_basis):
        with pytest.raises(BasisConfigurationError, match="different meshes"):
            SolvedFieldModel([trap_bases[0], sphere_basis], DriveConfig())

    def test_basis_names(self, trap_bases):
        assert isinstance(trap_bases[0], ChargeBasis)
        assert [b.name for b in trap_bases] == ["rf1", "rf2", "dc1", "dc2", "c1", "c2", "c3", "c4"]
