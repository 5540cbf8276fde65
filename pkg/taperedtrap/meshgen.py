"""
Mesh generators for the collocation solver: test bodies and the trap itself.
"""

import math
from typing import List, Sequence, Tuple

import numpy as np

from taperedtrap.fieldsolve import TriMesh, merge_meshes
from taperedtrap.trapmodel import TrapGeometry

# Electrode ids of tapered_trap_mesh().
TRAP_ELECTRODES = {0: "rf1", 1: "rf2", 2: "dc1", 3: "dc2", 4: "c1", 5: "c2", 6: "c3", 7: "c4"}

# Sphere refinement ladder: (stacks, slices) giving 168, 520 and 2000 triangles.
SPHERE_LEVELS = ((8, 12), (14, 20), (26, 40))


def uv_sphere(radius: float, stacks: int = 26, slices: int = 40, electrode_id: int = 0,
              name: str = "sphere", center: Sequence[float] = (0.0, 0.0, 0.0)) -> TriMesh:
    """Latitude-longitude sphere with slices * (2 * stacks - 2) triangles."""
    if stacks < 2 or slices < 3:
        raise ValueError("a sphere needs stacks >= 2 and slices >= 3")
    cx, cy, cz = center
    vertices = [(cx, cy, cz + radius)]
    for i in range(1, stacks):
        polar = math.pi * i / stacks
        for j in range(slices):
            azimuth = 2 * math.pi * j / slices
            vertices.append((cx + radius * math.sin(polar) * math.cos(azimuth),
                             cy + radius * math.sin(polar) * math.sin(azimuth),
                             cz + radius * math.cos(polar)))
    vertices.append((cx, cy, cz - radius))
    south = len(vertices) - 1

    def ring(i: int, j: int) -> int:
        return 1 + (i - 1) * slices + j % slices

    triangles = [(0, ring(1, j), ring(1, j + 1)) for j in range(slices)]
    for i in range(1, stacks - 1):
        for j in range(slices):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            triangles += [(a, c, d), (a, d, b)]
    triangles += [(south, ring(stacks - 1, j + 1), ring(stacks - 1, j)) for j in range(slices)]
    return TriMesh(np.array(vertices), np.array(triangles),
                   np.full(len(triangles), electrode_id), {electrode_id: name})


def _grid_sheet(corner: np.ndarray, edge_u: np.ndarray, edge_v: np.ndarray,
                u_nodes: Sequence[float], v_nodes: Sequence[float],
                electrode_id: int, name: str) -> TriMesh:
    """Sheet corner + u*edge_u + v*edge_v split into two triangles per cell."""
    nu, nv = len(u_nodes), len(v_nodes)
    vertices = [corner + u * edge_u + v * edge_v for u in u_nodes for v in v_nodes]
    triangles: List[Tuple[int, int, int]] = []
    for i in range(nu - 1):
        for j in range(nv - 1):
            a, b = i * nv + j, i * nv + j + 1
            c, d = (i + 1) * nv + j, (i + 1) * nv + j + 1
            triangles += [(a, c, d), (a, d, b)]
    return TriMesh(np.array(vertices), np.array(triangles),
                   np.full(len(triangles), electrode_id), {electrode_id: name})


def parallel_plates(side: float = 8e-3, gap: float = 1e-3, n: int = 20,
                    names: Tuple[str, str] = ("top", "bottom")) -> TriMesh:
    """Two square plates of the given side at z = +gap/2 (id 0) and -gap/2 (id 1)."""
    nodes = np.linspace(0.0, 1.0, n + 1)
    plates = []
    for eid, z in ((0, gap / 2), (1, -gap / 2)):
        plates.append(_grid_sheet(np.array([-side / 2, -side / 2, z]),
                                  np.array([side, 0.0, 0.0]), np.array([0.0, side, 0.0]),
                                  nodes, nodes, eid, names[eid]))
    return merge_meshes(plates)


def _blade(geometry: TrapGeometry, direction: Tuple[float, float], width: float,
           n_axial: int, n_radial: int, electrode_id: int) -> TriMesh:
    """Flat blade whose inner edge follows rho(z) along a radial direction."""
    ex, ey = direction
    half = geometry.blade_length / 2
    vertices = []
    # Quadratic grading puts the finest cells at the blade tip.
    radial = (np.arange(n_radial + 1) / n_radial) ** 2
    for z in np.linspace(-half, half, n_axial + 1):
        rho = geometry.rho(float(z))
        for s in radial:
            distance = rho + s * width
            vertices.append((distance * ex, distance * ey, float(z)))
    triangles = []
    stride = n_radial + 1
    for i in range(n_axial):
        for j in range(n_radial):
            a, b = i * stride + j, i * stride + j + 1
            c, d = (i + 1) * stride + j, (i + 1) * stride + j + 1
            triangles += [(a, c, d), (a, d, b)]
    return TriMesh(np.array(vertices), np.array(triangles),
                   np.full(len(triangles), electrode_id),
                   {electrode_id: TRAP_ELECTRODES[electrode_id]})


def _annulus(inner: float, outer: float, z: float, n_theta: int, n_rings: int,
             electrode_id: int) -> TriMesh:
    radii = np.linspace(inner, outer, n_rings + 1)
    vertices = [(r * math.cos(2 * math.pi * k / n_theta), r * math.sin(2 * math.pi * k / n_theta), z)
                for r in radii for k in range(n_theta)]
    triangles = []
    for i in range(n_rings):
        for k in range(n_theta):
            a, b = i * n_theta + k, i * n_theta + (k + 1) % n_theta
            c, d = (i + 1) * n_theta + k, (i + 1) * n_theta + (k + 1) % n_theta
            triangles += [(a, c, d), (a, d, b)]
    return TriMesh(np.array(vertices), np.array(triangles),
                   np.full(len(triangles), electrode_id),
                   {electrode_id: TRAP_ELECTRODES[electrode_id]})


def _rod(center: Tuple[float, float], radius: float, length: float, n_sides: int,
         n_axial: int, electrode_id: int) -> TriMesh:
    """Open prism along z approximating a round rod."""
    cx, cy = center
    vertices = [(cx + radius * math.cos(2 * math.pi * k / n_sides),
                 cy + radius * math.sin(2 * math.pi * k / n_sides), float(z))
                for z in np.linspace(-length / 2, length / 2, n_axial + 1) for k in range(n_sides)]
    triangles = []
    for i in range(n_axial):
        for k in range(n_sides):
            a, b = i * n_sides + k, i * n_sides + (k + 1) % n_sides
            c, d = (i + 1) * n_sides + k, (i + 1) * n_sides + (k + 1) % n_sides
            triangles += [(a, c, d), (a, d, b)]
    return TriMesh(np.array(vertices), np.array(triangles),
                   np.full(len(triangles), electrode_id),
                   {electrode_id: TRAP_ELECTRODES[electrode_id]})


def tapered_trap_mesh(geometry: TrapGeometry, blade_width: float = 2.5e-3,
                      n_axial: int = 16, n_radial: int = 6, endcap_outer: float = 3.0e-3,
                      n_theta: int = 24, n_rings: int = 4, rod_sides: int = 6) -> TriMesh:
    """Coarse electrode set of the tapered trap.

    rf1 is the blade pair along +-x, rf2 the pair along +-y, dc1 the endcap at
    +z and dc2 the one at -z. c1..c4 sit on the +x', +y', -x', -y' diagonals.
    """
    parts = [
        _blade(geometry, (1.0, 0.0), blade_width, n_axial, n_radial, 0),
        _blade(geometry, (-1.0, 0.0), blade_width, n_axial, n_radial, 0),
        _blade(geometry, (0.0, 1.0), blade_width, n_axial, n_radial, 1),
        _blade(geometry, (0.0, -1.0), blade_width, n_axial, n_radial, 1),
        _annulus(geometry.endcap_hole_diam / 2, endcap_outer, geometry.endcap_gap / 2,
                 n_theta, n_rings, 2),
        _annulus(geometry.endcap_hole_diam / 2, endcap_outer, -geometry.endcap_gap / 2,
                 n_theta, n_rings, 3),
    ]
    distance = geometry.comp_diag_distance / 2
    s = distance / math.sqrt(2)
    for eid, (ux, uy) in zip((4, 5, 6, 7), ((s, s), (-s, s), (-s, -s), (s, -s))):
        parts.append(_rod((ux, uy), geometry.comp_diam / 2, geometry.blade_length,
                          rod_sides, 2, eid))
    return merge_meshes(parts)
