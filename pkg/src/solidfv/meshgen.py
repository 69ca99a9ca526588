"""Programmatic construction of small benchmark meshes.

Cartesian blocks and an L-shaped bracket, built directly as hex meshes.
These stand in for production castings at desk scale; arbitrary
geometries still come in through MSH files.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh, build_geometry


def box_mesh(nx: int, ny: int, nz: int, lengths=(1.0, 1.0, 1.0),
             origin=(0.0, 0.0, 0.0)) -> Mesh:
    """Structured hex block with axis-aligned boundary patches.

    Patches are named xmin/xmax/ymin/ymax/zmin/zmax.
    """
    return _from_ijk_cells(
        [(i, j, k) for k in range(nz) for j in range(ny) for i in range(nx)],
        (nx, ny, nz), lengths, origin)


def l_bracket_mesh(n_arm: int, n_thick: int, n_depth: int,
                   arm_length: float, thickness: float, depth: float) -> Mesh:
    """L-shaped bracket: two orthogonal arms sharing a corner block.

    Cells live on an n_arm x n_arm x n_depth grid, retained where
    i < n_thick or j < n_thick.  Both arms are arm_length long and
    thickness wide; the part is depth deep in z.
    """
    if n_thick >= n_arm:
        raise ValueError("n_thick must be smaller than n_arm")
    h = arm_length / n_arm
    ht = thickness / n_thick
    if abs(h - ht) > 1e-12 * h:
        raise ValueError("thickness/n_thick must match arm_length/n_arm for a uniform grid")
    cells = [(i, j, k)
             for k in range(n_depth) for j in range(n_arm) for i in range(n_arm)
             if i < n_thick or j < n_thick]
    return _from_ijk_cells(cells, (n_arm, n_arm, n_depth),
                           (arm_length, arm_length, depth), (0.0, 0.0, 0.0))


def _from_ijk_cells(ijk_cells, grid_shape, lengths, origin) -> Mesh:
    nx, ny, nz = grid_shape
    hx, hy, hz = lengths[0] / nx, lengths[1] / ny, lengths[2] / nz
    vid: dict = {}
    verts = []

    def vertex(i, j, k):
        key = (i, j, k)
        idx = vid.get(key)
        if idx is None:
            idx = len(verts)
            vid[key] = idx
            verts.append((origin[0] + i * hx, origin[1] + j * hy, origin[2] + k * hz))
        return idx

    cells = np.empty((len(ijk_cells), 8), dtype=np.int64)
    for c, (i, j, k) in enumerate(ijk_cells):
        cells[c] = (vertex(i, j, k), vertex(i + 1, j, k),
                    vertex(i + 1, j + 1, k), vertex(i, j + 1, k),
                    vertex(i, j, k + 1), vertex(i + 1, j, k + 1),
                    vertex(i + 1, j + 1, k + 1), vertex(i, j + 1, k + 1))

    mesh = Mesh(vertices=np.asarray(verts, dtype=np.float64), cells=cells)
    build_geometry(mesh)
    _name_axis_patches(mesh, origin, lengths)
    return mesh


def _name_axis_patches(mesh: Mesh, origin, lengths) -> None:
    """Group boundary faces by outward axis direction."""
    names = {(0, -1): "xmin", (0, 1): "xmax", (1, -1): "ymin",
             (1, 1): "ymax", (2, -1): "zmin", (2, 1): "zmax"}
    patches: dict = {}
    for f in mesh.boundary_faces():
        n = mesh.face_normal[f]
        axis = int(np.argmax(np.abs(n)))
        side = 1 if n[axis] > 0 else -1
        patches.setdefault(names[(axis, side)], []).append(int(f))
    mesh.patches = {k: np.asarray(sorted(v), dtype=np.int64)
                    for k, v in patches.items()}
