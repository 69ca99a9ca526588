"""File writers: VTK fields, probe CSV, campaign tables, MSH export.

Every writer formats numbers through fixed printf-style patterns, so
identical inputs produce byte-identical files.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


class OutputError(Exception):
    pass


SENTINEL = -1.0  # stands in for undefined (NaN/inf) cell values in VTK


def write_vtk(mesh: Mesh, fields: dict, path) -> None:
    """Legacy ASCII VTK unstructured grid of hex cells.

    fields maps names to per-cell scalar arrays.  Non-finite entries
    (cells that never acquired the quantity) are written as the -1.0
    sentinel so downstream tools get parseable numbers.
    """
    nc = mesh.n_cells
    for name, vals in fields.items():
        if len(np.asarray(vals)) != nc:
            raise OutputError(
                f"field '{name}' has {len(vals)} values for {nc} cells")
    lines = ["# vtk DataFile Version 3.0", "solidfv cell fields", "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} float"]
    for p in mesh.vertices:
        lines.append("%.9g %.9g %.9g" % (p[0], p[1], p[2]))
    lines.append(f"CELLS {nc} {nc * 9}")
    for cell in mesh.cells:
        lines.append("8 " + " ".join(str(int(v)) for v in cell))
    lines.append(f"CELL_TYPES {nc}")
    lines.extend(["12"] * nc)
    if fields:
        lines.append(f"CELL_DATA {nc}")
        for name, vals in fields.items():
            vals = np.asarray(vals, dtype=float).copy()
            vals[~np.isfinite(vals)] = SENTINEL
            lines.append(f"SCALARS {name.replace(' ', '_')} float 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend("%.9g" % v for v in vals)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def nearest_cells(mesh: Mesh, points) -> np.ndarray:
    """Nearest-cell-centroid index per probe point.

    Points must fall inside the mesh bounding box; a probe outside it
    is a configuration mistake, not a lookup to satisfy.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    for i, p in enumerate(pts):
        if np.any(p < lo) or np.any(p > hi):
            raise OutputError(
                f"probe point {i} at {tuple(p)} is outside the mesh "
                f"bounding box {tuple(lo)} to {tuple(hi)}")
    d2 = ((mesh.cell_centroid[None, :, :] - pts[:, None, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


class ProbeTraces:
    """Time-aligned temperature histories at named probe points."""

    def __init__(self, names, times, values):
        self.names = tuple(names)
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (len(self.times), len(self.names)):
            raise OutputError("trace array must be (n_times, n_probes)")


def write_probes(traces: ProbeTraces, path) -> None:
    """CSV with a time column and one column per probe, full precision."""
    lines = ["time," + ",".join(traces.names)]
    for t, row in zip(traces.times, traces.values):
        lines.append(repr(float(t)) + ","
                     + ",".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_probes(path) -> ProbeTraces:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    names = lines[0].split(",")[1:]
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    arr = np.asarray(rows, dtype=float)
    return ProbeTraces(names, arr[:, 0], arr[:, 1:])


def write_sobol_csv(table: dict, input_names, path) -> None:
    """One row per (functional, input) with first-order and total
    indices; undefined decompositions write empty index cells."""
    lines = ["functional,input,first_order,total"]
    for fname, (first, total, defined) in table.items():
        for k, iname in enumerate(input_names):
            if defined:
                lines.append(f"{fname},{iname},"
                             f"{float(first[k])!r},{float(total[k])!r}")
            else:
                lines.append(f"{fname},{iname},,")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_surface_csv(xv, yv, grid, xname, yname, path) -> None:
    """Flattened response-surface grid, x varying slowest."""
    lines = [f"{xname},{yname},value"]
    for i, x in enumerate(xv):
        for j, y in enumerate(yv):
            lines.append(f"{float(x)!r},{float(y)!r},{float(grid[i, j])!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_samples_csv(names, xi, physical, path) -> None:
    """Campaign sample list: standardized and physical coordinates."""
    xi = np.atleast_2d(xi)
    physical = np.atleast_2d(physical)
    head = ["sample"]
    head += [f"xi_{n}" for n in names] + list(names)
    lines = [",".join(head)]
    for i in range(len(xi)):
        row = [str(i)]
        row += [repr(float(v)) for v in xi[i]]
        row += [repr(float(v)) for v in physical[i]]
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_functionals(functionals: dict, path) -> None:
    lines = [f"{k} = {float(v)!r}" for k, v in functionals.items()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_msh(mesh: Mesh, path) -> None:
    """MSH 2.2 ASCII export of a hex mesh with named boundary patches.

    Patches become dim-2 physical groups over quad surface elements, so
    the file round-trips through the reader with patch names intact.
    """
    if mesh.cell_kind != "hex":
        raise OutputError("only hex meshes can be exported")
    names = sorted(mesh.patches)
    lines = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat"]
    if names:
        lines.append("$PhysicalNames")
        lines.append(str(len(names)))
        for tag, name in enumerate(names, start=1):
            lines.append(f'2 {tag} "{name}"')
        lines.append("$EndPhysicalNames")
    lines.append("$Nodes")
    lines.append(str(mesh.n_vertices))
    for i, p in enumerate(mesh.vertices, start=1):
        lines.append("%d %.17g %.17g %.17g" % (i, p[0], p[1], p[2]))
    lines.append("$EndNodes")
    n_quads = sum(len(mesh.patches[n]) for n in names)
    lines.append("$Elements")
    lines.append(str(n_quads + mesh.n_cells))
    eid = 1
    for tag, name in enumerate(names, start=1):
        for f in mesh.patches[name]:
            verts = " ".join(str(int(v) + 1) for v in mesh.faces[f])
            lines.append(f"{eid} 3 2 {tag} {tag} {verts}")
            eid += 1
    for cell in mesh.cells:
        verts = " ".join(str(int(v) + 1) for v in cell)
        lines.append(f"{eid} 5 2 0 0 {verts}")
        eid += 1
    lines.append("$EndElements")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
