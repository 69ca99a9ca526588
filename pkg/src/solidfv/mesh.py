"""Unstructured hexahedral mesh handling.

Reads GMSH MSH 2.2 ASCII files, converts pure-tet meshes to conforming
hex meshes, and builds the face topology and geometry needed by the
finite-volume discretization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class MeshFormatError(Exception):
    """Raised for malformed or unsupported mesh files."""


class MeshGeometryError(Exception):
    """Raised for degenerate or inconsistent mesh geometry."""


# Local faces of a hex cell (vertex order winds outward from the cell).
# Vertex convention: 0-3 bottom quad, 4-7 top quad, vertex i+4 above i.
HEX_FACES = (
    (0, 3, 2, 1),
    (4, 5, 6, 7),
    (0, 1, 5, 4),
    (1, 2, 6, 5),
    (2, 3, 7, 6),
    (3, 0, 4, 7),
)

# Decomposition of a hex into five tets (four corner tets plus the core),
# each ordered for positive signed volume on a right-handed cell.
HEX_TETS = (
    (0, 1, 2, 5),
    (0, 2, 3, 7),
    (0, 5, 7, 4),
    (2, 7, 5, 6),
    (0, 2, 7, 5),
)

VTK_HEX_TYPE = 12


@dataclass
class Mesh:
    """Hex (or pre-conversion tet) mesh with FV topology.

    Geometry arrays are populated by :func:`build_geometry`; a freshly
    loaded tet mesh carries connectivity only and must go through
    :func:`tets_to_hexes` first.
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_kind: str = "hex"
    # raw patch data from the mesh file: patch name -> list of sorted
    # boundary vertex tuples (quads for hex meshes, tris for tet meshes)
    patch_elements: dict = field(default_factory=dict)

    faces: np.ndarray | None = None
    face_owner: np.ndarray | None = None
    face_neighbor: np.ndarray | None = None
    face_area: np.ndarray | None = None
    face_normal: np.ndarray | None = None
    face_centroid: np.ndarray | None = None
    face_dvec: np.ndarray | None = None
    face_nd: np.ndarray | None = None
    cell_volume: np.ndarray | None = None
    cell_centroid: np.ndarray | None = None
    cell_faces: np.ndarray | None = None
    cell_face_sign: np.ndarray | None = None
    vertex_cell_ptr: np.ndarray | None = None
    vertex_cell_ids: np.ndarray | None = None
    face_adj_ptr: np.ndarray | None = None
    face_adj_ids: np.ndarray | None = None
    patches: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_faces(self) -> int:
        return 0 if self.faces is None else self.faces.shape[0]

    def interior_faces(self) -> np.ndarray:
        return np.nonzero(self.face_neighbor >= 0)[0]

    def boundary_faces(self) -> np.ndarray:
        return np.nonzero(self.face_neighbor < 0)[0]

    def vertex_cells(self, v: int) -> np.ndarray:
        """Cells adjacent to vertex v."""
        return self.vertex_cell_ids[self.vertex_cell_ptr[v]:self.vertex_cell_ptr[v + 1]]

    def face_vertex_neighbors(self, f: int) -> np.ndarray:
        """Cells sharing at least one vertex with face f (owners included)."""
        return self.face_adj_ids[self.face_adj_ptr[f]:self.face_adj_ptr[f + 1]]


def _read_sections(path: str) -> dict:
    """Split an MSH file into named sections, keeping line numbers."""
    sections = {}
    current = None
    buf = []
    start = 0
    with open(path, "r") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("$End"):
                if current is None:
                    raise MeshFormatError(f"line {ln}: unexpected {line}")
                sections[current] = (start, buf)
                current, buf = None, []
            elif line.startswith("$"):
                if current is not None:
                    raise MeshFormatError(f"line {ln}: nested section {line}")
                current = line[1:]
                start = ln
                buf = []
            elif current is not None:
                buf.append((ln, line))
    if current is not None:
        raise MeshFormatError(f"section ${current} not closed")
    return sections


def load_msh(path: str, build: bool = True) -> Mesh:
    """Read a GMSH MSH 2.2 ASCII file.

    Physical surface groups become named boundary patches.  Hex meshes
    come back with topology and geometry built; pure-tet meshes are
    returned raw for :func:`tets_to_hexes`.
    """
    sections = _read_sections(path)

    if "MeshFormat" not in sections:
        raise MeshFormatError("missing $MeshFormat section")
    ln, fmt = sections["MeshFormat"][1][0]
    parts = fmt.split()
    if parts[0] != "2.2" or parts[1] != "0":
        raise MeshFormatError(f"line {ln}: unsupported format '{fmt}', need ASCII 2.2")

    names = {}
    if "PhysicalNames" in sections:
        rows = sections["PhysicalNames"][1]
        for ln, line in rows[1:]:
            parts = line.split(maxsplit=2)
            if len(parts) != 3:
                raise MeshFormatError(f"line {ln}: bad physical name entry '{line}'")
            dim, tag = int(parts[0]), int(parts[1])
            names[(dim, tag)] = parts[2].strip('"')

    if "Nodes" not in sections:
        raise MeshFormatError("missing $Nodes section")
    rows = sections["Nodes"][1]
    ln0, count_line = rows[0]
    try:
        n_nodes = int(count_line)
    except ValueError:
        raise MeshFormatError(f"line {ln0}: bad node count '{count_line}'")
    if len(rows) - 1 != n_nodes:
        raise MeshFormatError(
            f"line {ln0}: node count {n_nodes} does not match {len(rows) - 1} node lines")
    node_ids = np.empty(n_nodes, dtype=np.int64)
    coords = np.empty((n_nodes, 3), dtype=np.float64)
    for i, (ln, line) in enumerate(rows[1:]):
        parts = line.split()
        if len(parts) != 4:
            raise MeshFormatError(f"line {ln}: bad node entry '{line}'")
        node_ids[i] = int(parts[0])
        coords[i] = [float(parts[1]), float(parts[2]), float(parts[3])]
    id_to_index = {int(nid): i for i, nid in enumerate(node_ids)}

    if "Elements" not in sections:
        raise MeshFormatError("missing $Elements section")
    rows = sections["Elements"][1]
    ln0, count_line = rows[0]
    try:
        n_elems = int(count_line)
    except ValueError:
        raise MeshFormatError(f"line {ln0}: bad element count '{count_line}'")
    if len(rows) - 1 != n_elems:
        raise MeshFormatError(
            f"line {ln0}: element count {n_elems} does not match {len(rows) - 1} element lines")

    n_elem_nodes = {1: 2, 2: 3, 3: 4, 4: 4, 5: 8, 15: 1}
    tets, hexes = [], []
    surface = []  # (patch name, sorted vertex tuple)
    skipped_types = {}
    for ln, line in rows[1:]:
        parts = [int(p) for p in line.split()]
        etype, ntags = parts[1], parts[2]
        if etype not in n_elem_nodes:
            raise MeshFormatError(f"line {ln}: unsupported element type {etype}")
        nodes = parts[3 + ntags:]
        if len(nodes) != n_elem_nodes[etype]:
            raise MeshFormatError(
                f"line {ln}: element type {etype} expects {n_elem_nodes[etype]} nodes, got {len(nodes)}")
        try:
            verts = [id_to_index[n] for n in nodes]
        except KeyError as exc:
            raise MeshFormatError(f"line {ln}: unknown node id {exc.args[0]}")
        if etype == 4:
            tets.append(verts)
        elif etype == 5:
            hexes.append(verts)
        elif etype in (2, 3):
            phys = parts[3] if ntags >= 1 else 0
            pname = names.get((2, phys), f"patch_{phys}")
            surface.append((pname, tuple(sorted(verts))))
            skipped_types.setdefault(etype, ln)
        else:
            skipped_types.setdefault(etype, ln)

    if tets and hexes:
        raise MeshFormatError("mixed tet/hex meshes are not supported")
    if not tets and not hexes:
        if 2 in skipped_types or 3 in skipped_types:
            etype = 2 if 2 in skipped_types else 3
            raise MeshFormatError(
                f"line {skipped_types[etype]}: no volume elements; "
                f"type {etype} surface elements cannot define a volume mesh")
        raise MeshFormatError("no volume elements (types 4 or 5) in file")

    patch_elements = {}
    for pname, key in surface:
        patch_elements.setdefault(pname, []).append(key)

    if hexes:
        mesh = Mesh(vertices=coords, cells=np.asarray(hexes, dtype=np.int64),
                    cell_kind="hex", patch_elements=patch_elements)
        if build:
            build_geometry(mesh)
        return mesh
    return Mesh(vertices=coords, cells=np.asarray(tets, dtype=np.int64),
                cell_kind="tet", patch_elements=patch_elements)


def _tet_signed_volume(p0, p1, p2, p3) -> float:
    return float(np.linalg.det(np.stack([p1 - p0, p2 - p0, p3 - p0]))) / 6.0


def tets_to_hexes(mesh: Mesh) -> Mesh:
    """Subdivide every tet into four hexes.

    New vertices sit at edge midpoints, face centroids and the cell
    centroid; they are shared between neighboring tets through keys built
    from the original vertex ids, so the result is conforming with no
    duplicated vertices.  Boundary patches carry over to the sub-quads of
    each original boundary triangle.
    """
    if mesh.cell_kind != "tet":
        raise MeshGeometryError("tets_to_hexes expects a pure tetrahedral mesh")
    verts = [tuple(p) for p in mesh.vertices]
    n_orig = len(verts)
    key_index: dict = {}

    def node(key, point) -> int:
        idx = key_index.get(key)
        if idx is None:
            idx = n_orig + len(key_index)
            key_index[key] = idx
            verts.append(tuple(point))
        return idx

    V = mesh.vertices
    hexes = np.empty((4 * mesh.n_cells, 8), dtype=np.int64)
    face_centroid_tri: dict = {}  # face-centroid vertex id -> sorted orig tri

    for c, tet in enumerate(mesh.cells):
        a, b, cc, d = (int(v) for v in tet)
        if _tet_signed_volume(V[a], V[b], V[cc], V[d]) < 0.0:
            cc, d = d, cc

        def mid(i, j):
            return node(("e",) + tuple(sorted((i, j))), 0.5 * (V[i] + V[j]))

        def fctr(i, j, k):
            key = ("f",) + tuple(sorted((i, j, k)))
            idx = node(key, (V[i] + V[j] + V[k]) / 3.0)
            face_centroid_tri[idx] = key[1:]
            return idx

        g = node(("c", c), (V[a] + V[b] + V[cc] + V[d]) / 4.0)

        def corner(x, p, q, r):
            return (x, mid(x, p), fctr(x, p, q), mid(x, q),
                    mid(x, r), fctr(x, p, r), g, fctr(x, q, r))

        hexes[4 * c + 0] = corner(a, b, cc, d)
        hexes[4 * c + 1] = corner(b, a, d, cc)
        hexes[4 * c + 2] = corner(cc, a, b, d)
        hexes[4 * c + 3] = corner(d, b, a, cc)

    out = Mesh(vertices=np.asarray(verts, dtype=np.float64), cells=hexes,
               cell_kind="hex")
    build_geometry(out)

    # map boundary sub-quads back to original triangle patches via the
    # face-centroid vertex each one contains
    tri_patch = {}
    for pname, keys in mesh.patch_elements.items():
        for key in keys:
            tri_patch[key] = pname
    if tri_patch:
        patches: dict = {}
        for f in out.boundary_faces():
            pname = None
            for v in out.faces[f]:
                tri = face_centroid_tri.get(int(v))
                if tri is not None:
                    pname = tri_patch.get(tri)
                    break
            patches.setdefault(pname if pname is not None else "default", []).append(f)
        out.patches = {k: np.asarray(sorted(v), dtype=np.int64) for k, v in patches.items()}
    return out


def build_geometry(mesh: Mesh) -> Mesh:
    """Build face topology and all geometric quantities for a hex mesh.

    Faces get the owner's outward winding.  Quad area vectors come from
    the two-triangle split; cell volumes from the five-tet decomposition,
    which must produce positive sub-volumes (convex cells).
    """
    if mesh.cell_kind != "hex":
        raise MeshGeometryError("geometry requires a hex mesh; convert tets first")
    cells = mesh.cells
    V = mesh.vertices
    nc = cells.shape[0]

    face_map: dict = {}
    faces, owner, neighbor = [], [], []
    cell_faces = np.empty((nc, 6), dtype=np.int64)
    cell_face_sign = np.empty((nc, 6), dtype=np.int8)
    for c in range(nc):
        cv = cells[c]
        for lf, loc in enumerate(HEX_FACES):
            quad = (int(cv[loc[0]]), int(cv[loc[1]]), int(cv[loc[2]]), int(cv[loc[3]]))
            key = tuple(sorted(quad))
            fid = face_map.get(key)
            if fid is None:
                fid = len(faces)
                face_map[key] = fid
                faces.append(quad)
                owner.append(c)
                neighbor.append(-1)
                cell_faces[c, lf] = fid
                cell_face_sign[c, lf] = 1
            else:
                if neighbor[fid] >= 0:
                    raise MeshGeometryError(
                        f"face {key} shared by more than two cells")
                neighbor[fid] = c
                cell_faces[c, lf] = fid
                cell_face_sign[c, lf] = -1

    mesh.faces = np.asarray(faces, dtype=np.int64)
    mesh.face_owner = np.asarray(owner, dtype=np.int64)
    mesh.face_neighbor = np.asarray(neighbor, dtype=np.int64)
    mesh.cell_faces = cell_faces
    mesh.cell_face_sign = cell_face_sign
    nf = mesh.faces.shape[0]

    q0 = V[mesh.faces[:, 0]]
    q1 = V[mesh.faces[:, 1]]
    q2 = V[mesh.faces[:, 2]]
    q3 = V[mesh.faces[:, 3]]
    avec = 0.5 * (np.cross(q1 - q0, q2 - q0) + np.cross(q2 - q0, q3 - q0))
    area = np.linalg.norm(avec, axis=1)
    if np.any(area <= 0.0):
        bad = int(np.argmin(area))
        raise MeshGeometryError(f"face {bad} has zero area")
    mesh.face_area = area
    mesh.face_normal = avec / area[:, None]
    a1 = 0.5 * np.linalg.norm(np.cross(q1 - q0, q2 - q0), axis=1)
    a2 = 0.5 * np.linalg.norm(np.cross(q2 - q0, q3 - q0), axis=1)
    c1 = (q0 + q1 + q2) / 3.0
    c2 = (q0 + q2 + q3) / 3.0
    mesh.face_centroid = (a1[:, None] * c1 + a2[:, None] * c2) / (a1 + a2)[:, None]

    vol = np.zeros(nc)
    ctr = np.zeros((nc, 3))
    for t in HEX_TETS:
        p0 = V[cells[:, t[0]]]
        p1 = V[cells[:, t[1]]]
        p2 = V[cells[:, t[2]]]
        p3 = V[cells[:, t[3]]]
        tv = np.einsum("ij,ij->i", np.cross(p1 - p0, p2 - p0), p3 - p0) / 6.0
        if np.any(tv <= 0.0):
            bad = int(np.argmin(tv))
            raise MeshGeometryError(
                f"cell {bad}: non-convex or inverted (sub-tet volume {tv[bad]:.3e})")
        vol += tv
        ctr += tv[:, None] * (p0 + p1 + p2 + p3) / 4.0
    mesh.cell_volume = vol
    mesh.cell_centroid = ctr / vol[:, None]

    interior = mesh.face_neighbor >= 0
    dvec = np.empty((nf, 3))
    dvec[interior] = (mesh.cell_centroid[mesh.face_neighbor[interior]]
                      - mesh.cell_centroid[mesh.face_owner[interior]])
    dvec[~interior] = (mesh.face_centroid[~interior]
                       - mesh.cell_centroid[mesh.face_owner[~interior]])
    mesh.face_dvec = dvec
    mesh.face_nd = np.einsum("ij,ij->i", mesh.face_normal, dvec)
    if np.any(mesh.face_nd <= 0.0):
        bad = int(np.argmin(mesh.face_nd))
        raise MeshGeometryError(
            f"face {bad}: normal points away from neighbor (n.d = {mesh.face_nd[bad]:.3e})")

    # vertex -> cells adjacency (CSR)
    counts = np.zeros(mesh.n_vertices, dtype=np.int64)
    np.add.at(counts, cells.ravel(), 1)
    ptr = np.zeros(mesh.n_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    ids = np.empty(ptr[-1], dtype=np.int64)
    cursor = ptr[:-1].copy()
    for c in range(nc):
        for v in cells[c]:
            ids[cursor[v]] = c
            cursor[v] += 1
    mesh.vertex_cell_ptr = ptr
    mesh.vertex_cell_ids = ids

    # face -> vertex-neighbor cells (owners first, then the rest sorted)
    adj_ptr = np.zeros(nf + 1, dtype=np.int64)
    adj_chunks = []
    for f in range(nf):
        s: set = set()
        for v in mesh.faces[f]:
            s.update(mesh.vertex_cells(int(v)).tolist())
        own = [int(mesh.face_owner[f])]
        if mesh.face_neighbor[f] >= 0:
            own.append(int(mesh.face_neighbor[f]))
        rest = sorted(s.difference(own))
        chunk = np.asarray(own + rest, dtype=np.int64)
        adj_chunks.append(chunk)
        adj_ptr[f + 1] = adj_ptr[f] + len(chunk)
    mesh.face_adj_ptr = adj_ptr
    mesh.face_adj_ids = np.concatenate(adj_chunks) if adj_chunks else np.empty(0, dtype=np.int64)

    _resolve_patches(mesh)
    return mesh


def _resolve_patches(mesh: Mesh) -> None:
    """Match raw surface elements to boundary faces by vertex key."""
    bfaces = mesh.boundary_faces()
    if mesh.patch_elements:
        lookup = {tuple(sorted(int(v) for v in mesh.faces[f])): int(f) for f in bfaces}
        patches: dict = {}
        assigned = set()
        for pname, keys in mesh.patch_elements.items():
            fl = []
            for key in keys:
                fid = lookup.get(key)
                if fid is None:
                    raise MeshGeometryError(
                        f"patch '{pname}': surface element {key} is not a boundary face")
                fl.append(fid)
                assigned.add(fid)
            patches[pname] = np.asarray(sorted(fl), dtype=np.int64)
        rest = sorted(set(int(f) for f in bfaces) - assigned)
        if rest:
            patches.setdefault("default", np.asarray(rest, dtype=np.int64))
        mesh.patches = patches
    elif not mesh.patches:
        mesh.patches = {"default": bfaces.copy()}


def vertex_weights(mesh: Mesh) -> sp.csr_matrix:
    """Vertex interpolation operator W (n_vertices x n_cells).

    Each vertex averages its adjacent cells with equal weights, so every
    row sums to one and constants are reproduced exactly.
    """
    if mesh.vertex_cell_ptr is None:
        raise MeshGeometryError("geometry not built")
    ptr = mesh.vertex_cell_ptr
    ids = mesh.vertex_cell_ids
    counts = np.diff(ptr)
    if np.any(counts == 0):
        bad = int(np.argmin(counts))
        raise MeshGeometryError(f"vertex {bad} belongs to no cell")
    weights = np.repeat(1.0 / counts, counts)
    return sp.csr_matrix((weights, ids, ptr), shape=(mesh.n_vertices, mesh.n_cells))
