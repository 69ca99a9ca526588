"""Collocated finite-volume operators on hex meshes.

Face-normal diffusion is split into a direct part along the
owner-neighbor line and a cross (non-orthogonality) part driven by the
full face gradient.  Face gradients come from a local curvilinear frame
spanned by the owner-neighbor vector and the two face diagonals; vertex
values in that frame are equal-weight averages of the surrounding cells.
The cross part and convection are treated explicitly, so the implicit
matrix keeps the compact direct stencil.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, vertex_weights


class DiscretizationError(Exception):
    pass


@dataclass
class FaceGradientStencil:
    """Gradient of a cell field at one interior face.

    coeffs[k, i] is the contribution of cells[i] to gradient component k.
    cond is a Frobenius condition estimate of the local frame Jacobian.
    """

    face: int
    cells: np.ndarray
    coeffs: np.ndarray
    cond: float

    def apply(self, field: np.ndarray) -> np.ndarray:
        return self.coeffs @ field[self.cells]


class FaceGradients:
    """Face gradient stencils for every interior face of a mesh.

    Also carries the geometric factors used by the diffusion split:
    ``geo_direct = area / (n.d)`` per face and the cross-direction vector
    ``tvec = n - d/(n.d)``, which vanishes on orthogonal meshes.
    """

    def __init__(self, mesh: Mesh, weights: sp.csr_matrix | None = None):
        if mesh.faces is None:
            raise DiscretizationError("mesh geometry not built")
        self.mesh = mesh
        self.weights = vertex_weights(mesh) if weights is None else weights
        nf = mesh.n_faces
        self.geo_direct = mesh.face_area / mesh.face_nd
        self.tvec = mesh.face_normal - mesh.face_dvec / mesh.face_nd[:, None]
        # treat round-off level skew as orthogonal so the cross loop can skip
        scale = np.linalg.norm(mesh.face_normal, axis=1)
        self.orthogonal = np.linalg.norm(self.tvec, axis=1) <= 1e-12 * scale
        self.stencil_cells: list = [None] * nf
        self.stencil_coeffs: list = [None] * nf
        self.cond = np.full(nf, np.nan)
        self._matrices = None
        self._build()

    def _build(self) -> None:
        mesh = self.mesh
        W = self.weights.tocsr()
        for f in mesh.interior_faces():
            f = int(f)
            o, n = int(mesh.face_owner[f]), int(mesh.face_neighbor[f])
            v1, v2, v3, v4 = (int(v) for v in mesh.faces[f])
            xi = mesh.cell_centroid[n] - mesh.cell_centroid[o]
            eta = mesh.vertices[v3] - mesh.vertices[v1]
            zeta = mesh.vertices[v4] - mesh.vertices[v2]
            J = np.stack([xi, eta, zeta])
            scale = max(np.linalg.norm(xi), np.linalg.norm(eta), np.linalg.norm(zeta))
            det = np.linalg.det(J)
            if abs(det) < 1e-14 * scale**3:
                raise DiscretizationError(
                    f"face {f}: singular gradient frame (det={det:.3e})")
            Jinv = np.linalg.inv(J)
            self.cond[f] = np.linalg.norm(J) * np.linalg.norm(Jinv)

            cells = mesh.face_vertex_neighbors(f)
            index = {int(c): i for i, c in enumerate(cells)}
            coeffs = np.zeros((3, len(cells)))
            coeffs[:, index[n]] += Jinv[:, 0]
            coeffs[:, index[o]] -= Jinv[:, 0]
            for vert, col, sign in ((v3, 1, 1.0), (v1, 1, -1.0),
                                    (v4, 2, 1.0), (v2, 2, -1.0)):
                row = W.getrow(vert)
                for cid, w in zip(row.indices, row.data):
                    coeffs[:, index[int(cid)]] += sign * w * Jinv[:, col]
            self.stencil_cells[f] = np.asarray(cells, dtype=np.int64)
            self.stencil_coeffs[f] = coeffs

    def stencil(self, f: int) -> FaceGradientStencil:
        if self.stencil_cells[f] is None:
            raise DiscretizationError(f"face {f} is a boundary face; no gradient stencil")
        return FaceGradientStencil(f, self.stencil_cells[f], self.stencil_coeffs[f],
                                   float(self.cond[f]))

    def matrices(self):
        """Sparse (Gx, Gy, Gz), each n_faces x n_cells; boundary rows empty."""
        if self._matrices is None:
            self._matrices = build_gradient_matrices(
                self.mesh, self.stencil_cells, self.stencil_coeffs)
        return self._matrices

    def all_gradients(self, field: np.ndarray) -> np.ndarray:
        Gx, Gy, Gz = self.matrices()
        return np.column_stack([Gx @ field, Gy @ field, Gz @ field])


def build_gradient_matrices(mesh: Mesh, stencil_cells, stencil_coeffs):
    rows, cols, dx, dy, dz = [], [], [], [], []
    for f in range(mesh.n_faces):
        cells = stencil_cells[f]
        if cells is None:
            continue
        coeffs = stencil_coeffs[f]
        rows.extend([f] * len(cells))
        cols.extend(int(c) for c in cells)
        dx.extend(coeffs[0])
        dy.extend(coeffs[1])
        dz.extend(coeffs[2])
    shape = (mesh.n_faces, mesh.n_cells)
    return tuple(sp.csr_matrix((np.asarray(d), (rows, cols)), shape=shape)
                 for d in (dx, dy, dz))


def face_gradient(field: np.ndarray, f: int, gradients: FaceGradients) -> np.ndarray:
    """Gradient vector of a cell field at interior face f."""
    return gradients.stencil(f).apply(field)


def diffusion_face_coeffs(f: int, gamma: float, gradients: FaceGradients):
    """Split diffusion coefficients for face f.

    Returns (direct, cross) where direct multiplies (phi_nb - phi_own)
    and cross is a FaceGradientStencil scaled so that its application to
    the field gives the explicit cross-diffusion flux (owner outward).
    """
    mesh = gradients.mesh
    direct = gamma * gradients.geo_direct[f]
    st = gradients.stencil(f)
    cross = FaceGradientStencil(
        f, st.cells,
        gamma * mesh.face_area[f] * (gradients.tvec[f][:, None] * st.coeffs),
        st.cond)
    return direct, cross


def convection_face_flux(volume_flux: float, phi_own: float, phi_nb: float) -> float:
    """Convected flux through a face with central face interpolation."""
    return volume_flux * 0.5 * (phi_own + phi_nb)


@dataclass
class DirichletBC:
    """Fixed-value boundary condition on a set of boundary faces.

    values_new / values_old are the face values at the new and old time
    level (equal for steady boundary data).  All other boundary faces are
    zero-flux.
    """

    faces: np.ndarray
    values_new: np.ndarray
    values_old: np.ndarray

    @classmethod
    def uniform(cls, faces, value_new: float, value_old: float | None = None):
        faces = np.asarray(faces, dtype=np.int64)
        vn = np.full(len(faces), float(value_new))
        vo = vn if value_old is None else np.full(len(faces), float(value_old))
        return cls(faces, vn, vo)


class TransportAssembler:
    """Assembles implicit systems for the generic transport equation.

    Time integration: Crank-Nicolson for the direct diffusion part,
    Adams-Bashforth (explicit Euler on the first step) for convection,
    fully explicit lagged cross diffusion, caller-supplied implicit
    diagonal augmentations (drag, latent-heat slope) and sources.
    """

    def __init__(self, mesh: Mesh, gradients: FaceGradients):
        self.mesh = mesh
        self.gradients = gradients
        ii = mesh.interior_faces()
        self.int_faces = ii
        self.int_owner = mesh.face_owner[ii]
        self.int_neighbor = mesh.face_neighbor[ii]
        self.int_geo = gradients.geo_direct[ii]
        self.bnd_faces = mesh.boundary_faces()
        self.bnd_owner = mesh.face_owner[self.bnd_faces]
        self.bnd_geo = gradients.geo_direct[self.bnd_faces]
        self._bnd_pos = {int(f): i for i, f in enumerate(self.bnd_faces)}
        self.any_cross = not bool(np.all(gradients.orthogonal[ii]))

    def diffusion_operator(self, gamma_face: np.ndarray, bc: DirichletBC | None):
        """(D, E) with (D phi + E phi_b) the diffusive gain per cell."""
        nc = self.mesh.n_cells
        o, n = self.int_owner, self.int_neighbor
        coef = gamma_face[self.int_faces] * self.int_geo
        rows = np.concatenate([o, o, n, n])
        cols = np.concatenate([n, o, o, n])
        data = np.concatenate([coef, -coef, coef, -coef])
        if bc is not None and len(bc.faces):
            pos = np.asarray([self._bnd_pos[int(f)] for f in bc.faces], dtype=np.int64)
            own = self.bnd_owner[pos]
            bcoef = gamma_face[bc.faces] * self.bnd_geo[pos]
            rows = np.concatenate([rows, own])
            cols = np.concatenate([cols, own])
            data = np.concatenate([data, -bcoef])
            E = sp.csr_matrix((bcoef, (own, np.arange(len(bc.faces)))),
                              shape=(nc, len(bc.faces)))
        else:
            E = sp.csr_matrix((nc, 0))
        D = sp.csr_matrix((data, (rows, cols)), shape=(nc, nc))
        return D, E

    def cross_gain(self, phi: np.ndarray, gamma_face: np.ndarray) -> np.ndarray:
        """Explicit cross-diffusion gain per cell (zero on orthogonal meshes)."""
        nc = self.mesh.n_cells
        if not self.any_cross:
            return np.zeros(nc)
        g = self.gradients
        grads = g.all_gradients(phi)
        flux = (self.mesh.face_area * np.einsum("ij,ij->i", g.tvec, grads))
        flux = gamma_face * flux
        gain = np.zeros(nc)
        np.add.at(gain, self.int_owner, flux[self.int_faces])
        np.subtract.at(gain, self.int_neighbor, flux[self.int_faces])
        return gain

    def convection_outflow(self, phi: np.ndarray, flux: np.ndarray) -> np.ndarray:
        """Net convective outflow sum per cell with central face values.

        Boundary faces carry no convective flux (closed walls).
        """
        o, n = self.int_owner, self.int_neighbor
        fl = flux[self.int_faces]
        face_phi = 0.5 * (phi[o] + phi[n])
        out = np.zeros(self.mesh.n_cells)
        np.add.at(out, o, fl * face_phi)
        np.subtract.at(out, n, fl * face_phi)
        return out

    def assemble(self, *, capacity, gamma_face, dt, phi_old,
                 bc: DirichletBC | None = None,
                 conv_coeff: float = 0.0, flux=None, flux_old=None,
                 phi_conv=None, phi_conv_old=None, first_step: bool = False,
                 source=None, diag_extra=None):
        """Build (A, b) for one implicit step of the transport equation.

        capacity is the per-cell transient coefficient (e.g. rho*cp);
        source is the volume-integrated explicit source.  The returned
        matrix is CSR with the full Dirichlet/Crank-Nicolson treatment
        folded in.
        """
        mesh = self.mesh
        nc = mesh.n_cells
        cap = np.broadcast_to(np.asarray(capacity, dtype=float), (nc,))
        tr = cap * mesh.cell_volume / dt
        D, E = self.diffusion_operator(gamma_face, bc)
        A = sp.diags(tr).tocsr() - 0.5 * D
        if diag_extra is not None:
            A = A + sp.diags(diag_extra)
        b = tr * phi_old + 0.5 * (D @ phi_old)
        if bc is not None and len(bc.faces):
            b += 0.5 * (E @ bc.values_old) + 0.5 * (E @ bc.values_new)
        b += self.cross_gain(phi_old, gamma_face)
        if conv_coeff != 0.0 and flux is not None:
            c_now = self.convection_outflow(
                phi_old if phi_conv is None else phi_conv, flux)
            if first_step or flux_old is None or phi_conv_old is None:
                b -= conv_coeff * c_now
            else:
                c_old = self.convection_outflow(phi_conv_old, flux_old)
                b -= conv_coeff * (1.5 * c_now - 0.5 * c_old)
        if source is not None:
            b = b + source
        return A.tocsr(), b


def assemble_transport(mesh, gradients, **kwargs):
    """One-shot convenience wrapper around TransportAssembler.assemble."""
    return TransportAssembler(mesh, gradients).assemble(**kwargs)
