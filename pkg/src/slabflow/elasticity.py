"""Elastic mesh update: linear pseudo-elasticity moving interior grid points
to follow a prescribed free-surface displacement.

Displacement dofs are laid out as dof = 2 * pid + comp. Boundary handling:
surface points are Dirichlet (driven by the displacement scheme), strong sides
(fixed / noslip / inflow) are Dirichlet zero, slip and outflow sides constrain
only the wall-normal component so points may slide along straight walls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import splu

from .errors import ConfigError
from .mesh import SIDE_NORMAL_COMP, SIDES, SpatialMesh


@dataclass(frozen=True)
class MeshElasticityProps:
    """Pseudo-Lame parameters and Jacobian-stiffening exponent."""

    lam: float = 1.0
    mu: float = 1.0
    chi: float = 1.0

    def __post_init__(self):
        if self.mu <= 0.0:
            raise ConfigError("mesh mu must be positive")
        if self.lam < 0.0:
            raise ConfigError("mesh lambda must be nonnegative")
        if self.chi < 0.0:
            raise ConfigError("stiffening exponent chi must be nonnegative")


def stiffen(props: MeshElasticityProps,
            mesh: SpatialMesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-element effective (lambda, mu), stiffened by
    (reference volume / element volume)^chi with the mean element volume as
    reference, so small elements deform less."""
    _, det = mesh.jacobians()
    vol = det @ mesh.patch.qw
    scale = (vol.mean() / vol) ** props.chi
    return props.lam * scale, props.mu * scale


def strong_side_tags() -> tuple[str, ...]:
    return ("fixed", "noslip", "inflow")


def mesh_bc_arrays(mesh: SpatialMesh, surface_pids: np.ndarray):
    """Constraint layout for the mesh-displacement system.

    Returns (constrained_mask, surface_dof_indices, free_dof_indices) over the
    2 * n_points displacement dofs.
    """
    patch = mesh.patch
    N = patch.n_points
    mask = np.zeros(2 * N, dtype=bool)

    strong = strong_side_tags()
    for side in SIDES:
        tags = mesh.tags[side]
        pids = patch.side_pids(side)
        func_faces = patch.side_function_faces(side)
        comp = SIDE_NORMAL_COMP[side]
        for i, faces in enumerate(func_faces):
            face_tags = {tags[f] for f in faces}
            pid = pids[i]
            if face_tags & set(strong):
                mask[2 * pid] = True
                mask[2 * pid + 1] = True
            elif face_tags & {"slip", "outflow"}:
                mask[2 * pid + comp] = True

    surf_dofs = np.concatenate([2 * surface_pids, 2 * surface_pids + 1]) \
        if len(surface_pids) else np.empty(0, dtype=int)
    mask[surf_dofs] = True
    free = np.nonzero(~mask)[0]
    return mask, np.sort(surf_dofs), free


def assemble_stiffness(mesh: SpatialMesh,
                       props: MeshElasticityProps) -> sparse.csr_matrix:
    """Global elasticity stiffness matrix on the current configuration."""
    patch = mesh.patch
    lam_e, mu_e = stiffen(props, mesh)
    J, det = mesh.jacobians()
    Jinv = np.linalg.inv(J)
    # physical gradients: dN_phys[e,q,a,i] = dN[e,q,a,d] * Jinv[e,q,d,i]
    G = np.einsum("eqad,eqdi->eqai", patch.dN, Jinv)
    wq = det * patch.qw[None, :]

    lamw = lam_e[:, None] * wq
    muw = mu_e[:, None] * wq
    # K[(a,i),(b,j)] = sum_q w [ lam dNa_i dNb_j + mu (dNa_j dNb_i
    #                            + delta_ij dNa.dNb) ]
    K_lam = np.einsum("eq,eqai,eqbj->eaibj", lamw, G, G)
    K_mu1 = np.einsum("eq,eqaj,eqbi->eaibj", muw, G, G)
    dot = np.einsum("eq,eqad,eqbd->eab", muw, G, G)
    Ke = K_lam + K_mu1
    Ke[:, :, 0, :, 0] += dot
    Ke[:, :, 1, :, 1] += dot

    n_loc = patch.n_loc
    rows = (2 * patch.conn[:, :, None, None, None]
            + np.arange(2)[None, None, :, None, None])
    rows = np.broadcast_to(rows, (patch.n_el, n_loc, 2, n_loc, 2))
    cols = (2 * patch.conn[:, None, None, :, None]
            + np.arange(2)[None, None, None, None, :])
    cols = np.broadcast_to(cols, rows.shape)
    N2 = 2 * patch.n_points
    K = sparse.coo_matrix(
        (Ke.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
        shape=(N2, N2)).tocsr()
    return K


class EmumOperator:
    """Factorized mesh-update solve for one lower-slab configuration."""

    def __init__(self, mesh: SpatialMesh, props: MeshElasticityProps,
                 surface_pids: np.ndarray):
        self.mesh = mesh
        self.mask, self.surf_dofs, self.free = mesh_bc_arrays(
            mesh, surface_pids)
        if not self.mask.any():
            raise ConfigError("mesh update needs at least one Dirichlet side")
        K = assemble_stiffness(mesh, props)
        con = np.nonzero(self.mask)[0]
        self.con = con
        self.K_ff = K[self.free][:, self.free].tocsc()
        self.K_fc = K[self.free][:, con].tocsc()
        self.lu = splu(self.K_ff) if self.free.size else None
        self._influence = None

    def apply(self, z_dirichlet: np.ndarray) -> np.ndarray:
        """Full displacement field (2N,) for prescribed constrained values.

        z_dirichlet holds values over all 2N dofs; only constrained entries
        are read (unconstrained entries are ignored).
        """
        z = np.zeros(2 * self.mesh.patch.n_points)
        z[self.con] = z_dirichlet[self.con]
        if self.free.size:
            rhs = -self.K_fc @ z[self.con]
            z[self.free] = self.lu.solve(rhs)
        return z

    def influence(self, dof_cols: np.ndarray) -> np.ndarray:
        """dZ_free/d(constrained dof) for the requested constrained dofs:
        dense (n_free, len(dof_cols))."""
        if self.free.size == 0:
            return np.zeros((0, len(dof_cols)))
        pos = np.searchsorted(self.con, dof_cols)
        cols = -self.K_fc[:, pos].toarray()
        return self.lu.solve(cols)


def assemble_emum(mesh: SpatialMesh, z_D: np.ndarray,
                  props: MeshElasticityProps,
                  surface_pids: np.ndarray) -> np.ndarray:
    """Interior displacement for a prescribed surface displacement.

    z_D: (n_surface, 2) displacement of the given free-surface points.
    Returns the displacement of every grid point, shape (n_points, 2).
    """
    op = EmumOperator(mesh, props, np.asarray(surface_pids, dtype=int))
    zd = np.zeros(2 * mesh.patch.n_points)
    surface_pids = np.asarray(surface_pids, dtype=int)
    zd[2 * surface_pids] = np.asarray(z_D, dtype=float)[:, 0]
    zd[2 * surface_pids + 1] = np.asarray(z_D, dtype=float)[:, 1]
    return op.apply(zd).reshape(-1, 2)
