"""Free-surface displacement: weak interface equations and point updates.

The surface unknowns are displacements of the top-row control points relative
to the run's initial surface. PDE schemes close the slab system with one or
two weak equations per surface basis function, tested constant in time:

  F1 (always):      integral of N_a (s_dot - u) . n dl dt
  F2 (tangential):  scheme-dependent closure for the tangential motion

with n dl = perp(x_theta) dtheta, so no normalization is involved and summing
the F1 rows over all surface functions gives the exact net surface flux.
A vertical displacement direction drops the tangential unknowns entirely,
which keeps the horizontal control positions at their initial values.

Point-based schemes skip the weak equations: the flow is solved on a slab
extruded from the lower configuration and the surface is then moved
explicitly along averaged normals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from .errors import ConfigError, SingularityError
from .mesh import DofMap
from .splines import KnotVector, NurbsCurve, greville_abscissae

POINT_SCHEMES = ("node-normal", "greville")
PDE_SCHEMES = ("pde-equal", "pde-normal", "pde-directional")


@dataclass(frozen=True)
class DisplacementScheme:
    """Free-surface update rule selected by name.

    direction only matters for 'pde-directional'; a vertical direction is
    simplified exactly by eliminating the horizontal surface unknowns.
    """

    kind: str
    direction: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in POINT_SCHEMES + PDE_SCHEMES:
            raise ConfigError(f"unknown displacement scheme {self.kind!r}")
        dx, dy = self.direction
        if self.kind == "pde-directional" and dx == 0.0 and dy == 0.0:
            raise ConfigError("displacement direction must be nonzero")

    @property
    def is_pde(self) -> bool:
        return self.kind in PDE_SCHEMES

    @property
    def vertical(self) -> bool:
        return self.kind == "pde-directional" and self.direction[0] == 0.0

    @property
    def tangential_dofs(self) -> bool:
        return self.is_pde and not self.vertical


def perp(t: np.ndarray) -> np.ndarray:
    """Rotate by +90 degrees: tangent along +x gives the upward normal."""
    return np.stack([-t[..., 1], t[..., 0]], axis=-1)


class SurfaceAssembler:
    """Weak interface equations of one slab for a PDE displacement scheme.

    Surface state is carried as full top-row displacement arrays (n_u, 2);
    only the entries behind dof-map slots are unknowns, everything else stays
    fixed (wall functions near a lip, pinned corner x-components).
    """

    def __init__(self, dofmap: DofMap, scheme: DisplacementScheme,
                 X0_top: np.ndarray, s_prev: np.ndarray, dt: float):
        if not scheme.is_pde:
            raise ConfigError("surface equations exist only for PDE schemes")
        self.dofmap = dofmap
        self.scheme = scheme
        self.X0 = np.asarray(X0_top, dtype=float)
        self.s_prev = np.asarray(s_prev, dtype=float)
        self.dt = dt

        patch = dofmap.mesh.patch
        self.patch = patch
        free = np.array([t == "free" for t in dofmap.mesh.tags["top"]])
        self.faces = np.nonzero(free)[0]
        self.tN = patch.trace_N[self.faces]          # (F, Q, B)
        self.tdN = patch.trace_dN[self.faces]
        self.rows = patch.trace_conn[self.faces] // patch.n_v   # (F, B)
        tq, tw = patch.tq, patch.tw
        self.T = np.stack([1.0 - tq, tq], axis=1)    # (R, level)
        self.tq = tq
        self.W = np.einsum("q,r->qr", patch.trace_qw, tw * dt)

        # dof slots per top-row function
        n_u = patch.n_u
        self.slot_x = np.full(n_u, -1, dtype=int)
        self.slot_y = np.full(n_u, -1, dtype=int)
        for k, (pid, comp) in enumerate(dofmap.surface_dofs):
            i = pid // patch.n_v
            (self.slot_x if comp == 0 else self.slot_y)[i] = k
        self.top_pids = patch.side_pids("top")

    # --- state access -------------------------------------------------------

    def gather_dofs(self, s_full: np.ndarray) -> np.ndarray:
        """Pick the unknown entries of a full (n_u, 2) displacement array."""
        patch = self.patch
        out = np.empty(self.dofmap.n_s)
        for k, (pid, comp) in enumerate(self.dofmap.surface_dofs):
            out[k] = s_full[pid // patch.n_v, comp]
        return out

    def scatter_dofs(self, s_full: np.ndarray, vec: np.ndarray) -> np.ndarray:
        """Write unknown entries into a copy of the full displacement array."""
        patch = self.patch
        s = s_full.copy()
        for k, (pid, comp) in enumerate(self.dofmap.surface_dofs):
            s[pid // patch.n_v, comp] = vec[k]
        return s

    # --- integrand pieces -----------------------------------------------------

    def _trace_fields(self, x_flow, s_next):
        n_pts = self.dofmap.n_points
        U = x_flow[: 4 * n_pts].reshape(2, 2, n_pts)
        topU = U[:, :, self.top_pids]                     # (level, i, row)
        u = np.einsum("fqb,rl,lifb->fqri", self.tN, self.T,
                      topU[:, :, self.rows])
        sdot = np.einsum("fqb,fbi->fqi",
                         self.tN, (s_next - self.s_prev)[self.rows] / self.dt)
        ctrl0 = self.X0 + self.s_prev
        ctrl1 = self.X0 + s_next
        cr = ((1.0 - self.tq)[:, None, None] * ctrl0[None]
              + self.tq[:, None, None] * ctrl1[None])     # (R, n_u, 2)
        xth = np.einsum("fqb,rfbi->fqri", self.tdN, cr[:, self.rows, :])
        return u, sdot, xth

    def residual(self, x_flow: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        u, sdot, xth = self._trace_fields(x_flow, s_next)
        nrm = perp(xth)
        mis = sdot[:, :, None, :] - u                     # s_dot - u
        R = np.zeros(self.dofmap.n_s)

        g1 = np.einsum("fqri,fqri->fqr", mis, nrm)
        C1 = np.einsum("fqb,fqr,qr->fb", self.tN, g1, self.W)
        ry = self.slot_y[self.rows]
        ok = ry >= 0
        np.add.at(R, ry[ok], C1[ok])

        if self.scheme.tangential_dofs:
            g2 = self._tangential_integrand(u, sdot, xth, nrm)
            C2 = np.einsum("fqb,fqr,qr->fb", self.tN, g2, self.W)
            rx = self.slot_x[self.rows]
            ok = rx >= 0
            np.add.at(R, rx[ok], C2[ok])
        return R

    def _tangential_integrand(self, u, sdot, xth, nrm):
        kind = self.scheme.kind
        if kind == "pde-equal":
            mis = sdot[:, :, None, :] - u
            return np.einsum("fqri,fqri->fqr", mis, xth)
        if kind == "pde-normal":
            return np.einsum("fqi,fqri->fqr", sdot, xth)
        d = np.asarray(self.scheme.direction, dtype=float)
        dn = np.einsum("i,fqri->fqr", d, nrm)
        scale = np.abs(d).sum() * np.sqrt((nrm ** 2).sum(-1))
        if np.any(np.abs(dn) < 1e-6 * scale):
            raise SingularityError(
                "displacement direction nearly tangential to the surface")
        un = np.einsum("fqri,fqri->fqr", u, nrm)
        dx = np.einsum("i,fqri->fqr", d, xth)
        sx = np.einsum("fqi,fqri->fqr", sdot, xth)
        return sx - un / dn * dx

    # --- linearization --------------------------------------------------------

    def linearize(self, x_flow: np.ndarray, s_next: np.ndarray):
        """Residual, velocity Jacobian (csr over the flow block), and the
        dense Jacobian with respect to the surface dof vector (by forward
        differences; the residual is only quadratic in s)."""
        R = self.residual(x_flow, s_next)
        J_u = self._velocity_jacobian(x_flow, s_next)

        s_vec = self.gather_dofs(s_next)
        h = 1e-7 * (1.0 + np.abs(s_vec).max(initial=0.0))
        J_s = np.empty((self.dofmap.n_s, self.dofmap.n_s))
        for k in range(self.dofmap.n_s):
            pert = s_vec.copy()
            pert[k] += h
            J_s[:, k] = (self.residual(x_flow,
                                       self.scatter_dofs(s_next, pert)) - R) / h
        return R, J_u, J_s

    def _velocity_jacobian(self, x_flow, s_next) -> sparse.csr_matrix:
        u, sdot, xth = self._trace_fields(x_flow, s_next)
        nrm = perp(xth)
        # dF1 / dU[level, i, row_c] = -int N_a N_c T_level nrm_i
        dF1 = -np.einsum("fqb,fqc,qr,rl,fqri->fbcli", self.tN, self.tN,
                         self.W, self.T, nrm)
        blocks = [(dF1, self.slot_y)]
        if self.scheme.tangential_dofs:
            kind = self.scheme.kind
            if kind == "pde-equal":
                dF2 = -np.einsum("fqb,fqc,qr,rl,fqri->fbcli", self.tN,
                                 self.tN, self.W, self.T, xth)
            elif kind == "pde-normal":
                dF2 = np.zeros_like(dF1)
            else:
                d = np.asarray(self.scheme.direction, dtype=float)
                dn = np.einsum("i,fqri->fqr", d, nrm)
                dx = np.einsum("i,fqri->fqr", d, xth)
                dF2 = -np.einsum("fqb,fqc,qr,rl,fqr,fqri->fbcli", self.tN,
                                 self.tN, self.W, self.T, dx / dn, nrm)
            blocks.append((dF2, self.slot_x))

        n_v = self.patch.n_v
        rows_all, cols_all, data = [], [], []
        for K, slots in blocks:
            F, B = self.rows.shape
            r = slots[self.rows][:, :, None, None, None]     # (F,B,1,1,1)
            row_c = self.rows[:, None, :, None, None]
            pid_c = row_c * n_v + (n_v - 1)
            level = np.arange(2)[None, None, None, :, None]
            comp = np.arange(2)[None, None, None, None, :]
            col = (2 * level + comp) * self.dofmap.n_points + pid_c
            shape = K.shape
            r_b = np.broadcast_to(r, shape)
            c_b = np.broadcast_to(col, shape)
            keep = r_b >= 0
            rows_all.append(r_b[keep])
            cols_all.append(c_b[keep])
            data.append(K[keep])
        J = sparse.coo_matrix(
            (np.concatenate(data),
             (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(self.dofmap.n_s, self.dofmap.n_flow))
        return J.tocsr()


# ---------------------------------------------------------------------------
# point-based updates
# ---------------------------------------------------------------------------

def polyline_normals(pts: np.ndarray) -> np.ndarray:
    """Face-length weighted averaged unit normals of an open polyline.

    The length-weighted average of adjacent unit face normals reduces to the
    (normalized) perp of the chord between the two neighbors; end points use
    their single face.
    """
    pts = np.asarray(pts, dtype=float)
    chords = np.empty_like(pts)
    chords[1:-1] = pts[2:] - pts[:-2]
    chords[0] = pts[1] - pts[0]
    chords[-1] = pts[-1] - pts[-2]
    n = perp(chords)
    length = np.sqrt((n ** 2).sum(-1, keepdims=True))
    if np.any(length == 0.0):
        raise SingularityError("degenerate surface polyline")
    return n / length


def node_normal_displacement(pts, u_mean, dt, pinned_x=None,
                             move_mask=None) -> np.ndarray:
    """Explicit normal update of surface nodes: (u . n) n dt per node."""
    pts = np.asarray(pts, dtype=float)
    u_mean = np.asarray(u_mean, dtype=float)
    n = polyline_normals(pts)
    d = (u_mean * n).sum(-1, keepdims=True) * n * dt
    return _restrict(d, pts.shape[0], pinned_x, move_mask)


def greville_displacement(kv: KnotVector, ctrl, u_mean, dt, pinned_x=None,
                          move_mask=None) -> np.ndarray:
    """Explicit normal update of surface control points, with each normal
    taken from the current curve at the control point's Greville abscissa."""
    ctrl = np.asarray(ctrl, dtype=float)
    u_mean = np.asarray(u_mean, dtype=float)
    curve = NurbsCurve(kv, ctrl, np.ones(ctrl.shape[0]))
    d = np.empty_like(ctrl)
    for i, theta in enumerate(greville_abscissae(kv)):
        _, n = curve.tangent_normal(theta)
        d[i] = (u_mean[i] @ n) * n * dt
    return _restrict(d, ctrl.shape[0], pinned_x, move_mask)


def _restrict(d, n, pinned_x, move_mask):
    if pinned_x is not None:
        d[np.asarray(pinned_x, dtype=bool), 0] = 0.0
    if move_mask is not None:
        d[~np.asarray(move_mask, dtype=bool)] = 0.0
    return d
