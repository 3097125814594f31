"""Space-time assembly of the incompressible flow equations on one slab.

Velocity and pressure are interpolated linearly in time between the slab's
lower and upper levels; test functions use the same space, and the weak form
carries a jump term that ties the lower level to the previous slab's upper
velocity. The time derivative is taken at fixed element coordinates, so the
mesh motion enters only through the advective velocity u - v.

Stabilization (SUPG / PSPG / grad-div) is evaluated with parameters frozen
per slab from the previous velocity and the lower configuration, which keeps
the residual an exact polynomial in the unknowns: both the velocity-pressure
Jacobian and the geometry Jacobian below are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from .errors import ConfigError, MeshTangledError
from .mesh import SIDE_NORMAL_COMP, SIDES, DofMap, SpaceTimeSlab


@dataclass(frozen=True)
class FluidProps:
    """Material constants and model switches for the flow problem."""

    rho: float
    mu: float
    body_force: tuple[float, float] = (0.0, 0.0)
    include_advection: bool = True
    supg_scale: float = 1.0
    lsic_scale: float = 1.0

    def __post_init__(self):
        if self.rho <= 0.0:
            raise ConfigError("density must be positive")
        if self.mu <= 0.0:
            raise ConfigError("viscosity must be positive")

    @property
    def nu(self) -> float:
        return self.mu / self.rho


_BC_RANK = {"free": 0, "outflow": 0, "slip": 1, "inflow": 2,
            "noslip": 3, "fixed": 3}


class _CsrPattern:
    """Sparsity pattern with a fixed entry layout, reused across assemblies.

    Duplicate (row, col) pairs are merged once up front; build() then only
    sums values into their slots, which is far cheaper than letting scipy
    sort a fresh COO matrix every Newton iteration.
    """

    def __init__(self, rows, cols, shape, keep=None, diag=None):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        self.keep = keep
        self.n_diag = 0 if diag is None else diag.size
        if self.n_diag:
            rows = np.concatenate([rows, diag])
            cols = np.concatenate([cols, diag])
        key = rows * shape[1] + cols
        uniq, self.slots = np.unique(key, return_inverse=True)
        self.nnz = uniq.size
        self.indices = (uniq % shape[1]).astype(np.int32)
        self.indptr = np.searchsorted(uniq // shape[1],
                                      np.arange(shape[0] + 1)).astype(np.int32)
        self.shape = shape

    def build(self, data) -> sparse.csr_matrix:
        if self.keep is not None:
            data = data * self.keep
        if self.n_diag:
            data = np.concatenate([data, np.ones(self.n_diag)])
        vals = np.bincount(self.slots, weights=data, minlength=self.nnz)
        return sparse.csr_matrix((vals, self.indices, self.indptr),
                                 shape=self.shape)


def apply_velocity_bcs(dofmap: DofMap, inflow_profile=None) -> None:
    """Mark Dirichlet velocity dofs on the dof map from the boundary tags.

    A boundary basis function is constrained by the strongest tag among the
    faces its trace touches: noslip/fixed pin both components to zero, inflow
    prescribes the profile evaluated at the control position, slip pins the
    wall-normal component. Both time levels get the same values.
    """
    mesh = dofmap.mesh
    patch = mesh.patch
    n = patch.n_points
    rank = np.zeros((n, 2), dtype=int)
    value = np.zeros((n, 2))

    def propose(pid, comp, r, val):
        if rank[pid, comp] < r:
            rank[pid, comp] = r
            value[pid, comp] = val

    for side in SIDES:
        tags = mesh.tags[side]
        pids = patch.side_pids(side)
        comp_n = SIDE_NORMAL_COMP[side]
        for i, faces in enumerate(patch.side_function_faces(side)):
            face_tags = {tags[f] for f in faces}
            pid = pids[i]
            if face_tags & {"noslip", "fixed"}:
                propose(pid, 0, 3, 0.0)
                propose(pid, 1, 3, 0.0)
            elif "inflow" in face_tags:
                if inflow_profile is None:
                    raise ConfigError("inflow boundary requires a profile")
                ux, uy = inflow_profile(mesh.ctrl[pid])
                propose(pid, 0, 2, ux)
                propose(pid, 1, 2, uy)
            elif "slip" in face_tags:
                propose(pid, comp_n, 1, 0.0)

    for pid, comp in zip(*np.nonzero(rank > 0)):
        val = value[pid, comp]
        for level in (0, 1):
            dofmap.set_dirichlet(dofmap.iu(level, comp, pid), val)


class FlowAssembler:
    """Residual and Jacobian of the flow block on one space-time slab.

    The state is split into the flow vector (velocities and pressures at both
    levels, laid out by the dof map) and the upper control-point positions;
    the lower configuration is frozen at construction.
    """

    def __init__(self, slab: SpaceTimeSlab, dofmap: DofMap, props: FluidProps,
                 u_prev: np.ndarray):
        self.slab = slab
        self.dofmap = dofmap
        self.props = props
        mesh = slab.lower
        patch = mesh.patch
        self.patch = patch
        self.n_pts = patch.n_points
        self.conn = patch.conn
        self.dt = slab.dt

        tq = patch.tq
        self.T = np.stack([1.0 - tq, tq], axis=1)        # (R, level)
        self.Td = np.array([-1.0, 1.0]) / slab.dt
        self.wt = patch.tw * slab.dt

        self.u_prev = np.asarray(u_prev, dtype=float).reshape(self.n_pts, 2)
        self.uprev_loc = self.u_prev[self.conn]
        self.XL_loc = mesh.ctrl[self.conn]

        # frozen lower-configuration data: jump mass matrix, element size,
        # stabilization parameters from the previous velocity
        _, det0 = mesh.jacobians()
        if np.any(det0 <= 0.0):
            raise MeshTangledError("tangled lower configuration", time=slab.t0)
        w0 = det0 * patch.qw[None, :]
        self.M0 = props.rho * np.einsum("eq,eqa,eqb->eab", w0,
                                        patch.N, patch.N)
        vol = det0 @ patch.qw
        self.h_e = np.sqrt(vol)
        uq = np.einsum("eqa,eai->eqi", patch.N, self.uprev_loc)
        speed = np.sqrt((uq ** 2).sum(-1)).mean(axis=1)
        inv2 = ((2.0 / slab.dt) ** 2 + (2.0 * speed / self.h_e) ** 2
                + (4.0 * props.nu / self.h_e ** 2) ** 2)
        self.tau_supg = props.supg_scale / np.sqrt(inv2)
        self.tau_pspg = self.tau_supg / props.rho
        self.nu_lsic = props.lsic_scale * self.h_e ** 2 / (4.0 * self.tau_supg)

        n_el, n_loc = self.conn.shape
        self.idx_u = np.empty((n_el, n_loc, 2, 2), dtype=np.int64)
        self.idx_p = np.empty((n_el, n_loc, 2), dtype=np.int64)
        for level in (0, 1):
            for comp in (0, 1):
                self.idx_u[:, :, level, comp] = \
                    (2 * level + comp) * self.n_pts + self.conn
            self.idx_p[:, :, level] = (4 + level) * self.n_pts + self.conn

    # --- state handling ----------------------------------------------------

    def split(self, x_flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flow vector -> (U[level, comp, pid], P[level, pid]) views."""
        n = self.n_pts
        return (x_flow[: 4 * n].reshape(2, 2, n),
                x_flow[4 * n: 6 * n].reshape(2, n))

    def _local_state(self, x_flow):
        U, P = self.split(x_flow)
        U_loc = U[:, :, self.conn].transpose(2, 3, 0, 1)   # (e, a, level, i)
        P_loc = P[:, self.conn].transpose(1, 2, 0)         # (e, a, level)
        return U_loc, P_loc

    # --- quadrature-point fields -------------------------------------------

    def _fields(self, U_loc, P_loc, XU_loc):
        patch = self.patch
        Nt, dN = patch.N, patch.dN
        T, Td = self.T, self.Td
        tq = patch.tq
        XL_loc = self.XL_loc

        X_r = ((1.0 - tq)[None, :, None, None] * XL_loc[:, None]
               + tq[None, :, None, None] * XU_loc[:, None])    # (e, r, a, 2)
        J = np.einsum("eqad,erai->eqrid", dN, X_r)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        if np.any(det <= 0.0):
            raise MeshTangledError("slab geometry tangled", time=self.slab.t0)
        inv_det = 1.0 / det
        Minv = np.empty_like(J)                       # (e,q,r,d,i) = dxi_d/dx_i
        Minv[..., 0, 0] = J[..., 1, 1] * inv_det
        Minv[..., 0, 1] = -J[..., 0, 1] * inv_det
        Minv[..., 1, 0] = -J[..., 1, 0] * inv_det
        Minv[..., 1, 1] = J[..., 0, 0] * inv_det
        G = np.einsum("eqad,eqrdi->eqrai", dN, Minv)

        v = np.einsum("eqa,eai->eqi", Nt, XU_loc - XL_loc) / self.dt
        u = np.einsum("eqa,rl,eali->eqri", Nt, T, U_loc, optimize=True)
        ut = np.einsum("eqa,l,eali->eqi", Nt, Td, U_loc)
        gradu = np.einsum("eqraj,rl,eali->eqrij", G, T, U_loc, optimize=True)
        p = np.einsum("eqa,rl,eal->eqr", Nt, T, P_loc, optimize=True)
        gradp = np.einsum("eqrai,rl,eal->eqri", G, T, P_loc, optimize=True)

        if self.props.include_advection:
            c = u - v[:, :, None, :]
        else:
            c = np.broadcast_to(-v[:, :, None, :], u.shape)

        f = np.asarray(self.props.body_force)
        rho = self.props.rho
        conv = np.einsum("eqrj,eqrij->eqri", c, gradu)
        momentum = rho * (ut[:, :, None, :] + conv - f[None, None, None, :])
        Rs = momentum + gradp
        divu = gradu[..., 0, 0] + gradu[..., 1, 1]
        w = det * (patch.qw[None, :, None] * self.wt[None, None, :])
        cG = np.einsum("eqrj,eqraj->eqra", c, G)
        # advective space-time operator applied to each test/trial function
        Pm = (Nt[:, :, None, :, None] * Td[None, None, None, None, :]
              + cG[..., None] * T[None, None, :, None, :])    # (e,q,r,a,l)
        return {"G": G, "w": w, "u": u, "gradu": gradu, "p": p,
                "gradp": gradp, "c": c, "Rs": Rs, "galerkin": momentum,
                "divu": divu, "cG": cG, "Pm": Pm}

    # --- element residual ---------------------------------------------------

    def _element_residuals(self, U_loc, P_loc, XU_loc, fields=None):
        """Per-element residual blocks (Rm[e,a,level,i], Rc[e,a,level]),
        without the temporal jump term (it has no geometry dependence)."""
        F = fields or self._fields(U_loc, P_loc, XU_loc)
        Nt = self.patch.N
        tau_supg, tau_pspg = self.tau_supg, self.tau_pspg
        nu_lsic = self.nu_lsic
        T = self.T
        G, w = F["G"], F["w"]
        mu, rho = self.props.mu, self.props.rho
        sym = F["gradu"] + np.swapaxes(F["gradu"], -1, -2)

        Rm = np.einsum("eqr,eqa,rl,eqri->eali", w, Nt, T, F["galerkin"],
                       optimize=True)
        Rm += mu * np.einsum("eqr,rl,eqraj,eqrij->eali", w, T, G, sym,
                             optimize=True)
        Rm -= np.einsum("eqr,rl,eqrai,eqr->eali", w, T, G, F["p"],
                        optimize=True)
        Rm += np.einsum("e,eqr,eqral,eqri->eali",
                        tau_supg, w, F["Pm"], F["Rs"], optimize=True)
        Rm += rho * np.einsum("e,eqr,rl,eqrai,eqr->eali",
                              nu_lsic, w, T, G, F["divu"], optimize=True)

        Rc = np.einsum("eqr,eqa,rl,eqr->eal", w, Nt, T, F["divu"],
                       optimize=True)
        Rc += np.einsum("e,eqr,rl,eqrai,eqri->eal",
                        tau_pspg, w, T, G, F["Rs"], optimize=True)
        return Rm, Rc

    def _jump(self, U_loc):
        return np.einsum("eab,ebi->eai", self.M0,
                         U_loc[:, :, 0, :] - self.uprev_loc)

    # --- public assembly ----------------------------------------------------

    def residual(self, x_flow: np.ndarray, upper_ctrl: np.ndarray) -> np.ndarray:
        U_loc, P_loc = self._local_state(x_flow)
        XU_loc = upper_ctrl[self.conn]
        Rm, Rc = self._element_residuals(U_loc, P_loc, XU_loc)
        Rm[:, :, 0, :] += self._jump(U_loc)

        R = np.zeros(self.dofmap.n_flow)
        np.add.at(R, self.idx_u.ravel(), Rm.ravel())
        np.add.at(R, self.idx_p.ravel(), Rc.ravel())
        mask = self.dofmap.dirichlet_mask
        R[mask] = x_flow[mask] - self.dofmap.dirichlet_values[mask]
        return R

    def linearize(self, x_flow: np.ndarray, upper_ctrl: np.ndarray,
                  need_geometry: bool = False):
        """Residual, flow Jacobian (csr), and optionally the Jacobian with
        respect to the upper control coordinates (csr, columns 2*pid+comp)."""
        U_loc, P_loc = self._local_state(x_flow)
        XU_loc = upper_ctrl[self.conn]
        F = self._fields(U_loc, P_loc, XU_loc)
        Rm, Rc = self._element_residuals(U_loc, P_loc, XU_loc, fields=F)
        G_geo = self._geometry_jacobian(F) if need_geometry else None
        Rm[:, :, 0, :] += self._jump(U_loc)
        R = np.zeros(self.dofmap.n_flow)
        np.add.at(R, self.idx_u.ravel(), Rm.ravel())
        np.add.at(R, self.idx_p.ravel(), Rc.ravel())
        mask = self.dofmap.dirichlet_mask
        R[mask] = x_flow[mask] - self.dofmap.dirichlet_values[mask]

        J = self._flow_jacobian(F)
        return R, J, G_geo

    def _flow_jacobian(self, F) -> sparse.csr_matrix:
        """Analytic velocity-pressure Jacobian, contracted over the flattened
        quadrature axis with batched matmuls like the geometry Jacobian."""
        patch = self.patch
        n_loc = self.conn.shape[1]
        E, Q, R = F["w"].shape
        ns = Q * R

        def flat(A):
            return np.ascontiguousarray(A).reshape((E, ns) + A.shape[3:])

        w, G, Pm = flat(F["w"]), flat(F["G"]), flat(F["Pm"])
        gradu, Rs = flat(F["gradu"]), flat(F["Rs"])
        mu, rho = self.props.mu, self.props.rho
        adv = self.props.include_advection
        Ts = np.tile(self.T, (Q, 1))
        Ns = np.repeat(patch.N, R, axis=1)
        wts = self.tau_supg[:, None] * w
        wtp = self.tau_pspg[:, None] * w
        wnl = self.nu_lsic[:, None] * w

        def bmm(A, B):
            a = A.reshape(E, ns, -1).transpose(0, 2, 1)
            return np.matmul(a, B.reshape(E, ns, -1))

        NT = np.einsum("esb,sm->esbm", Ns, Ts)
        wNT = w[..., None, None] * NT
        GT = np.einsum("esbi,sm->esbim", G, Ts)       # trial-side G column
        GaGb = np.einsum("esad,esbd->esab", G, G)

        # strong momentum derivative dRs/dU = rho * (Pm_bm delta_ij
        # + adv * N_b T_m gradu_ij), applied to the Galerkin and SUPG rows
        rowA = wNT + wts[..., None, None] * Pm
        Kmm = np.zeros((E, n_loc, 2, 2, n_loc, 2, 2))
        Kd = rho * bmm(rowA, Pm).reshape(E, n_loc, 2, n_loc, 2)
        V2 = np.einsum("es,sl,sm->eslm", w, Ts, Ts)
        Kd += mu * bmm(GaGb, V2).reshape(E, n_loc, n_loc, 2,
                                         2).transpose(0, 1, 3, 2, 4)
        for i in (0, 1):
            Kmm[:, :, :, i, :, :, i] += Kd
        if adv:
            for i in (0, 1):
                for j in (0, 1):
                    col = NT * gradu[:, :, None, None, i, j]
                    Kmm[:, :, :, i, :, :, j] += rho * bmm(rowA, col).reshape(
                        E, n_loc, 2, n_loc, 2)
            row4 = np.einsum("es,esaj,sl,esi->esajli", wts, G, Ts, Rs)
            Kmm += bmm(row4, NT).reshape(E, n_loc, 2, 2, 2, n_loc,
                                         2).transpose(0, 1, 3, 4, 5, 6, 2)
        row3 = np.einsum("es,sl,esaj->esalj", w, Ts, G)
        Kmm += mu * bmm(row3, GT).reshape(E, n_loc, 2, 2, n_loc, 2,
                                          2).transpose(0, 1, 2, 5, 4, 6, 3)
        row6 = rho * np.einsum("es,sl,esai->esali", wnl, Ts, G)
        Kmm += bmm(row6, GT).reshape(E, n_loc, 2, 2, n_loc, 2,
                                     2).transpose(0, 1, 2, 3, 4, 6, 5)
        for i in (0, 1):
            Kmm[:, :, 0, i, :, 0, i] += self.M0

        row7 = np.einsum("es,sl,esai->esali", w, Ts, G)
        Kmp = -bmm(row7, NT).reshape(E, n_loc, 2, 2, n_loc, 2)
        Kmp += bmm(wts[..., None, None] * Pm, GT).reshape(
            E, n_loc, 2, n_loc, 2, 2).transpose(0, 1, 2, 4, 3, 5)

        Kcm = bmm(wNT, GT).reshape(E, n_loc, 2, n_loc, 2,
                                   2).transpose(0, 1, 2, 3, 5, 4)
        row10 = rho * np.einsum("es,sl,esaj->esalj", wtp, Ts, G)
        out = bmm(row10, Pm)
        if adv:
            Ggu3 = np.einsum("esai,esij->esaj", G, gradu)
            row10a = rho * np.einsum("es,sl,esaj->esalj", wtp, Ts, Ggu3)
            out += bmm(row10a, NT)
        Kcm += out.reshape(E, n_loc, 2, 2, n_loc,
                           2).transpose(0, 1, 2, 4, 5, 3)

        Vp = np.einsum("es,sl,sm->eslm", wtp, Ts, Ts)
        Kcp = bmm(GaGb, Vp).reshape(E, n_loc, n_loc, 2,
                                    2).transpose(0, 1, 3, 2, 4)

        data = np.concatenate([Kmm.ravel(), Kmp.ravel(),
                               Kcm.ravel(), Kcp.ravel()])
        pat = self.dofmap.cache.get("flow_jacobian_pattern")
        if pat is None:
            iu, ip_ = self.idx_u, self.idx_p
            blocks = [
                (Kmm.shape, iu[:, :, :, :, None, None, None],
                 iu[:, None, None, None]),
                (Kmp.shape, iu[:, :, :, :, None, None],
                 ip_[:, None, None, None]),
                (Kcm.shape, ip_[:, :, :, None, None, None],
                 iu[:, None, None]),
                (Kcp.shape, ip_[:, :, :, None, None], ip_[:, None, None]),
            ]
            rows = np.concatenate([np.broadcast_to(r, s).ravel()
                                   for s, r, _ in blocks])
            cols = np.concatenate([np.broadcast_to(c, s).ravel()
                                   for s, _, c in blocks])
            mask = self.dofmap.dirichlet_mask
            n = self.dofmap.n_flow
            pat = _CsrPattern(rows, cols, (n, n), keep=~mask[rows],
                              diag=np.nonzero(mask)[0])
            self.dofmap.cache["flow_jacobian_pattern"] = pat
        return pat.build(data)

    def _geometry_jacobian(self, F) -> sparse.csr_matrix:
        """Exact derivative of the flow residual w.r.t. the upper control
        coordinates; the jump term has no geometry dependence.

        Geometry enters through the space-time Jacobian determinant, the
        physical gradients, and the mesh velocity. At fixed element
        coordinates each has a closed form in the control coordinate
        X[b, m], linear in the time fraction tau:

            d(w)/dX       =  w * tau * G[b, m]
            d(G[a, i])/dX = -tau * G[a, m] * G[b, i]
            d(v[i])/dX    =  N_b * delta_im / dt

        Terms are grouped by their trial-side factor and contracted over the
        flattened quadrature axis with batched matmuls; that is several times
        faster than one einsum per term.
        """
        patch = self.patch
        n_el, n_loc = self.conn.shape
        E, Q, R = F["w"].shape
        ns = Q * R

        def flat(A):
            return np.ascontiguousarray(A).reshape((E, ns) + A.shape[3:])

        w, G, Pm = flat(F["w"]), flat(F["G"]), flat(F["Pm"])
        gradu, gradp, p = flat(F["gradu"]), flat(F["gradp"]), flat(F["p"])
        Rs, gal = flat(F["Rs"]), flat(F["galerkin"])
        divu, cG = flat(F["divu"]), flat(F["cG"])
        mu, rho, dt = self.props.mu, self.props.rho, self.dt
        Ts = np.tile(self.T, (Q, 1))                   # (s, level)
        tqs = np.tile(patch.tq, Q)
        Ns = np.repeat(patch.N, R, axis=1)             # (e, s, a)
        wts = self.tau_supg[:, None] * w
        wtp = self.tau_pspg[:, None] * w
        wnl = self.nu_lsic[:, None] * w

        tG = tqs[None, :, None, None] * G              # (e,s,b,m)
        # d(c[j])/dX = -N_b delta_jm / dt, so the advective derivative of a
        # quantity with gradient g is -S[b] * g[m] for both model variants
        S = Ns / dt + tqs[None, :, None] * cG          # (e,s,b)
        sym = gradu + np.swapaxes(gradu, -1, -2)
        wNT = np.einsum("es,esa,sl->esal", w, Ns, Ts)
        Gsym = np.einsum("esaj,esij->esai", G, sym)
        Ggu = np.einsum("esaj,esjm->esam", G, gradu)
        GtG = np.einsum("esaj,esbj->esab", G, tG)
        gG = np.einsum("esbj,esjm->esbm", tG, gradu)
        GRs = np.einsum("esai,esi->esa", G, Rs)
        tGRs = np.einsum("esbi,esi->esb", tG, Rs)
        tGsym = np.einsum("esbj,esij->esbi", tG, sym)

        def bmm(A, B):
            a = A.reshape(E, ns, -1).transpose(0, 2, 1)
            return np.matmul(a, B.reshape(E, ns, -1))

        shp6 = (E, n_loc, 2, 2, n_loc, 2)

        # columns tau*G[b,m]: the full weighted integrand (determinant part)
        A1 = np.einsum("esal,esi->esali", wNT, gal)
        A1 += mu * np.einsum("es,sl,esai->esali", w, Ts, Gsym)
        A1 -= np.einsum("es,sl,esai->esali", w * p, Ts, G)
        A1 += np.einsum("es,esal,esi->esali", wts, Pm, Rs)
        A1 += rho * np.einsum("es,sl,esai->esali", wnl * divu, Ts, G)
        Km = bmm(A1, tG).reshape(shp6)

        # columns S[b]: every advective-velocity derivative
        A2 = rho * np.einsum("esal,esim->esalim",
                             wNT + wts[..., None, None] * Pm, gradu)
        A2 += np.einsum("es,sl,esam,esi->esalim", wts, Ts, G, Rs)
        Km -= bmm(A2, S).reshape(E, n_loc, 2, 2, 2,
                                 n_loc).transpose(0, 1, 2, 3, 5, 4)

        # columns tau*G[b,i] (and its viscous-flux contraction)
        A3 = np.einsum("es,sl,esam->esalm", w * p, Ts, G)
        A3 -= rho * np.einsum("es,sl,esam->esalm", wnl * divu, Ts, G)
        A3 -= np.einsum("es,esal,esm->esalm", wts, Pm, gradp)
        A3 -= mu * np.einsum("es,sl,esam->esalm", w, Ts, Ggu)
        A4 = -mu * np.einsum("es,sl,esam->esalm", w, Ts, G)
        out = bmm(A3, tG) + bmm(A4, tGsym)
        Km += out.reshape(E, n_loc, 2, 2, n_loc, 2).transpose(0, 1, 2, 5,
                                                              4, 3)

        # pair coupling G[a,j] tau*G[b,j] from the viscous gradient
        V5 = np.einsum("es,sl,esim->eslim", w, Ts, gradu)
        Km -= mu * bmm(GtG, V5).reshape(E, n_loc, n_loc, 2, 2,
                                        2).transpose(0, 1, 3, 4, 2, 5)

        # columns gG[b,m] from the divergence derivative in grad-div
        A6 = rho * np.einsum("es,sl,esai->esali", wnl, Ts, G)
        Km -= bmm(A6, gG).reshape(shp6)

        shp5 = (E, n_loc, 2, n_loc, 2)
        Ac1 = np.einsum("esal,es->esal", wNT, divu)
        Ac1 += np.einsum("es,sl,esa->esal", wtp, Ts, GRs)
        Kc = bmm(Ac1, tG).reshape(shp5)
        Kc -= bmm(wNT, gG).reshape(shp5)
        Ac2 = rho * np.einsum("es,sl,esam->esalm", wtp, Ts, Ggu)
        Ac3 = np.einsum("es,sl,esam->esalm", wtp, Ts, G)
        out = bmm(Ac2, S) + bmm(Ac3, tGRs)
        Kc -= out.reshape(E, n_loc, 2, 2, n_loc).transpose(0, 1, 2, 4, 3)
        Vc5 = np.einsum("es,sl,esm->eslm", wtp, Ts, gradp)
        Kc -= bmm(GtG, Vc5).reshape(E, n_loc, n_loc, 2,
                                    2).transpose(0, 1, 3, 2, 4)

        data = np.concatenate([Km.ravel(), Kc.ravel()])
        pat = self.dofmap.cache.get("geometry_jacobian_pattern")
        if pat is None:
            colmat = 2 * self.conn[:, :, None] + np.arange(2)   # (e, b, m)
            iu, ip_ = self.idx_u, self.idx_p
            rows = np.concatenate([
                np.broadcast_to(iu[..., None, None], Km.shape).ravel(),
                np.broadcast_to(ip_[..., None, None], Kc.shape).ravel()])
            cols = np.concatenate([
                np.broadcast_to(colmat[:, None, None, None],
                                Km.shape).ravel(),
                np.broadcast_to(colmat[:, None, None], Kc.shape).ravel()])
            pat = _CsrPattern(rows, cols,
                              (self.dofmap.n_flow, 2 * self.n_pts),
                              keep=~self.dofmap.dirichlet_mask[rows])
            self.dofmap.cache["geometry_jacobian_pattern"] = pat
        return pat.build(data)
