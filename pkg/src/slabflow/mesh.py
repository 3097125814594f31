"""Structured single-patch meshes for both basis kinds, boundary tagging,
quadrature tables, space-time slabs, and the degrees-of-freedom map.

The bilinear Lagrange basis is realized as the degree-1 tensor B-spline basis
(identical functions on a structured grid), so one evaluation path serves both
discretizations. Parametric element coordinates follow the (-1, 1)^2
convention in space; the time fraction of a slab lives on [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, MeshTangledError
from .splines import KnotVector, basis_derivatives, open_uniform_knots

VALID_TAGS = ("free", "fixed", "slip", "inflow", "outflow", "noslip")
SIDES = ("left", "right", "bottom", "top")

# wall-normal Cartesian component of each (axis-aligned) side
SIDE_NORMAL_COMP = {"left": 0, "right": 0, "bottom": 1, "top": 1}


@dataclass(frozen=True)
class BasisKind:
    """Discretization family: 'q1' (bilinear Lagrange) or 'nurbs' with p >= 2."""

    kind: str
    degree: int

    def __post_init__(self):
        if self.kind == "q1":
            if self.degree != 1:
                raise ConfigError("q1 basis has degree 1")
        elif self.kind == "nurbs":
            if self.degree < 2:
                raise ConfigError("nurbs basis requires degree >= 2")
        else:
            raise ConfigError(f"unknown basis kind {self.kind!r}")

    @classmethod
    def q1(cls) -> "BasisKind":
        return cls("q1", 1)

    @classmethod
    def nurbs(cls, degree: int = 2) -> "BasisKind":
        return cls("nurbs", degree)


def _gauss01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _span_tables(kv: KnotVector, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-span basis values and d/dxi derivatives at points given on [-1, 1].

    Returns (vals, ders) of shape (n_spans, len(pts), p+1); derivatives are
    taken with respect to the element coordinate xi, i.e. scaled by the
    half-width of each span.
    """
    spans = kv.spans()
    p = kv.degree
    vals = np.empty((len(spans), pts.size, p + 1))
    ders = np.empty_like(vals)
    for s, (_, lo, hi) in enumerate(spans):
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        for q, xi in enumerate(pts):
            _, d = basis_derivatives(kv, mid + half * xi, 1)
            vals[s, q] = d[0]
            ders[s, q] = d[1] * half
    return vals, ders


class PatchBasis:
    """Immutable tensor-product basis with precomputed quadrature tables."""

    def __init__(self, basis: BasisKind, n_u: int, n_v: int,
                 width: float, height: float, origin=(0.0, 0.0)):
        p = basis.degree
        min_n = p + 1
        if n_u < min_n or n_v < min_n:
            raise ConfigError(
                f"resolution {n_u}x{n_v} below minimum {min_n} for degree {p}")
        self.basis = basis
        self.p = p
        self.n_u, self.n_v = n_u, n_v
        self.n_points = n_u * n_v
        self.width, self.height = float(width), float(height)
        self.origin = (float(origin[0]), float(origin[1]))
        self.kv_u = open_uniform_knots(p, n_u)
        self.kv_v = open_uniform_knots(p, n_v)
        self._build_tables()

    # point gid layout: gid = i * n_v + j  (i along u, j along v)
    def gid(self, i, j):
        return i * self.n_v + j

    def _build_tables(self):
        p = self.p
        nq = p + 1
        xg, wg = np.polynomial.legendre.leggauss(nq)

        nu, du = _span_tables(self.kv_u, xg)
        nv, dv = _span_tables(self.kv_v, xg)
        self.spans_u = self.kv_u.spans()
        self.spans_v = self.kv_v.spans()
        S_u, S_v = len(self.spans_u), len(self.spans_v)
        self.n_el = S_u * S_v
        self.n_loc = (p + 1) ** 2

        # element -> span indices, u-major
        el_su = np.repeat(np.arange(S_u), S_v)
        el_sv = np.tile(np.arange(S_v), S_u)
        self.el_su, self.el_sv = el_su, el_sv

        # connectivity: local index a = au * (p+1) + av
        first_u = np.array([s[0] - p for s in self.spans_u])
        first_v = np.array([s[0] - p for s in self.spans_v])
        au = np.arange(p + 1)
        gi = (first_u[el_su][:, None] + au[None, :])          # (n_el, p+1)
        gj = (first_v[el_sv][:, None] + au[None, :])
        self.conn = (gi[:, :, None] * self.n_v
                     + gj[:, None, :]).reshape(self.n_el, self.n_loc)

        # tensorized basis values / parametric gradients at volume points
        # q2 = qu * nq + qv ; a = au * (p+1) + av
        NU, DU = nu[el_su], du[el_su]       # (n_el, nq, p+1)
        NV, DV = nv[el_sv], dv[el_sv]
        N = np.einsum("equ,erv->equrv", NU, NV)
        Dx = np.einsum("equ,erv->equrv", DU, NV)
        Dy = np.einsum("equ,erv->equrv", NU, DV)
        shape = (self.n_el, nq * nq, self.n_loc)
        self.N = N.transpose(0, 1, 3, 2, 4).reshape(shape)
        self.dN = np.stack([
            Dx.transpose(0, 1, 3, 2, 4).reshape(shape),
            Dy.transpose(0, 1, 3, 2, 4).reshape(shape)], axis=-1)
        self.qw = np.einsum("q,r->qr", wg, wg).reshape(-1)    # sums to 4
        self.nq2 = nq * nq

        # corner derivative tables for Jacobian-ratio quality
        corners = np.array([-1.0, 1.0])
        nuc, duc = _span_tables(self.kv_u, corners)
        nvc, dvc = _span_tables(self.kv_v, corners)
        NUc, DUc = nuc[el_su], duc[el_su]
        NVc, DVc = nvc[el_sv], dvc[el_sv]
        Dxc = np.einsum("equ,erv->equrv", DUc, NVc)
        Dyc = np.einsum("equ,erv->equrv", NUc, DVc)
        cshape = (self.n_el, 4, self.n_loc)
        self.corner_dN = np.stack([
            Dxc.transpose(0, 1, 3, 2, 4).reshape(cshape),
            Dyc.transpose(0, 1, 3, 2, 4).reshape(cshape)], axis=-1)

        # top-edge trace tables (free-surface assembly): one face per u-span
        self.trace_N, self.trace_dN = nu.copy(), du.copy()    # (S_u, nq, p+1)
        self.trace_qw = wg.copy()                             # sums to 2
        self.trace_conn = (first_u[:, None] + au[None, :]) * self.n_v \
            + (self.n_v - 1)                                   # (S_u, p+1)

        # time rule: 2-point Gauss on [0,1]
        self.tq, self.tw = _gauss01(2)

    def uniform_ctrl(self) -> np.ndarray:
        """Uniformly spaced control grid covering the rectangle."""
        x0, y0 = self.origin
        x = x0 + np.linspace(0.0, self.width, self.n_u)
        y = y0 + np.linspace(0.0, self.height, self.n_v)
        ctrl = np.empty((self.n_points, 2))
        ctrl[:, 0] = np.repeat(x, self.n_v)
        ctrl[:, 1] = np.tile(y, self.n_u)
        return ctrl

    def side_pids(self, side: str) -> np.ndarray:
        """Grid point ids whose basis functions are nonzero on a side."""
        i = np.arange(self.n_u)
        j = np.arange(self.n_v)
        if side == "left":
            return self.gid(0, j)
        if side == "right":
            return self.gid(self.n_u - 1, j)
        if side == "bottom":
            return self.gid(i, 0)
        if side == "top":
            return self.gid(i, self.n_v - 1)
        raise DomainError(f"unknown side {side!r}")

    def side_function_faces(self, side: str) -> list[np.ndarray]:
        """For each basis function along a side, the face indices its
        parametric support overlaps (open-interval overlap)."""
        kv = self.kv_u if side in ("bottom", "top") else self.kv_v
        spans = kv.spans()
        p = kv.degree
        out = []
        for i in range(kv.n_basis):
            lo, hi = kv.knots[i], kv.knots[i + p + 1]
            faces = [f for f, (_, a, b) in enumerate(spans)
                     if lo < b and hi > a]
            out.append(np.array(faces, dtype=int))
        return out


@dataclass(eq=False)
class SpatialMesh:
    """A patch basis with current control-point coordinates and boundary tags.

    tags maps each side to a per-face tag array (faces follow the knot spans
    of that side's knot vector).
    """

    patch: PatchBasis
    ctrl: np.ndarray                  # (n_points, 2)
    tags: dict[str, np.ndarray]

    def __post_init__(self):
        self.ctrl = np.asarray(self.ctrl, dtype=float)
        if self.ctrl.shape != (self.patch.n_points, 2):
            raise DomainError("control array shape mismatch")
        norm = {}
        for side in SIDES:
            if side not in self.tags:
                raise ConfigError(f"missing boundary tags for side {side!r}")
            n_faces = len(self.patch.spans_u if side in ("bottom", "top")
                          else self.patch.spans_v)
            t = self.tags[side]
            arr = np.array([t] * n_faces if isinstance(t, str) else list(t),
                           dtype=object)
            if arr.size != n_faces:
                raise ConfigError(f"side {side!r} needs {n_faces} face tags")
            bad = [x for x in arr if x not in VALID_TAGS]
            if bad:
                raise ConfigError(f"unknown boundary tag(s) {bad}")
            norm[side] = arr
        self.tags = norm

    @property
    def basis(self) -> BasisKind:
        return self.patch.basis

    @property
    def n_elements(self) -> int:
        return self.patch.n_el

    def with_ctrl(self, ctrl: np.ndarray) -> "SpatialMesh":
        m = SpatialMesh.__new__(SpatialMesh)
        m.patch = self.patch
        m.ctrl = np.asarray(ctrl, dtype=float)
        m.tags = self.tags
        return m

    def gather(self, arr: np.ndarray) -> np.ndarray:
        """Element-local view of a per-point array: (n_el, n_loc, ...)."""
        return arr[self.patch.conn]

    def jacobians(self) -> tuple[np.ndarray, np.ndarray]:
        """Spatial Jacobians at all volume quadrature points.

        Returns (J, detJ) with J of shape (n_el, nq2, 2, 2).
        """
        X = self.gather(self.ctrl)                       # (n_el, n_loc, 2)
        J = np.einsum("eqad,eac->eqcd", self.patch.dN, X)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        return J, det

    def area(self) -> float:
        _, det = self.jacobians()
        return float(np.einsum("eq,q->", det, self.patch.qw))

    def element_sizes(self) -> np.ndarray:
        """Element diameter proxy: sqrt of element area."""
        _, det = self.jacobians()
        return np.sqrt(np.abs(det @ self.patch.qw))

    def corner_jacobian_ratios(self) -> np.ndarray:
        """Per-element min/max ratio of corner Jacobian determinants;
        0 where any corner determinant is nonpositive."""
        X = self.gather(self.ctrl)
        J = np.einsum("ecad,eab->ecbd", self.patch.corner_dN, X)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        lo, hi = det.min(axis=1), det.max(axis=1)
        ratio = np.where(lo <= 0.0, 0.0, lo / np.where(hi > 0, hi, 1.0))
        return ratio

    def corner_gid(self, which: str) -> int:
        i = self.patch.n_u - 1 if "right" in which else 0
        j = self.patch.n_v - 1 if "upper" in which or "top" in which else 0
        return self.patch.gid(i, j)

    def top_row_pids(self) -> np.ndarray:
        return self.patch.side_pids("top")

    def surface_curve_ctrl(self) -> np.ndarray:
        """Control points of the top boundary curve (the trace row)."""
        return self.ctrl[self.top_row_pids()]


def build_mesh(width: float, height: float, n_u: int, n_v: int,
               basis: BasisKind, tags, origin=(0.0, 0.0)) -> SpatialMesh:
    """Uniform structured mesh of a rectangle with boundary tags.

    tags: mapping side -> tag string or per-face tag sequence.
    """
    patch = PatchBasis(basis, n_u, n_v, width, height, origin)
    return SpatialMesh(patch, patch.uniform_ctrl(), dict(tags))


# ---------------------------------------------------------------------------
# space-time slabs
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SpaceTimeSlab:
    """Space-time slab between two time levels of a deforming mesh."""

    lower: SpatialMesh
    upper: SpatialMesh
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise DomainError("slab interval length must be positive")

    @property
    def t1(self) -> float:
        return self.t0 + self.dt


def build_slab(prev: SpatialMesh, dt: float, t0: float = 0.0) -> SpaceTimeSlab:
    """New slab with the upper configuration initialized to the lower one."""
    return SpaceTimeSlab(prev, prev.with_ctrl(prev.ctrl.copy()), dt, t0)


def geometry_map(slab: SpaceTimeSlab, element: int, xi: float, eta: float,
                 tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Physical point, spatial Jacobian and mesh velocity at one space-time
    parametric point of an element. tau is the time fraction in [0, 1]."""
    patch = slab.lower.patch
    if not (0.0 <= tau <= 1.0):
        raise DomainError("time fraction outside [0, 1]")
    if not (0 <= element < patch.n_el):
        raise DomainError("element index out of range")
    p = patch.p
    su = patch.spans_u[patch.el_su[element]]
    sv = patch.spans_v[patch.el_sv[element]]
    th_u = 0.5 * (su[1] + su[2]) + 0.5 * (su[2] - su[1]) * xi
    th_v = 0.5 * (sv[1] + sv[2]) + 0.5 * (sv[2] - sv[1]) * eta
    _, du = basis_derivatives(patch.kv_u, th_u, 1)
    _, dv = basis_derivatives(patch.kv_v, th_v, 1)
    nu_v, du_v = du[0], du[1] * 0.5 * (su[2] - su[1])
    nv_v, dv_v = dv[0], dv[1] * 0.5 * (sv[2] - sv[1])

    N = np.einsum("u,v->uv", nu_v, nv_v).reshape(-1)
    dN = np.stack([
        np.einsum("u,v->uv", du_v, nv_v).reshape(-1),
        np.einsum("u,v->uv", nu_v, dv_v).reshape(-1)], axis=-1)

    conn = patch.conn[element]
    Xl = slab.lower.ctrl[conn]
    Xu = slab.upper.ctrl[conn]
    X = (1.0 - tau) * Xl + tau * Xu
    x = N @ X
    J = np.einsum("ad,ac->cd", dN, X)
    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    if det <= 0.0:
        raise MeshTangledError(
            f"nonpositive Jacobian in element {element}", time=slab.t0)
    v = N @ (Xu - Xl) / slab.dt
    return x, J, v


# ---------------------------------------------------------------------------
# degrees-of-freedom map
# ---------------------------------------------------------------------------

SCHEME_POINT = ("node-normal", "greville")
SCHEME_PDE = ("pde-equal", "pde-normal", "pde-directional")


@dataclass(eq=False)
class DofMap:
    """Global index layout for one slab's unknown vector.

    Layout: [u_x lower | u_y lower | u_x upper | u_y upper | p lower |
    p upper | surface displacement dofs | interior mesh dofs (monolithic)].
    Dirichlet constraints are kept in the system as identity rows; the mask
    and value arrays cover the flow block.
    """

    mesh: SpatialMesh
    scheme: str
    tangential_dofs: bool            # surface x-components are unknowns
    monolithic: bool = False

    def __post_init__(self):
        patch = self.mesh.patch
        N = patch.n_points
        self.n_points = N
        self.n_flow = 6 * N
        self.dirichlet_mask = np.zeros(self.n_flow, dtype=bool)
        self.dirichlet_values = np.zeros(self.n_flow)
        self.cache = {}      # assembler scratch reusable across slabs

        self._classify_surface()
        self.n_s = len(self.surface_dofs)

        # interior mesh-displacement dofs for the monolithic strategy:
        # every point that is not surface-Dirichlet, both components, minus
        # slip/fixed wall constraints (handled by the elasticity module's
        # constraint arrays; stored here as index bookkeeping only)
        if self.monolithic:
            from .elasticity import mesh_bc_arrays
            fixed_mask, _, free_idx = mesh_bc_arrays(
                self.mesh, self.surface_pids)
            self.z_dofs = free_idx
        else:
            self.z_dofs = np.empty(0, dtype=int)
        self.n_z = len(self.z_dofs)
        self.n_total = self.n_flow + self.n_s + self.n_z

    def _classify_surface(self):
        """Free-surface points, their pinned components and equation counts."""
        patch = self.mesh.patch
        top_tags = self.mesh.tags["top"]
        func_faces = patch.side_function_faces("top")
        strong = ("noslip", "inflow", "fixed")
        surface_pids = []
        pinned_x = []
        top = patch.side_pids("top")
        for i, faces in enumerate(func_faces):
            face_tags = {top_tags[f] for f in faces}
            if not face_tags & {"free"}:
                continue
            if face_tags & set(strong):
                continue  # wall support wins: point stays put
            pid = top[i]
            surface_pids.append(pid)
            side_tag = None
            if i == 0:
                side_tag = self.mesh.tags["left"][0]
            elif i == patch.n_u - 1:
                side_tag = self.mesh.tags["right"][0]
            pinned_x.append(side_tag in ("slip", "outflow", "noslip",
                                         "inflow", "fixed"))
        self.surface_pids = np.array(surface_pids, dtype=int)
        self.surface_pinned_x = np.array(pinned_x, dtype=bool)

        dofs = []
        for k, pid in enumerate(self.surface_pids):
            if self.tangential_dofs and not self.surface_pinned_x[k]:
                dofs.append((pid, 0))
            dofs.append((pid, 1))
        self.surface_dofs = dofs

    # --- index helpers ---------------------------------------------------

    def iu(self, level: int, comp: int, pid) -> np.ndarray:
        return (2 * level + comp) * self.n_points + pid

    def ip(self, level: int, pid) -> np.ndarray:
        return 4 * self.n_points + level * self.n_points + pid

    def i_s(self, k) -> np.ndarray:
        return self.n_flow + k

    def i_z(self, k) -> np.ndarray:
        return self.n_flow + self.n_s + k

    def set_dirichlet(self, idx, values):
        self.dirichlet_mask[idx] = True
        self.dirichlet_values[idx] = values

    def unconstrained_indices(self) -> np.ndarray:
        free_flow = np.nonzero(~self.dirichlet_mask)[0]
        rest = np.arange(self.n_flow, self.n_total)
        return np.concatenate([free_flow, rest])
