"""Per-slab coupled Newton solves and time-slab marching."""

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .diagnostics import (RunRecord, SurfaceSlabState, compute_mass,
                          flux_error, mesh_quality)
from .elasticity import EmumOperator, MeshElasticityProps
from .errors import ConfigError, MeshTangledError, NewtonDivergedError
from .flow import FlowAssembler, FluidProps, apply_velocity_bcs
from .mesh import DofMap, SpatialMesh, build_slab
from .surface import (DisplacementScheme, SurfaceAssembler,
                      greville_displacement, node_normal_displacement)

COUPLINGS = ("surface-monolithic", "monolithic", "staggered")


@dataclass(frozen=True)
class NewtonSettings:
    # tight enough that the per-slab surface-equation residual, which is
    # what bounds the mass drift, stays near round-off over hundreds of slabs
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_iter: int = 25
    max_backtracks: int = 8

    def __post_init__(self):
        if self.abs_tol <= 0.0 or self.rel_tol <= 0.0:
            raise ConfigError("Newton tolerances must be positive")
        if self.max_iter < 1:
            raise ConfigError("Newton needs at least one iteration")


@dataclass
class SlabReport:
    t1: float
    iterations: int
    residual: float


class _SurfaceGeometry:
    """Upper-level control coordinates as a function of the surface motion.

    The interior follows the surface through the elastic mesh update solved
    on the (known) lower-level configuration, so the map is affine in s and
    its sensitivity is one influence matrix per slab.
    """

    def __init__(self, mesh: SpatialMesh, surface_pids, props):
        self.op = EmumOperator(mesh, props, surface_pids)
        top = mesh.patch.side_pids("top")
        self.rows = np.nonzero(np.isin(top, surface_pids))[0]
        self.pids = top[self.rows]
        self.base = mesh.ctrl
        self.n = mesh.patch.n_points

    def _zd(self, s_full):
        zd = np.zeros(2 * self.n)
        zd[2 * self.pids] = s_full[self.rows, 0]
        zd[2 * self.pids + 1] = s_full[self.rows, 1]
        return zd

    def upper_ctrl(self, s_full):
        z = self.op.apply(self._zd(s_full))
        return self.base + z.reshape(-1, 2)

    def top_only_ctrl(self, s_full):
        """Surface rows moved, interior frozen (staggered inner passes)."""
        ctrl = self.base.copy()
        ctrl[self.pids] += s_full[self.rows]
        return ctrl

    def influence_matrix(self, surface_dofs):
        """d(upper ctrl, flattened 2*pid+comp)/d(surface dof): (2N, n_s)."""
        cols = np.array([2 * pid + c for pid, c in surface_dofs], dtype=int)
        T = np.zeros((2 * self.n, len(cols)))
        if self.op.free.size and len(cols):
            T[self.op.free] = self.op.influence(cols)
        T[cols, np.arange(len(cols))] = 1.0
        return T


class Stepper:
    """Advances the free-surface flow one space-time slab at a time."""

    def __init__(self, mesh: SpatialMesh, scheme: DisplacementScheme,
                 fluid: FluidProps, dt: float, *,
                 coupling: str = "surface-monolithic",
                 newton: NewtonSettings | None = None,
                 mesh_props: MeshElasticityProps | None = None,
                 inflow_profile=None, t0: float = 0.0):
        if coupling not in COUPLINGS:
            raise ConfigError(f"unknown coupling strategy {coupling!r}")
        if dt <= 0.0:
            raise ConfigError("time step must be positive")
        self.mesh = mesh
        self.scheme = scheme
        self.fluid = fluid
        self.dt = float(dt)
        self.coupling = coupling
        self.newton = newton or NewtonSettings()
        self.mesh_props = mesh_props or MeshElasticityProps()
        self.inflow_profile = inflow_profile
        self.t = float(t0)
        self.slab_index = 0
        n = mesh.patch.n_points
        self.u = np.zeros((n, 2))
        self.p = np.zeros(n)
        self.last_surface_state: SurfaceSlabState | None = None
        self.last_report: SlabReport | None = None
        self._dm: DofMap | None = None
        # converged surface increment of the previous slab, used to start
        # the next slab's Newton loop; part of the resumable state because
        # it changes the iteration path (not the converged physics)
        self.surface_guess: np.ndarray | None = None

    # --- per-slab drivers --------------------------------------------------

    def step(self) -> SlabReport:
        t1 = self.t + self.dt
        try:
            if self.scheme.is_pde:
                x, new_ctrl, iters, norm = self._step_pde(t1)
            else:
                x, new_ctrl, iters, norm = self._step_point(t1)
        except MeshTangledError as e:
            raise MeshTangledError(
                f"mesh tangled in the slab ending at t={t1:g}",
                time=e.time if e.time is not None else t1) from e

        n = self.mesh.patch.n_points
        self.last_flow = x
        U = x[:4 * n].reshape(2, 2, n)
        top = self.mesh.top_row_pids()
        self.last_surface_state = SurfaceSlabState(
            t0=self.t, dt=self.dt,
            lower_top=self.mesh.ctrl[top].copy(),
            upper_top=new_ctrl[top].copy(),
            u_top=U[:, :, top].copy())

        self.mesh = self.mesh.with_ctrl(new_ctrl)
        if mesh_quality(self.mesh) <= 0.0:
            raise MeshTangledError(
                f"mesh tangled in the slab ending at t={t1:g}", time=t1)
        self.u = U[1].T.copy()
        self.p = x[5 * n:6 * n].copy()
        self.t = t1
        self.slab_index += 1
        self.last_report = SlabReport(t1=t1, iterations=iters, residual=norm)
        return self.last_report

    def _dofmap(self) -> DofMap:
        # reused across slabs: dof layout, boundary data, and the assembler
        # sparsity patterns cached on it depend only on topology and tags
        if self._dm is None:
            dm = DofMap(self.mesh, self.scheme.kind,
                        tangential_dofs=self.scheme.is_pde
                        and self.scheme.tangential_dofs,
                        monolithic=self.scheme.is_pde
                        and self.coupling == "monolithic")
            apply_velocity_bcs(dm, self.inflow_profile)
            self._dm = dm
        return self._dm

    def _initial_flow_guess(self, dm: DofMap) -> np.ndarray:
        n = dm.n_points
        x = np.zeros(dm.n_flow)
        U = x[:4 * n].reshape(2, 2, n)
        U[0] = U[1] = self.u.T
        x[dm.dirichlet_mask] = dm.dirichlet_values[dm.dirichlet_mask]
        return x

    def _step_point(self, t1):
        """Flow on the frozen extruded geometry, then the explicit update."""
        dm = self._dofmap()
        slab = build_slab(self.mesh, self.dt, self.t)
        flow = FlowAssembler(slab, dm, self.fluid, self.u)
        frozen = self.mesh.ctrl

        def system(x):
            R, J, _ = flow.linearize(x, frozen)
            return R, J

        x, iters, norm = self._newton(
            self._initial_flow_guess(dm), system,
            lambda x: _inf(flow.residual(x, frozen)), t1)

        n = dm.n_points
        U = x[:4 * n].reshape(2, 2, n)
        top = self.mesh.top_row_pids()
        u_mean = 0.5 * (U[0] + U[1])[:, top].T          # (n_u, 2)
        move = np.isin(top, dm.surface_pids)
        pinned = np.zeros(len(top), dtype=bool)
        pinned[move] = dm.surface_pinned_x
        if self.scheme.kind == "node-normal":
            delta = node_normal_displacement(
                self.mesh.ctrl[top], u_mean, self.dt,
                pinned_x=pinned, move_mask=move)
        else:
            delta = greville_displacement(
                self.mesh.patch.kv_u, self.mesh.ctrl[top], u_mean, self.dt,
                pinned_x=pinned, move_mask=move)
        geom = _SurfaceGeometry(self.mesh, dm.surface_pids, self.mesh_props)
        s_full = np.zeros((len(top), 2))
        s_full[move] = delta[move]
        return x, geom.upper_ctrl(s_full), iters, norm

    def _step_pde(self, t1):
        dm = self._dofmap()
        slab = build_slab(self.mesh, self.dt, self.t)
        flow = FlowAssembler(slab, dm, self.fluid, self.u)
        n_u = self.mesh.patch.n_u
        surf = SurfaceAssembler(dm, self.scheme, self.mesh.surface_curve_ctrl(),
                                np.zeros((n_u, 2)), self.dt)
        geom = _SurfaceGeometry(self.mesh, dm.surface_pids, self.mesh_props)
        x0 = self._initial_flow_guess(dm)
        if self.coupling == "surface-monolithic":
            return self._solve_surface_monolithic(flow, surf, geom, dm, x0, t1)
        if self.coupling == "monolithic":
            return self._solve_monolithic(flow, surf, geom, dm, x0, t1)
        return self._solve_staggered(flow, surf, geom, dm, x0, t1)

    # --- coupling strategies ------------------------------------------------

    def _solve_surface_monolithic(self, flow, surf, geom, dm, x0, t1):
        n_u = self.mesh.patch.n_u
        T = geom.influence_matrix(dm.surface_dofs)

        def unpack(y):
            x = y[:dm.n_flow]
            s_full = surf.scatter_dofs(np.zeros((n_u, 2)), y[dm.n_flow:])
            return x, s_full

        def system(y):
            x, s_full = unpack(y)
            Rf, Jf, G = flow.linearize(x, geom.upper_ctrl(s_full),
                                       need_geometry=True)
            Rs, Ju, Js = surf.linearize(x, s_full)
            K = sparse.bmat(
                [[Jf, sparse.csr_matrix(G @ T)],
                 [Ju, sparse.csr_matrix(Js)]], format="csc")
            return np.concatenate([Rf, Rs]), K

        def resid_norm(y):
            x, s_full = unpack(y)
            return max(_inf(flow.residual(x, geom.upper_ctrl(s_full))),
                       _inf(surf.residual(x, s_full)))

        guesses = [np.zeros(dm.n_s)]
        if self.surface_guess is not None and self.surface_guess.size == dm.n_s:
            guesses.insert(0, self.surface_guess)
        for k, s0 in enumerate(guesses):
            try:
                y, iters, norm = self._newton(
                    np.concatenate([x0, s0]), system, resid_norm, t1)
                break
            except MeshTangledError:
                # a stale guess can fold the trial geometry; retry cold
                if k == len(guesses) - 1:
                    raise
        x, s_full = unpack(y)
        self.surface_guess = y[dm.n_flow:].copy()
        return x, geom.upper_ctrl(s_full), iters, norm

    def _solve_monolithic(self, flow, surf, geom, dm, x0, t1):
        """Flow + surface + interior mesh displacement in one system."""
        n_u = self.mesh.patch.n_u
        op = geom.op
        free = op.free
        dof_cols = np.array([2 * p + c for p, c in dm.surface_dofs], int)
        pos = np.searchsorted(op.con, dof_cols)
        K_fs = op.K_fc[:, pos]

        def unpack(y):
            x = y[:dm.n_flow]
            s_full = surf.scatter_dofs(
                np.zeros((n_u, 2)), y[dm.n_flow:dm.n_flow + dm.n_s])
            z_f = y[dm.n_flow + dm.n_s:]
            return x, s_full, z_f

        def ctrl_of(s_full, z_f):
            z = np.zeros(2 * geom.n)
            z[op.con] = geom._zd(s_full)[op.con]
            z[free] = z_f
            return geom.base + z.reshape(-1, 2)

        def mesh_residual(s_full, z_f):
            zc = geom._zd(s_full)[op.con]
            return op.K_ff @ z_f + op.K_fc @ zc

        def system(y):
            x, s_full, z_f = unpack(y)
            Rf, Jf, G = flow.linearize(x, ctrl_of(s_full, z_f),
                                       need_geometry=True)
            Rs, Ju, Js = surf.linearize(x, s_full)
            Rz = mesh_residual(s_full, z_f)
            K = sparse.bmat(
                [[Jf, G[:, dof_cols], G[:, free]],
                 [Ju, sparse.csr_matrix(Js), None],
                 [None, K_fs, op.K_ff]], format="csc")
            return np.concatenate([Rf, Rs, Rz]), K

        def resid_norm(y):
            x, s_full, z_f = unpack(y)
            return max(_inf(flow.residual(x, ctrl_of(s_full, z_f))),
                       _inf(surf.residual(x, s_full)),
                       _inf(mesh_residual(s_full, z_f)))

        y0 = np.concatenate([x0, np.zeros(dm.n_s + free.size)])
        y, iters, norm = self._newton(y0, system, resid_norm, t1)
        x, s_full, z_f = unpack(y)
        return x, ctrl_of(s_full, z_f), iters, norm

    def _solve_staggered(self, flow, surf, geom, dm, x0, t1):
        """Alternate flow and surface solves on a frozen interior, then one
        mesh update once the pair has converged."""
        n_u = self.mesh.patch.n_u
        s_full = np.zeros((n_u, 2))
        x = x0
        history = []
        norm0 = None
        total_iters = 0
        for _ in range(self.newton.max_iter):
            ctrl = geom.top_only_ctrl(s_full)
            norm = max(_inf(flow.residual(x, ctrl)),
                       _inf(surf.residual(x, s_full)))
            history.append(norm)
            if norm0 is None:
                norm0 = norm
            if norm <= max(self.newton.abs_tol, self.newton.rel_tol * norm0):
                return x, geom.upper_ctrl(s_full), total_iters, norm

            def flow_system(xv, ctrl=ctrl):
                R, J, _ = flow.linearize(xv, ctrl)
                return R, J

            x, it_f, _ = self._newton(
                x, flow_system, lambda xv: _inf(flow.residual(xv, ctrl)), t1)

            def surf_system(vec, x=x):
                full = surf.scatter_dofs(np.zeros((n_u, 2)), vec)
                R, _, Js = surf.linearize(x, full)
                return R, sparse.csc_matrix(Js)

            vec, it_s, _ = self._newton(
                surf.gather_dofs(s_full), surf_system,
                lambda vec, x=x: _inf(surf.residual(
                    x, surf.scatter_dofs(np.zeros((n_u, 2)), vec))), t1)
            s_full = surf.scatter_dofs(np.zeros((n_u, 2)), vec)
            total_iters += max(it_f, it_s, 1)
        raise NewtonDivergedError(
            f"staggered coupling stalled at t={t1:g}", history=history)

    # --- Newton with a backtracking line search -----------------------------

    def _newton(self, y, system, resid_norm, t1):
        settings = self.newton
        history = []
        norm0 = None
        for it in range(settings.max_iter):
            R, K = system(y)
            norm = _inf(R)
            history.append(norm)
            if norm0 is None:
                norm0 = norm
            if norm <= max(settings.abs_tol, settings.rel_tol * norm0):
                return y, it, norm
            delta = splu(K.tocsc()).solve(-R)
            y = self._linesearch(y, delta, norm, resid_norm, t1)
        raise NewtonDivergedError(
            f"Newton hit {settings.max_iter} iterations at t={t1:g}",
            history=history)

    def _linesearch(self, y, delta, norm, resid_norm, t1):
        alpha = 1.0
        best = None
        for _ in range(self.newton.max_backtracks + 1):
            trial = y + alpha * delta
            try:
                trial_norm = resid_norm(trial)
            except MeshTangledError:
                alpha *= 0.5
                continue
            if trial_norm <= norm:
                return trial
            if best is None or trial_norm < best[1]:
                best = (trial, trial_norm)
            alpha *= 0.5
        if best is None:
            raise MeshTangledError(
                f"every line-search step tangles the mesh at t={t1:g}",
                time=t1)
        return best[0]


def _inf(v: np.ndarray) -> float:
    return float(np.abs(v).max()) if v.size else 0.0


def march(stepper: Stepper, t_max: float, *, on_slab=None,
          record: RunRecord | None = None) -> RunRecord:
    """Run slabs until t_max, a tangled mesh, or Newton divergence.

    Returns the diagnostics record; failures are recorded as the run status
    rather than raised, mirroring the CLI exit codes.
    """
    rec = record if record is not None else RunRecord()
    rho = stepper.fluid.rho
    corner = stepper.mesh.corner_gid("upper-right")
    if not rec.times:
        rec.append(stepper.t, compute_mass(stepper.mesh, rho),
                   compute_mass(stepper.mesh, rho),
                   stepper.mesh.ctrl[corner], mesh_quality(stepper.mesh))
    m0 = rec.mass[0]
    while stepper.t < t_max - 1e-9 * stepper.dt:
        try:
            stepper.step()
        except MeshTangledError:
            rec.status = "tangled"
            break
        except NewtonDivergedError:
            rec.status = "diverged"
            break
        rec.surface_slabs.append(stepper.last_surface_state)
        rec.append(stepper.t, compute_mass(stepper.mesh, rho), m0,
                   stepper.mesh.ctrl[corner], mesh_quality(stepper.mesh))
        if on_slab is not None:
            on_slab(stepper, rec)
    if rec.surface_slabs:
        rec.flux_err = flux_error(rec, stepper.mesh.patch)
    return rec
