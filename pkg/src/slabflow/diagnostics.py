"""Run measurements: mass, surface flux mismatch, trajectories, quality."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .mesh import SpatialMesh, _span_tables


def compute_mass(mesh: SpatialMesh, rho: float) -> float:
    """Fluid mass by the same volume quadrature the assembly uses."""
    return rho * mesh.area()


def mass_error(m: float, m0: float) -> float:
    if m0 <= 0.0:
        raise DomainError("reference mass must be positive")
    return abs(m / m0 - 1.0)


def mesh_quality(mesh: SpatialMesh) -> float:
    """Worst per-element corner-Jacobian ratio; 0 means tangled."""
    return float(mesh.corner_jacobian_ratios().min())


@dataclass
class SurfaceSlabState:
    """Top-edge data of one solved slab, enough to integrate the flux."""

    t0: float
    dt: float
    lower_top: np.ndarray    # (n_u, 2) control points at the slab start
    upper_top: np.ndarray    # (n_u, 2) control points at the slab end
    u_top: np.ndarray        # (2, 2, n_u): (level, component, function)


@dataclass
class RunRecord:
    """Per-slab diagnostics plus the per-run flux error and exit status."""

    times: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    mass_err: list = field(default_factory=list)
    corner_x: list = field(default_factory=list)
    corner_y: list = field(default_factory=list)
    quality: list = field(default_factory=list)
    surface_slabs: list = field(default_factory=list)
    flux_err: float = 0.0
    status: str = "completed"

    def append(self, t, m, m0, corner, q):
        self.times.append(float(t))
        self.mass.append(float(m))
        self.mass_err.append(mass_error(m, m0) if self.times[:-1] else 0.0)
        self.corner_x.append(float(corner[0]))
        self.corner_y.append(float(corner[1]))
        self.quality.append(float(q))

    @property
    def max_mass_error(self) -> float:
        return max(self.mass_err)

    def corner_trajectory(self):
        return (np.asarray(self.times), np.asarray(self.corner_x),
                np.asarray(self.corner_y))


class TraceRule:
    """Quadrature tables along the top parametric edge of a patch."""

    def __init__(self, patch, n_space=None, n_time=2):
        p = patch.p
        nq = p + 1 if n_space is None else int(n_space)
        xg, wg = np.polynomial.legendre.leggauss(nq)
        self.N, self.dN = _span_tables(patch.kv_u, xg)   # (S, nq, p+1)
        self.w = wg
        first = np.array([s[0] - p for s in patch.kv_u.spans()])
        self.conn = first[:, None] + np.arange(p + 1)[None, :]
        tq, tw = np.polynomial.legendre.leggauss(int(n_time))
        self.tq = 0.5 * (tq + 1.0)
        self.tw = 0.5 * tw


def flux_error(record: RunRecord, patch, n_space=None, n_time=2) -> float:
    """Root-mean-square normal-velocity mismatch on the moving surface.

    sqrt of [the space-time integral of |u.n - v.n|^2 over the free surface]
    divided by [the surface's space-time measure], accumulated slab by slab.
    """
    rule = TraceRule(patch, n_space, n_time)
    num = 0.0
    den = 0.0
    for s in record.surface_slabs:
        a, b = _slab_flux_integrals(rule, s)
        num += a
        den += b
    if den == 0.0:
        raise DomainError("run has no free-surface history")
    return float(np.sqrt(num / den))


def _slab_flux_integrals(rule: TraceRule, s: SurfaceSlabState):
    cl = s.lower_top[rule.conn]                  # (S, p+1, 2)
    cu = s.upper_top[rule.conn]
    U = s.u_top[:, :, rule.conn]                 # (2, 2, S, p+1)
    v = np.einsum("sqb,sbi->sqi", rule.N, (cu - cl) / s.dt)
    num = 0.0
    den = 0.0
    for tau, wt in zip(rule.tq, rule.tw):
        X = (1.0 - tau) * cl + tau * cu
        xth = np.einsum("sqb,sbi->sqi", rule.dN, X)
        u = (1.0 - tau) * np.einsum("sqb,isb->sqi", rule.N, U[0]) \
            + tau * np.einsum("sqb,isb->sqi", rule.N, U[1])
        du = u - v
        mismatch = du[..., 0] * (-xth[..., 1]) + du[..., 1] * xth[..., 0]
        length = np.hypot(xth[..., 0], xth[..., 1])
        wq = rule.w[None, :] * (wt * s.dt)
        num += float(np.sum(wq * mismatch**2 / length))
        den += float(np.sum(wq * length))
    return num, den
