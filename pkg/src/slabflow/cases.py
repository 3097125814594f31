"""Benchmark case definitions and run configuration.

A case supplies geometry, boundary tags, fluid properties, and sensible
resolution defaults; everything can be overridden through a config file
(flat key=value lines) or command-line flags, flags winning.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .elasticity import MeshElasticityProps, assemble_emum
from .errors import ConfigError
from .flow import FluidProps
from .io import read_config_file
from .mesh import BasisKind, PatchBasis, SpatialMesh, build_mesh
from .solver import COUPLINGS, NewtonSettings, Stepper
from .splines import basis_matrix, fit_least_squares
from .surface import DisplacementScheme


@dataclass(frozen=True)
class SloshingTankCase:
    """Closed square tank whose initially cosine-shaped surface sloshes
    under gravity: h(x) = height - amplitude * cos(pi x / width)."""

    width: float = 1.0
    height: float = 1.0
    amplitude: float = 0.1

    name = "sloshing"
    default_resolution = (12, 12)
    default_dt = 0.2
    default_t_max = 50.0
    inflow_profile = None

    def default_fluid(self) -> FluidProps:
        return FluidProps(rho=1000.0, mu=0.01, body_force=(0.0, -1.0))

    def initial_mesh(self, basis: BasisKind, n_u: int, n_v: int) -> SpatialMesh:
        tags = {"left": "slip", "right": "slip", "bottom": "slip",
                "top": "free"}
        mesh = build_mesh(self.width, self.height, n_u, n_v, basis, tags)
        xs = np.linspace(0.0, self.width, 40 * n_u)
        h = self.height - self.amplitude * np.cos(np.pi * xs / self.width)
        curve = fit_least_squares(np.stack([xs, h], axis=1),
                                  mesh.patch.kv_u, fixed_ends=True)
        top = mesh.top_row_pids()
        z = assemble_emum(mesh, curve.ctrl - mesh.ctrl[top],
                          MeshElasticityProps(), top)
        return mesh.with_ctrl(mesh.ctrl + z)


@dataclass(frozen=True)
class DieSwellCase:
    """Planar extrusion: a no-slip die section, then a free surface along
    which the jet swells. Bottom is a symmetry plane, outflow is free."""

    lip_length: float = 20.0
    free_length: float = 40.0
    height: float = 10.0

    name = "dieswell"
    default_resolution = (86, 16)
    default_dt = 0.015625
    default_t_max = 15.0

    @property
    def width(self) -> float:
        return self.lip_length + self.free_length

    def default_fluid(self) -> FluidProps:
        # creeping flow: the advective term is dropped, not just small
        return FluidProps(rho=1.0, mu=1e5, body_force=(0.0, 0.0),
                          include_advection=False)

    def inflow_profile(self, pt):
        y = pt[1]
        return 0.1 * (self.height ** 2 - y * y), 0.0

    def initial_mesh(self, basis: BasisKind, n_u: int, n_v: int) -> SpatialMesh:
        patch = PatchBasis(basis, n_u, n_v, self.width, self.height)
        ctrl = patch.uniform_ctrl()
        # top faces are die wall or free surface by the x coordinate of
        # their parametric midpoint; the lip lands on the nearest knot
        mids = np.array([0.5 * (lo + hi)
                         for _, lo, hi in patch.kv_u.spans()])
        xs = ctrl[patch.side_pids("top"), 0]
        xmid = basis_matrix(patch.kv_u, mids) @ xs
        top = ["noslip" if x < self.lip_length else "free" for x in xmid]
        tags = {"left": "inflow", "right": "outflow", "bottom": "slip",
                "top": top}
        return SpatialMesh(patch, ctrl, tags)


CASES = {"sloshing": SloshingTankCase, "dieswell": DieSwellCase}


@dataclass
class CaseConfig:
    """Fully resolved run setup: case, discretization, physics, output."""

    case: SloshingTankCase | DieSwellCase
    basis: BasisKind
    n_u: int
    n_v: int
    dt: float
    t_max: float
    scheme: DisplacementScheme
    coupling: str = "surface-monolithic"
    fluid: FluidProps = field(default_factory=lambda: FluidProps(1.0, 1.0))
    mesh_props: MeshElasticityProps = field(
        default_factory=MeshElasticityProps)
    newton: NewtonSettings = field(default_factory=NewtonSettings)
    out_dir: str = "."
    snapshot_every: int = 0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ConfigError("case.dt must be positive")
        if self.t_max <= 0.0:
            raise ConfigError("case.tmax must be positive")
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"unknown coupling strategy {self.coupling!r}")
        if self.snapshot_every < 0:
            raise ConfigError("case.snapshot_every must be nonnegative")
        kind, basis = self.scheme.kind, self.basis
        if kind == "node-normal" and basis.kind != "q1":
            raise ConfigError(
                "scheme node-normal works on the q1 basis only")
        if kind == "greville" and basis.kind != "nurbs":
            raise ConfigError(
                "scheme greville works on nurbs bases only")


def build_stepper(cfg: CaseConfig) -> Stepper:
    mesh = cfg.case.initial_mesh(cfg.basis, cfg.n_u, cfg.n_v)
    return Stepper(mesh, cfg.scheme, cfg.fluid, cfg.dt,
                   coupling=cfg.coupling, newton=cfg.newton,
                   mesh_props=cfg.mesh_props,
                   inflow_profile=cfg.case.inflow_profile)


# ---------------------------------------------------------------------------
# key=value parsing
# ---------------------------------------------------------------------------

_KEYS = ("case.name", "case.basis", "case.mesh", "case.dt", "case.tmax",
         "case.scheme", "case.direction", "case.coupling", "case.out",
         "case.snapshot_every",
         "fluid.rho", "fluid.mu", "fluid.fx", "fluid.fy", "fluid.advection",
         "newton.abs_tol", "newton.rel_tol", "newton.max_iter",
         "newton.max_backtracks")


class _Entries:
    """Raw config values tagged with where they came from."""

    def __init__(self, path, overrides):
        self.vals: dict[str, tuple[str, str]] = {}
        if path is not None:
            for k, (v, lineno) in read_config_file(path).items():
                self.vals[k] = (v, f"{path}:{lineno}")
        for k, v in (overrides or {}).items():
            if v is not None:
                self.vals[k] = (str(v), "command line")
        for k, (_, where) in self.vals.items():
            if k not in _KEYS:
                raise ConfigError(f"unknown config key {k!r} ({where})")

    def take(self, key, parse, default):
        if key not in self.vals:
            return default
        raw, where = self.vals[key]
        try:
            return parse(raw)
        except ConfigError:
            raise
        except (ValueError, TypeError):
            raise ConfigError(
                f"malformed value for {key} ({where}): {raw!r}") from None


def _parse_basis(raw: str) -> BasisKind:
    if raw == "q1":
        return BasisKind.q1()
    m = re.fullmatch(r"nurbs(\d+)", raw)
    if not m:
        raise ValueError(raw)
    return BasisKind.nurbs(int(m.group(1)))


def _parse_mesh(raw: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", raw)
    if not m:
        raise ValueError(raw)
    return int(m.group(1)), int(m.group(2))


def _parse_direction(raw: str) -> tuple[float, float]:
    parts = raw.split(",")
    if len(parts) != 2:
        raise ValueError(raw)
    return float(parts[0]), float(parts[1])


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def parse_config(path=None, overrides=None) -> CaseConfig:
    """Resolve a config file plus flag overrides into a CaseConfig.

    overrides is a mapping from the same dotted keys the file uses to raw
    string values (None entries are ignored); flags beat file entries, and
    whatever is left unset falls back to the selected case's defaults.
    """
    e = _Entries(path, overrides)
    name = e.take("case.name", str, None)
    if name is None:
        raise ConfigError("no case selected: pass --case or set case.name")
    if name not in CASES:
        raise ConfigError(
            f"unknown case {name!r}; choose from {sorted(CASES)}")
    case = CASES[name]()

    basis = e.take("case.basis", _parse_basis, BasisKind.nurbs(2))
    n_u, n_v = e.take("case.mesh", _parse_mesh, case.default_resolution)
    scheme_kind = e.take("case.scheme", str, "pde-directional")
    direction = e.take("case.direction", _parse_direction, (0.0, 1.0))
    scheme = DisplacementScheme(scheme_kind, direction)

    base = case.default_fluid()
    fx = e.take("fluid.fx", float, base.body_force[0])
    fy = e.take("fluid.fy", float, base.body_force[1])
    fluid = FluidProps(
        rho=e.take("fluid.rho", float, base.rho),
        mu=e.take("fluid.mu", float, base.mu),
        body_force=(fx, fy),
        include_advection=e.take("fluid.advection", _parse_bool,
                                 base.include_advection))

    defaults = NewtonSettings()
    newton = NewtonSettings(
        abs_tol=e.take("newton.abs_tol", float, defaults.abs_tol),
        rel_tol=e.take("newton.rel_tol", float, defaults.rel_tol),
        max_iter=e.take("newton.max_iter", int, defaults.max_iter),
        max_backtracks=e.take("newton.max_backtracks", int,
                              defaults.max_backtracks))

    return CaseConfig(
        case=case, basis=basis, n_u=n_u, n_v=n_v,
        dt=e.take("case.dt", float, case.default_dt),
        t_max=e.take("case.tmax", float, case.default_t_max),
        scheme=scheme,
        coupling=e.take("case.coupling", str, "surface-monolithic"),
        fluid=fluid, newton=newton,
        out_dir=e.take("case.out", str, "."),
        snapshot_every=e.take("case.snapshot_every", int, 0))
