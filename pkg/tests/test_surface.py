"""Free-surface scheme tests: exact rates, scheme equivalences, oracles."""

import numpy as np
import pytest

from slabflow.errors import ConfigError, SingularityError
from slabflow.mesh import BasisKind, DofMap, build_mesh
from slabflow.splines import NurbsCurve, greville_abscissae, open_uniform_knots
from slabflow.surface import (
    DisplacementScheme,
    SurfaceAssembler,
    greville_displacement,
    node_normal_displacement,
    polyline_normals,
)

SLOSH_TAGS = {"left": "slip", "right": "slip", "bottom": "slip", "top": "free"}
OPEN_TAGS = {"left": "free", "right": "free", "bottom": "slip", "top": "free"}


def surface_setup(scheme, basis=BasisKind.nurbs(2), n_u=8, tags=SLOSH_TAGS,
                  dt=0.1):
    mesh = build_mesh(1.0, 1.0, n_u, 4, basis, tags)
    dm = DofMap(mesh, scheme.kind, tangential_dofs=scheme.tangential_dofs)
    X0 = mesh.surface_curve_ctrl()
    s0 = np.zeros_like(X0)
    asm = SurfaceAssembler(dm, scheme, X0, s0, dt)
    return mesh, dm, asm, s0


def flow_vector(dm, u=(0.0, 0.0), per_point=None):
    n = dm.n_points
    x = np.zeros(dm.n_flow)
    U = x[: 4 * n].reshape(2, 2, n)
    if per_point is None:
        U[:, 0, :], U[:, 1, :] = u[0], u[1]
    else:
        U[:, :, :] = per_point.T[None, :, :]
    return x


def solve_surface(asm, x_flow, s_start, tol=1e-11, iters=15):
    s_full = s_start.copy()
    for _ in range(iters):
        R, _, J_s = asm.linearize(x_flow, s_full)
        if np.abs(R).max() < tol:
            return s_full
        vec = asm.gather_dofs(s_full) - np.linalg.solve(J_s, R)
        s_full = asm.scatter_dofs(s_full, vec)
    raise AssertionError(f"surface solve stalled, |R|={np.abs(R).max():.3e}")


# ---------------------------------------------------------------------------
# residual identities
# ---------------------------------------------------------------------------

def test_material_motion_gives_zero_residual():
    # s moving exactly with a constant velocity field makes s_dot - u vanish
    # pointwise, so both weak equations are zero for any surface shape
    rng = np.random.default_rng(2)
    scheme = DisplacementScheme("pde-equal")
    mesh, dm, asm, s0 = surface_setup(scheme, tags=OPEN_TAGS)
    s_prev = 0.05 * rng.standard_normal(s0.shape)
    asm.s_prev = s_prev
    u0 = (0.37, -0.21)
    s_next = s_prev + np.asarray(u0) * asm.dt
    R = asm.residual(flow_vector(dm, u0), s_next)
    assert np.abs(R).max() < 1e-14


def test_flat_surface_rates():
    # uniform u = (3, 2) over a flat surface: the directional (vertical) and
    # normal schemes move the mesh at (0, 2); the material scheme at (3, 2)
    dt = 0.1
    for kind, rate in (("pde-directional", (0.0, 2.0)),
                       ("pde-normal", (0.0, 2.0)),
                       ("pde-equal", (3.0, 2.0))):
        scheme = DisplacementScheme(kind)
        tags = OPEN_TAGS if kind == "pde-equal" else SLOSH_TAGS
        mesh, dm, asm, s0 = surface_setup(scheme, tags=tags, dt=dt)
        s = solve_surface(asm, flow_vector(dm, (3.0, 2.0)), s0)
        np.testing.assert_allclose(s[:, 0], rate[0] * dt, atol=1e-9)
        np.testing.assert_allclose(s[:, 1], rate[1] * dt, atol=1e-9)


def test_normal_and_vertical_directional_agree():
    # uniform normal velocity with arbitrary tangential flow: both schemes
    # return the same vertical motion and no horizontal motion
    rng = np.random.default_rng(7)
    per_point = np.zeros((32, 2))
    s_res = {}
    for kind in ("pde-normal", "pde-directional"):
        scheme = DisplacementScheme(kind)
        mesh, dm, asm, s0 = surface_setup(scheme)
        pts = np.zeros((dm.n_points, 2))
        pts[:, 0] = 0.8 * rng.standard_normal(dm.n_points)  # tangential only
        pts[:, 1] = 2.0
        s = solve_surface(asm, flow_vector(dm, per_point=pts), s0)
        s_res[kind] = s
        np.testing.assert_allclose(s[:, 0], 0.0, atol=1e-10)
    np.testing.assert_allclose(s_res["pde-normal"][:, 1],
                               s_res["pde-directional"][:, 1], atol=1e-10)


def test_vertical_scheme_never_moves_horizontally():
    rng = np.random.default_rng(12)
    scheme = DisplacementScheme("pde-directional", direction=(0.0, 1.0))
    assert scheme.vertical and not scheme.tangential_dofs
    mesh, dm, asm, s0 = surface_setup(scheme)
    pts = 0.6 * rng.standard_normal((dm.n_points, 2))
    s = solve_surface(asm, flow_vector(dm, per_point=pts), s0, tol=1e-10)
    np.testing.assert_array_equal(s[:, 0], s0[:, 0])


def test_tilted_direction_keeps_tangential_dofs():
    scheme = DisplacementScheme("pde-directional", direction=(0.3, 1.0))
    assert scheme.tangential_dofs
    mesh, dm, asm, s0 = surface_setup(scheme)
    assert dm.n_s == 2 * mesh.patch.n_u - 2


def test_tangential_direction_raises():
    scheme = DisplacementScheme("pde-directional", direction=(1.0, 0.0))
    mesh, dm, asm, s0 = surface_setup(scheme)
    with pytest.raises(SingularityError):
        asm.residual(flow_vector(dm, (1.0, 1.0)), s0)


def test_scheme_validation():
    with pytest.raises(ConfigError):
        DisplacementScheme("upwind")
    with pytest.raises(ConfigError):
        DisplacementScheme("pde-directional", direction=(0.0, 0.0))


def test_equation_count_matches_unknowns():
    rng = np.random.default_rng(31)
    for _ in range(20):
        p = int(rng.integers(1, 4))
        basis = BasisKind.q1() if p == 1 else BasisKind.nurbs(p)
        n_u = int(rng.integers(p + 2, p + 9))
        kind = ("pde-equal", "pde-normal",
                "pde-directional")[int(rng.integers(3))]
        scheme = DisplacementScheme(kind)
        mesh = build_mesh(2.0, 1.0, n_u, p + 3, basis, SLOSH_TAGS)
        dm = DofMap(mesh, kind, tangential_dofs=scheme.tangential_dofs)
        asm = SurfaceAssembler(dm, scheme, mesh.surface_curve_ctrl(),
                               np.zeros((n_u, 2)), 0.1)
        expected = n_u if scheme.vertical else 2 * n_u - 2
        assert dm.n_s == expected
        R, J_u, J_s = asm.linearize(flow_vector(dm, (0.1, 0.2)),
                                    np.zeros((n_u, 2)))
        assert R.shape == (expected,)
        assert J_u.shape == (expected, dm.n_flow)
        assert J_s.shape == (expected, expected)


def test_velocity_jacobian_matches_finite_differences():
    rng = np.random.default_rng(9)
    for kind in ("pde-equal", "pde-normal", "pde-directional"):
        scheme = DisplacementScheme(kind, direction=(0.2, 1.0))
        mesh, dm, asm, s0 = surface_setup(scheme)
        asm.s_prev = 0.03 * rng.standard_normal(s0.shape)
        s_next = asm.s_prev + 0.02 * rng.standard_normal(s0.shape)
        x = 0.5 * rng.standard_normal(dm.n_flow)
        R0, J_u, _ = asm.linearize(x, s_next)
        h = 1e-6
        cols = rng.choice(4 * dm.n_points, size=40, replace=False)
        for j in cols:
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd = (asm.residual(xp, s_next) - asm.residual(xm, s_next)) / (2 * h)
            np.testing.assert_allclose(J_u[:, j].toarray().ravel(), fd,
                                       rtol=1e-6, atol=1e-12)


# ---------------------------------------------------------------------------
# point-based updates
# ---------------------------------------------------------------------------

def test_polyline_normals_roof():
    pts = np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 2.0], [3.0, 2.0]])
    n = polyline_normals(pts)
    np.testing.assert_allclose(n[0], [0.0, 1.0])
    np.testing.assert_allclose(n[1], np.array([-1.0, 2.0]) / np.sqrt(5))
    np.testing.assert_allclose(n[2], np.array([-1.0, 2.0]) / np.sqrt(5))
    np.testing.assert_allclose(n[3], [0.0, 1.0])


def test_node_normal_update_hand_values():
    pts = np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 2.0], [3.0, 2.0]])
    u = np.tile([0.5, 1.0], (4, 1))
    d = node_normal_displacement(pts, u, dt=0.1)
    np.testing.assert_allclose(d[0], [0.0, 0.1], atol=1e-15)
    np.testing.assert_allclose(d[1], [-0.03, 0.06], atol=1e-15)
    np.testing.assert_allclose(d[3], [0.0, 0.1], atol=1e-15)


def test_node_normal_corner_projection():
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    u = np.tile([0.0, 1.0], (3, 1))
    d = node_normal_displacement(pts, u, dt=1.0,
                                 pinned_x=[True, False, True])
    # free midpoint keeps its full normal displacement (-1/2, 1/2)
    np.testing.assert_allclose(d[1], [-0.5, 0.5])
    # pinned ends slide along the wall: x-component removed
    assert d[0][0] == 0.0 and d[2][0] == 0.0
    np.testing.assert_allclose(d[0][1], 0.5)


def test_greville_update_flat_curve():
    kv = open_uniform_knots(2, 7)
    ctrl = np.stack([np.linspace(0, 2, 7), np.full(7, 1.0)], axis=1)
    u = np.tile([0.4, 0.8], (7, 1))
    d = greville_displacement(kv, ctrl, u, dt=0.5,
                              pinned_x=np.zeros(7, dtype=bool))
    np.testing.assert_allclose(d[:, 0], 0.0, atol=1e-14)
    np.testing.assert_allclose(d[:, 1], 0.4, atol=1e-14)


def test_greville_update_against_fd_normals():
    rng = np.random.default_rng(5)
    kv = open_uniform_knots(2, 9)
    x = np.linspace(0, 3, 9)
    ctrl = np.stack([x, 1.0 + 0.2 * np.cos(2 * x)], axis=1)
    u = 0.5 * rng.standard_normal((9, 2))
    d = greville_displacement(kv, ctrl, u, dt=0.2)
    curve = NurbsCurve(kv, ctrl, np.ones(9))
    h = 1e-6
    for i, g in enumerate(greville_abscissae(kv)):
        ga = min(max(g, kv.start + h), kv.end - h)
        t = (curve.point(ga + h) - curve.point(ga - h)) / (2 * h)
        t /= np.linalg.norm(t)
        n = np.array([-t[1], t[0]])
        np.testing.assert_allclose(d[i], (u[i] @ n) * n * 0.2, rtol=1e-5,
                                   atol=1e-8)


def test_move_mask_freezes_points():
    kv = open_uniform_knots(2, 7)
    ctrl = np.stack([np.linspace(0, 2, 7), np.full(7, 1.0)], axis=1)
    u = np.tile([0.0, 1.0], (7, 1))
    mask = np.array([False, False, True, True, True, True, True])
    d = greville_displacement(kv, ctrl, u, dt=1.0, move_mask=mask)
    np.testing.assert_array_equal(d[:2], 0.0)
    np.testing.assert_allclose(d[2:, 1], 1.0)
