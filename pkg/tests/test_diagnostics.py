import numpy as np
import pytest

from slabflow.diagnostics import (RunRecord, SurfaceSlabState, compute_mass,
                                  flux_error, mass_error, mesh_quality)
from slabflow.elasticity import MeshElasticityProps, assemble_emum
from slabflow.errors import DomainError
from slabflow.flow import FluidProps
from slabflow.mesh import BasisKind, build_mesh
from slabflow.solver import Stepper, march
from slabflow.splines import basis_matrix, fit_least_squares
from slabflow.surface import DisplacementScheme

SLOSH_TAGS = {"left": "slip", "right": "slip", "bottom": "slip", "top": "free"}
WATER = FluidProps(rho=1000.0, mu=0.01, body_force=(0.0, -1.0))


def cos_mesh(n=12, basis=BasisKind.nurbs(2), amp=0.1):
    mesh = build_mesh(1.0, 1.0, n, n, basis, SLOSH_TAGS)
    xs = np.linspace(0.0, 1.0, 40 * n)
    samples = np.stack([xs, 1.0 - amp * np.cos(np.pi * xs)], axis=1)
    curve = fit_least_squares(samples, mesh.patch.kv_u, fixed_ends=True)
    top = mesh.top_row_pids()
    z = assemble_emum(mesh, curve.ctrl - mesh.ctrl[top],
                      MeshElasticityProps(), top)
    return mesh.with_ctrl(mesh.ctrl + z)


def test_mass_of_rectangles_is_exact():
    mesh = build_mesh(1.0, 1.0, 12, 12, BasisKind.nurbs(2), SLOSH_TAGS)
    assert compute_mass(mesh, 1000.0) == pytest.approx(1000.0, abs=1e-9)
    wide = build_mesh(60.0, 10.0, 10, 6, BasisKind.q1(), SLOSH_TAGS)
    assert compute_mass(wide, 1.0) == pytest.approx(600.0, abs=1e-9)


@pytest.mark.parametrize("basis", [BasisKind.q1(), BasisKind.nurbs(2)])
def test_mass_matches_shoelace_of_boundary(basis):
    # the interior EMUM displacement must not change the enclosed area:
    # compare against a dense polygon built from the walls and the top curve
    mesh = cos_mesh(basis=basis)
    kv = mesh.patch.kv_u
    theta = np.linspace(kv.knots[0], kv.knots[-1], 20001)
    top = basis_matrix(kv, theta) @ mesh.surface_curve_ctrl()
    poly = np.vstack([[(0.0, 0.0), (1.0, 0.0)], top[::-1]])
    x, y = poly[:, 0], poly[:, 1]
    area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    assert compute_mass(mesh, 1.0) == pytest.approx(area, rel=1e-8)


def test_mass_is_translation_invariant():
    mesh = cos_mesh()
    moved = mesh.with_ctrl(mesh.ctrl + np.array([3.7, -11.2]))
    m = compute_mass(mesh, 1000.0)
    assert abs(compute_mass(moved, 1000.0) - m) <= 1e-9 * m


def test_mass_error_values():
    assert mass_error(1100.0, 1000.0) == pytest.approx(0.1)
    assert mass_error(1000.0, 1000.0) == 0.0
    with pytest.raises(DomainError):
        mass_error(1.0, 0.0)
    with pytest.raises(DomainError):
        mass_error(1.0, -2.0)


def test_mesh_quality_uniform_and_tangled():
    mesh = build_mesh(1.0, 1.0, 6, 6, BasisKind.q1(), SLOSH_TAGS)
    assert mesh_quality(mesh) == pytest.approx(1.0)
    ctrl = mesh.ctrl.copy()
    gid = mesh.patch.gid(2, 2)
    ctrl[gid] = ctrl[mesh.patch.gid(4, 4)]  # fold one node across its cell
    assert mesh_quality(mesh.with_ctrl(ctrl)) <= 0.0


@pytest.mark.parametrize("basis", [BasisKind.q1(), BasisKind.nurbs(2)])
def test_fitted_corner_is_interpolated(basis):
    # fixed ends pin the fit, so the tracked corner starts exactly on h(1)
    mesh = cos_mesh(basis=basis)
    corner = mesh.ctrl[mesh.corner_gid("upper-right")]
    np.testing.assert_allclose(corner, [1.0, 1.1], atol=1e-12)


def test_record_first_row_has_zero_mass_error():
    rec = RunRecord()
    rec.append(0.0, 999.0, 1000.0, (0.5, 1.0), 0.9)
    rec.append(0.2, 999.0, 1000.0, (0.5, 1.0), 0.9)
    assert rec.mass_err[0] == 0.0
    assert rec.mass_err[1] == pytest.approx(1e-3)
    assert rec.max_mass_error == pytest.approx(1e-3)
    t, cx, cy = rec.corner_trajectory()
    np.testing.assert_array_equal(t, [0.0, 0.2])
    np.testing.assert_array_equal(cx, [0.5, 0.5])


def test_flux_error_zero_when_surface_moves_with_velocity():
    # control velocities chosen so u and the mesh velocity interpolate to
    # the same trace polynomial: the mismatch must vanish identically
    mesh = cos_mesh(n=9)
    rng = np.random.default_rng(3)
    top = mesh.surface_curve_ctrl()
    dt = 0.25
    rec = RunRecord()
    lower = top.copy()
    for k in range(3):
        upper = lower + 0.05 * rng.standard_normal(lower.shape)
        v_ctrl = (upper - lower) / dt
        u_top = np.stack([v_ctrl.T, v_ctrl.T])     # (level, comp, function)
        rec.surface_slabs.append(SurfaceSlabState(
            t0=k * dt, dt=dt, lower_top=lower, upper_top=upper,
            u_top=u_top))
        lower = upper
    assert flux_error(rec, mesh.patch) < 1e-13


def test_flux_error_stable_under_quadrature_refinement():
    st = Stepper(cos_mesh(), DisplacementScheme("pde-directional"), WATER,
                 dt=0.2)
    rec = march(st, 0.4)
    assert rec.status == "completed"
    patch = st.mesh.patch
    f0 = rec.flux_err
    f1 = flux_error(rec, patch, n_space=patch.p + 2, n_time=3)
    f2 = flux_error(rec, patch, n_space=patch.p + 8, n_time=6)
    assert f0 > 0.0
    # the arc-length factor is not polynomial: the default rule sits a few
    # 1e-5 relative from converged, one refinement level pins it down
    assert abs(f1 - f0) <= 1e-4 * f0
    assert abs(f2 - f1) <= 1e-8 * f1


def test_flux_error_requires_surface_history():
    mesh = cos_mesh(n=9)
    with pytest.raises(DomainError):
        flux_error(RunRecord(), mesh.patch)
