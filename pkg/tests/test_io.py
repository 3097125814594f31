"""Artifact round trips: CSV series, snapshots, checkpoints, config files."""

import numpy as np
import pytest

from slabflow.cases import (CaseConfig, DieSwellCase, SloshingTankCase,
                            build_stepper, parse_config)
from slabflow.cli import main
from slabflow.diagnostics import RunRecord
from slabflow.errors import CheckpointError, ConfigError, DomainError
from slabflow.io import (load_checkpoint, read_config_file, save_checkpoint,
                         write_snapshot, write_timeseries)
from slabflow.mesh import BasisKind, build_mesh
from slabflow.solver import march
from slabflow.surface import DisplacementScheme

BOX_TAGS = {"left": "slip", "right": "slip", "bottom": "slip", "top": "free"}


def slosh_config(n=8, slabs=3, amp=0.1, basis=BasisKind.nurbs(2)):
    case = SloshingTankCase(amplitude=amp)
    return CaseConfig(case=case, basis=basis, n_u=n, n_v=n, dt=0.2,
                      t_max=slabs * 0.2,
                      scheme=DisplacementScheme("pde-directional"),
                      fluid=case.default_fluid())


@pytest.fixture(scope="module")
def slosh_run():
    cfg = slosh_config()
    st = build_stepper(cfg)
    return cfg, st, march(st, cfg.t_max)


# --- time series ------------------------------------------------------------

def test_timeseries_layout_and_roundtrip(tmp_path, slosh_run):
    _, _, rec = slosh_run
    path = tmp_path / "run.csv"
    write_timeseries(rec, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,mass,mass_error,corner_x,corner_y,min_quality"
    assert len(lines) == len(rec.times) + 2
    assert lines[-1] == "# flux_error=%.17g status=completed" % rec.flux_err
    # 17 significant digits: every float survives the text round trip
    for lineno, k in ((1, 0), (3, 2)):
        vals = [float(v) for v in lines[lineno].split(",")]
        assert vals == [rec.times[k], rec.mass[k], rec.mass_err[k],
                        rec.corner_x[k], rec.corner_y[k], rec.quality[k]]
    assert float(lines[1].split(",")[0]) == 0.0
    assert float(lines[1].split(",")[2]) == 0.0


def test_timeseries_bytes_are_reproducible(tmp_path, slosh_run):
    _, _, rec = slosh_run
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_timeseries(rec, a)
    write_timeseries(rec, b)
    assert a.read_bytes() == b.read_bytes()


def test_timeseries_rejects_empty_record(tmp_path):
    with pytest.raises(DomainError):
        write_timeseries(RunRecord(), tmp_path / "x.csv")


def test_equilibrium_run_mass_error_column_is_zero(tmp_path):
    # flat surface in balance: recorded mass may drift only in the last bits
    cfg = slosh_config(slabs=2, amp=0.0)
    st = build_stepper(cfg)
    rec = march(st, cfg.t_max)
    path = tmp_path / "flat.csv"
    write_timeseries(rec, path)
    rows = path.read_text().splitlines()[1:-1]
    assert len(rows) == 3
    assert max(float(r.split(",")[2]) for r in rows) <= 1e-13


# --- snapshots ---------------------------------------------------------------

def _read_vtk(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# vtk DataFile")
    assert lines[2] == "ASCII"
    assert lines[3] == "DATASET UNSTRUCTURED_GRID"
    out = {}
    i = 4
    n_pts = int(lines[i].split()[1])
    pts = np.array([[float(v) for v in lines[i + 1 + k].split()]
                    for k in range(n_pts)])
    i += 1 + n_pts
    n_cells = int(lines[i].split()[1])
    cells = np.array([[int(v) for v in lines[i + 1 + k].split()[1:]]
                      for k in range(n_cells)])
    i += 1 + n_cells
    assert lines[i] == f"CELL_TYPES {n_cells}"
    types = [int(lines[i + 1 + k]) for k in range(n_cells)]
    i += 1 + n_cells
    assert lines[i] == f"POINT_DATA {n_pts}"
    assert lines[i + 1] == "VECTORS velocity double"
    vel = np.array([[float(v) for v in lines[i + 2 + k].split()]
                    for k in range(n_pts)])
    i += 2 + n_pts
    assert lines[i] == "SCALARS pressure double 1"
    assert lines[i + 1] == "LOOKUP_TABLE default"
    pres = np.array([float(lines[i + 2 + k]) for k in range(n_pts)])
    out.update(points=pts, cells=cells, types=types, vel=vel, pres=pres)
    return out


def test_snapshot_q1_emits_nodes_and_elements(tmp_path):
    mesh = build_mesh(1.0, 1.0, 12, 12, BasisKind.q1(), BOX_TAGS)
    u = np.random.default_rng(3).normal(size=(144, 2))
    p = np.arange(144.0)
    path = tmp_path / "m.vtk"
    write_snapshot(mesh, u, p, path)
    d = _read_vtk(path)
    assert d["points"].shape == (144, 3)
    assert d["cells"].shape == (121, 4)
    assert set(d["types"]) == {9}
    np.testing.assert_array_equal(d["points"][:, :2], mesh.ctrl)
    np.testing.assert_array_equal(d["vel"][:, :2], u)
    np.testing.assert_array_equal(d["pres"], p)


def test_snapshot_nurbs_cells_follow_knot_spans(tmp_path):
    mesh = build_mesh(1.0, 1.0, 12, 12, BasisKind.nurbs(2), BOX_TAGS)
    path = tmp_path / "m.vtk"
    write_snapshot(mesh, np.zeros((144, 2)), np.zeros(144), path)
    d = _read_vtk(path)
    assert len(d["cells"]) == 100
    assert len(d["points"]) == 121


def test_snapshot_subsample_refines_each_span(tmp_path):
    mesh = build_mesh(1.0, 1.0, 8, 8, BasisKind.nurbs(2), BOX_TAGS)
    path = tmp_path / "m.vtk"
    write_snapshot(mesh, np.zeros((64, 2)), np.zeros(64), path, subsample=2)
    d = _read_vtk(path)
    assert len(d["points"]) == 13 * 13
    assert len(d["cells"]) == 12 * 12
    with pytest.raises(ConfigError):
        write_snapshot(mesh, np.zeros((64, 2)), np.zeros(64), path,
                       subsample=0)


def test_snapshot_quads_are_positively_oriented(tmp_path):
    mesh = build_mesh(2.0, 1.0, 8, 6, BasisKind.nurbs(2), BOX_TAGS)
    n = mesh.patch.n_points
    path = tmp_path / "m.vtk"
    write_snapshot(mesh, np.zeros((n, 2)), np.zeros(n), path)
    d = _read_vtk(path)
    quads = d["points"][d["cells"], :2]              # (m, 4, 2)
    x, y = quads[..., 0], quads[..., 1]
    area = 0.5 * np.sum(x * np.roll(y, -1, axis=1)
                        - np.roll(x, -1, axis=1) * y, axis=1)
    assert np.all(area > 0.0)


def test_snapshot_fields_share_the_geometry_evaluation(tmp_path):
    # velocity control values set to the positions themselves must come
    # back as the point coordinates, whatever the basis
    mesh = build_mesh(1.0, 1.0, 9, 7, BasisKind.nurbs(3), BOX_TAGS)
    path = tmp_path / "m.vtk"
    write_snapshot(mesh, mesh.ctrl, mesh.ctrl[:, 1], path, subsample=3)
    d = _read_vtk(path)
    np.testing.assert_allclose(d["vel"][:, :2], d["points"][:, :2],
                               atol=1e-14)
    np.testing.assert_allclose(d["pres"], d["points"][:, 1], atol=1e-14)


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_is_bitwise(tmp_path, slosh_run):
    cfg, st, rec = slosh_run
    path = tmp_path / "ck.bin"
    save_checkpoint(path, st, rec)
    st2 = build_stepper(cfg)
    rec2 = RunRecord()
    load_checkpoint(path, st2, rec2)
    np.testing.assert_array_equal(st2.mesh.ctrl, st.mesh.ctrl)
    np.testing.assert_array_equal(st2.u, st.u)
    np.testing.assert_array_equal(st2.p, st.p)
    np.testing.assert_array_equal(st2.surface_guess, st.surface_guess)
    assert st2.t == st.t and st2.slab_index == st.slab_index
    assert rec2.times == rec.times
    assert rec2.mass == rec.mass
    assert rec2.mass_err == rec.mass_err
    assert rec2.corner_x == rec.corner_x
    assert rec2.quality == rec.quality
    assert rec2.flux_err == rec.flux_err and rec2.status == rec.status
    assert len(rec2.surface_slabs) == len(rec.surface_slabs)
    for a, b in zip(rec2.surface_slabs, rec.surface_slabs):
        assert a.t0 == b.t0 and a.dt == b.dt
        np.testing.assert_array_equal(a.lower_top, b.lower_top)
        np.testing.assert_array_equal(a.upper_top, b.upper_top)
        np.testing.assert_array_equal(a.u_top, b.u_top)


def test_resume_reproduces_full_run_rows(tmp_path, slosh_run):
    cfg, st, rec = slosh_run
    path = tmp_path / "ck.bin"
    save_checkpoint(path, st, rec)

    full_cfg = slosh_config(slabs=5)
    full = build_stepper(full_cfg)
    rec_full = march(full, full_cfg.t_max)
    csv_full = tmp_path / "full.csv"
    write_timeseries(rec_full, csv_full)

    st2 = build_stepper(cfg)
    rec2 = RunRecord()
    load_checkpoint(path, st2, rec2)
    rec2 = march(st2, full_cfg.t_max, record=rec2)
    csv_resumed = tmp_path / "resumed.csv"
    write_timeseries(rec2, csv_resumed)
    assert csv_resumed.read_bytes() == csv_full.read_bytes()


def test_checkpoint_rejects_mismatched_target(tmp_path, slosh_run):
    cfg, st, rec = slosh_run
    path = tmp_path / "ck.bin"
    save_checkpoint(path, st, rec)
    other = build_stepper(slosh_config(n=9))
    with pytest.raises(CheckpointError, match="n_u"):
        load_checkpoint(path, other, RunRecord())
    q1 = build_stepper(slosh_config(basis=BasisKind.q1()))
    with pytest.raises(CheckpointError, match="basis|degree"):
        load_checkpoint(path, q1, RunRecord())


def test_checkpoint_rejects_damaged_files(tmp_path, slosh_run):
    cfg, st, rec = slosh_run
    path = tmp_path / "ck.bin"
    save_checkpoint(path, st, rec)
    blob = path.read_bytes()
    target = build_stepper(cfg)

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(bad, target, RunRecord())

    bad.write_bytes(blob[:-40])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad, target, RunRecord())

    bad.write_bytes(blob + b"x")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad, target, RunRecord())

    import struct
    bad.write_bytes(blob[:8] + struct.pack("<I", 99) + blob[12:])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(bad, target, RunRecord())


# --- config files and flag merging -------------------------------------------

def test_config_file_tracks_line_numbers(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# a comment\ncase.name = sloshing\n\ncase.dt=0.1 # inline\n")
    vals = read_config_file(f)
    assert vals["case.name"] == ("sloshing", 2)
    assert vals["case.dt"] == ("0.1", 4)


def test_config_file_rejects_bare_words(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("case.name = sloshing\nwhoops\n")
    with pytest.raises(ConfigError, match=":2"):
        read_config_file(f)


def test_unknown_key_names_key_and_line(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("case.name = sloshing\ncase.nme = oops\n")
    with pytest.raises(ConfigError, match=r"case\.nme.*:2"):
        parse_config(f)


def test_malformed_value_names_key_and_source(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("case.name = sloshing\ncase.dt = fast\n")
    with pytest.raises(ConfigError, match=r"case\.dt.*:2"):
        parse_config(f)
    with pytest.raises(ConfigError, match=r"case\.mesh.*command line"):
        parse_config(None, {"case.name": "sloshing", "case.mesh": "12"})


def test_sloshing_defaults_fill_in():
    cfg = parse_config(None, {"case.name": "sloshing"})
    assert (cfg.n_u, cfg.n_v) == (12, 12)
    assert cfg.dt == 0.2 and cfg.t_max == 50.0
    assert cfg.basis == BasisKind.nurbs(2)
    assert cfg.scheme.kind == "pde-directional"
    assert cfg.fluid.rho == 1000.0 and cfg.fluid.mu == 0.01
    assert cfg.fluid.body_force == (0.0, -1.0)
    assert cfg.fluid.include_advection
    assert cfg.coupling == "surface-monolithic"


def test_dieswell_defaults_fill_in():
    cfg = parse_config(None, {"case.name": "dieswell"})
    assert (cfg.n_u, cfg.n_v) == (86, 16)
    assert cfg.dt == 0.015625 and cfg.t_max == 15.0
    assert cfg.fluid.rho == 1.0 and cfg.fluid.mu == 1e5
    assert not cfg.fluid.include_advection
    assert cfg.case.width == 60.0 and cfg.case.height == 10.0


def test_flags_override_file_values(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("case.name = sloshing\ncase.dt = 0.2\nfluid.mu = 0.5\n")
    cfg = parse_config(f, {"case.dt": "0.05", "case.mesh": None})
    assert cfg.dt == 0.05
    assert cfg.fluid.mu == 0.5


def test_benchmark_invocations_are_expressible():
    coarse = parse_config(None, {
        "case.name": "sloshing", "case.basis": "nurbs2",
        "case.mesh": "12x12", "case.dt": "0.2",
        "case.scheme": "pde-directional"})
    st = build_stepper(coarse)
    assert st.mesh.patch.n_points == 144
    assert st.mesh.n_elements == 100

    fem = parse_config(None, {
        "case.name": "dieswell", "case.basis": "q1",
        "case.mesh": "86x16", "case.scheme": "pde-normal"})
    st = build_stepper(fem)
    assert st.mesh.n_elements == 85 * 15
    top = st.mesh.tags["top"]
    assert list(top).count("noslip") == 28      # faces centered below x=20
    assert top[0] == "noslip" and top[-1] == "free"
    # inflow profile: parabolic, peak 10 at the symmetry line
    assert st.inflow_profile((0.0, 0.0)) == (10.0, 0.0)
    assert st.inflow_profile((0.0, 10.0)) == (0.0, 0.0)


def test_scheme_basis_compatibility():
    with pytest.raises(ConfigError):
        parse_config(None, {"case.name": "sloshing",
                            "case.scheme": "node-normal",
                            "case.basis": "nurbs2"})
    with pytest.raises(ConfigError):
        parse_config(None, {"case.name": "sloshing",
                            "case.scheme": "greville", "case.basis": "q1"})
    ok = parse_config(None, {"case.name": "sloshing",
                             "case.scheme": "node-normal",
                             "case.basis": "q1"})
    assert ok.scheme.kind == "node-normal"
    ok = parse_config(None, {"case.name": "sloshing",
                             "case.scheme": "greville",
                             "case.basis": "nurbs3"})
    assert ok.basis.degree == 3


def test_config_rejects_nonsense():
    with pytest.raises(ConfigError, match="case"):
        parse_config(None, {})
    with pytest.raises(ConfigError, match="waterfall"):
        parse_config(None, {"case.name": "waterfall"})
    for key, val in (("case.basis", "nurbsX"), ("case.mesh", "12"),
                     ("case.direction", "1"), ("fluid.advection", "maybe"),
                     ("case.dt", "-0.2"), ("case.coupling", "psychic")):
        with pytest.raises(ConfigError):
            parse_config(None, {"case.name": "sloshing", key: val})


# --- command line -------------------------------------------------------------

def run_flags(tmp_path, **extra):
    flags = {"--case": "sloshing", "--basis": "nurbs2", "--mesh": "8x8",
             "--dt": "0.2", "--tmax": "0.4", "--scheme": "pde-directional",
             "--out": str(tmp_path)}
    flags.update(extra)
    argv = []
    for k, v in flags.items():
        argv.extend([k, v])
    return argv


def test_cli_run_writes_all_artifacts(tmp_path):
    ck = tmp_path / "ck.bin"
    rc = main(run_flags(tmp_path, **{"--snapshot-every": "2",
                                     "--checkpoint": str(ck)}))
    assert rc == 0
    csv = (tmp_path / "timeseries.csv").read_text().splitlines()
    assert len(csv) == 5                      # header, 3 rows, trailer
    assert csv[-1].endswith("status=completed")
    assert (tmp_path / "snapshot_000000.vtk").exists()
    assert (tmp_path / "snapshot_000002.vtk").exists()
    assert ck.exists()


def test_cli_repeat_runs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(run_flags(a)) == 0
    assert main(run_flags(b)) == 0
    assert (a / "timeseries.csv").read_bytes() == \
        (b / "timeseries.csv").read_bytes()


def test_cli_resume_continues_a_checkpoint(tmp_path):
    ck = tmp_path / "ck.bin"
    assert main(run_flags(tmp_path / "p1", **{"--tmax": "0.2",
                                              "--checkpoint": str(ck)})) == 0
    assert main(run_flags(tmp_path / "p2", **{"--resume": str(ck)})) == 0
    rows = (tmp_path / "p2" / "timeseries.csv").read_text().splitlines()
    assert len(rows) == 5                     # t = 0, 0.2, 0.4 rows


def test_cli_config_errors_exit_4(tmp_path, capsys):
    assert main(["--case", "sloshing", "--scheme", "node-normal",
                 "--basis", "nurbs2"]) == 4
    assert main([]) == 4
    assert main(["--frobnicate"]) == 4
    assert main(["--config", str(tmp_path / "missing.cfg")]) == 4
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"junk")
    assert main(run_flags(tmp_path, **{"--resume": str(bad)})) == 4
    assert "config error" in capsys.readouterr().err
