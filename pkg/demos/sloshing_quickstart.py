"""Minimal sloshing-tank run: march a few slabs, watch mass and the corner.

A unit tank of heavy, nearly inviscid fluid starts with a cosine-shaped
surface and sloshes under gravity. The weak free-surface equations keep
the enclosed mass constant to machine precision slab after slab.

Run with:  python3 demos/sloshing_quickstart.py
"""

from pathlib import Path

from slabflow.cases import parse_config, build_stepper
from slabflow.diagnostics import RunRecord, compute_mass, mesh_quality
from slabflow.io import write_snapshot, write_timeseries
from slabflow.solver import march

cfg = parse_config(None, {
    "case.name": "sloshing",
    "case.basis": "nurbs2",
    "case.mesh": "10x10",
    "case.dt": "0.2",
    "case.tmax": "4.0",
    "case.scheme": "pde-directional",
})
stepper = build_stepper(cfg)
m0 = compute_mass(stepper.mesh, cfg.fluid.rho)
print(f"initial mass {m0:.6f}, quality {mesh_quality(stepper.mesh):.3f}")


def report(stepper, rec):
    print(f"  t={stepper.t:4.1f}  iters={stepper.last_report.iterations}  "
          f"mass_err={rec.mass_err[-1]:.3e}  "
          f"corner_y={rec.corner_y[-1]:.6f}")


record = march(stepper, cfg.t_max, on_slab=report)
print(f"status: {record.status}, worst mass error "
      f"{record.max_mass_error:.3e}, flux error {record.flux_err:.6f}")

out = Path("demo_out")
out.mkdir(exist_ok=True)
write_timeseries(record, out / "sloshing.csv")
write_snapshot(stepper.mesh, stepper.u, stepper.p,
               out / "sloshing_final.vtk", subsample=3)
print(f"wrote {out}/sloshing.csv and {out}/sloshing_final.vtk")
