"""Command-line runner: one benchmark run per invocation.

Exit codes: 0 run completed, 2 mesh tangled, 3 Newton diverged,
4 configuration problem.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .cases import CASES, build_stepper, parse_config
from .diagnostics import RunRecord
from .errors import CheckpointError, ConfigError
from .io import load_checkpoint, save_checkpoint, write_snapshot, \
    write_timeseries
from .solver import march

EXIT_BY_STATUS = {"completed": 0, "tangled": 2, "diverged": 3}


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags, which collides with the
    # tangled-mesh code; route its failures through the config path instead
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="slabflow",
                description="Space-time free-surface flow benchmarks.")
    p.add_argument("--case", help=f"one of {sorted(CASES)}")
    p.add_argument("--basis", help="q1, nurbs2, nurbs3, ...")
    p.add_argument("--mesh", metavar="NxM",
                   help="control grid resolution, e.g. 12x12")
    p.add_argument("--dt", help="time-slab length")
    p.add_argument("--tmax", help="end time")
    p.add_argument("--scheme",
                   help="node-normal, greville, pde-equal, pde-normal "
                        "or pde-directional")
    p.add_argument("--direction", metavar="DX,DY",
                   help="displacement direction for pde-directional")
    p.add_argument("--coupling",
                   help="monolithic, surface-monolithic or staggered")
    p.add_argument("--config", metavar="PATH", help="key=value config file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--snapshot-every", metavar="N",
                   help="write a mesh snapshot every N slabs")
    p.add_argument("--subsample", metavar="S", type=int, default=1,
                   help="snapshot cells per element edge (default 1)")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="keep a resumable checkpoint updated at this path")
    p.add_argument("--resume", metavar="PATH",
                   help="continue from a checkpoint written earlier")
    return p


def _overrides(args) -> dict:
    return {
        "case.name": args.case,
        "case.basis": args.basis,
        "case.mesh": args.mesh,
        "case.dt": args.dt,
        "case.tmax": args.tmax,
        "case.scheme": args.scheme,
        "case.direction": args.direction,
        "case.coupling": args.coupling,
        "case.out": args.out,
        "case.snapshot_every": args.snapshot_every,
    }


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = parse_config(args.config, _overrides(args))
        stepper = build_stepper(cfg)
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 4

    record = RunRecord()
    if args.resume:
        try:
            load_checkpoint(args.resume, stepper, record)
        except (CheckpointError, OSError) as err:
            print(f"config error: {err}", file=sys.stderr)
            return 4

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def snap(stepper):
        path = out / f"snapshot_{stepper.slab_index:06d}.vtk"
        write_snapshot(stepper.mesh, stepper.u, stepper.p, path,
                       subsample=args.subsample)

    if cfg.snapshot_every and stepper.slab_index == 0:
        snap(stepper)

    def on_slab(stepper, rec):
        if cfg.snapshot_every and \
                stepper.slab_index % cfg.snapshot_every == 0:
            snap(stepper)
        if args.checkpoint:
            save_checkpoint(args.checkpoint, stepper, rec)

    record = march(stepper, cfg.t_max, on_slab=on_slab, record=record)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, stepper, record)

    csv_path = out / "timeseries.csv"
    write_timeseries(record, csv_path)
    print(f"status={record.status} t={stepper.t:g} "
          f"slabs={stepper.slab_index} flux_error={record.flux_err:.6g} "
          f"max_mass_error={record.max_mass_error:.6g} -> {csv_path}")
    return EXIT_BY_STATUS[record.status]


if __name__ == "__main__":
    sys.exit(main())
