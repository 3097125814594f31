"""Run artifacts: CSV time series, mesh snapshots, checkpoints, config files.

Everything here is deterministic: identical state produces identical bytes,
so repeat runs can be compared with a plain diff.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .diagnostics import RunRecord, SurfaceSlabState
from .errors import CheckpointError, ConfigError, DomainError
from .mesh import SpatialMesh
from .splines import basis_matrix

CSV_HEADER = "t,mass,mass_error,corner_x,corner_y,min_quality"


def _fmt(x) -> str:
    return "%.17g" % x


# ---------------------------------------------------------------------------
# time series
# ---------------------------------------------------------------------------

def write_timeseries(record: RunRecord, path) -> None:
    """One CSV row per recorded time level, then a trailing comment line
    carrying the run-level flux error and exit status."""
    if not record.times:
        raise DomainError("run record is empty")
    lines = [CSV_HEADER]
    for k in range(len(record.times)):
        row = (record.times[k], record.mass[k], record.mass_err[k],
               record.corner_x[k], record.corner_y[k], record.quality[k])
        lines.append(",".join(_fmt(v) for v in row))
    lines.append(f"# flux_error={_fmt(record.flux_err)} status={record.status}")
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# mesh snapshots (legacy ASCII unstructured grid)
# ---------------------------------------------------------------------------

def _grid_params(kv, s: int) -> np.ndarray:
    """Knot-span breakpoints with each span subdivided s times."""
    spans = kv.spans()
    out = [spans[0][1]]
    for _, lo, hi in spans:
        out.extend(np.linspace(lo, hi, s + 1)[1:])
    return np.asarray(out)


def write_snapshot(mesh: SpatialMesh, u: np.ndarray, p: np.ndarray, path,
                   subsample: int = 1) -> None:
    """Write one time level as a legacy ASCII unstructured-grid file.

    The patch is sampled on the knot-span grid (each span subdivided
    subsample x subsample), so a Q1 mesh emits its nodes and elements
    verbatim while spline elements appear as the images of their
    parametric corners, refined as requested. Point data: velocity
    vectors and pressure scalars evaluated at the same points.
    """
    if subsample < 1:
        raise ConfigError("subsample must be at least 1")
    patch = mesh.patch
    Au = basis_matrix(patch.kv_u, _grid_params(patch.kv_u, subsample))
    Av = basis_matrix(patch.kv_v, _grid_params(patch.kv_v, subsample))

    def ev(f):
        return Au @ f.reshape(patch.n_u, patch.n_v) @ Av.T

    X, Y = ev(mesh.ctrl[:, 0]), ev(mesh.ctrl[:, 1])
    UX, UY = ev(np.asarray(u)[:, 0]), ev(np.asarray(u)[:, 1])
    P = ev(np.asarray(p))
    gu, gv = X.shape

    # grid point id = iu * gv + jv; one quad per sub-cell, corners CCW
    a = np.arange(gu - 1)[:, None] * gv + np.arange(gv - 1)[None, :]
    cells = np.stack([a, a + gv, a + gv + 1, a + 1], axis=-1).reshape(-1, 4)

    n_pts = gu * gv
    out = ["# vtk DataFile Version 3.0", "free-surface flow snapshot",
           "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {n_pts} double"]
    out.extend(f"{_fmt(x)} {_fmt(y)} 0"
               for x, y in zip(X.ravel(), Y.ravel()))
    out.append(f"CELLS {len(cells)} {5 * len(cells)}")
    out.extend("4 %d %d %d %d" % tuple(c) for c in cells)
    out.append(f"CELL_TYPES {len(cells)}")
    out.extend("9" for _ in range(len(cells)))
    out.append(f"POINT_DATA {n_pts}")
    out.append("VECTORS velocity double")
    out.extend(f"{_fmt(x)} {_fmt(y)} 0"
               for x, y in zip(UX.ravel(), UY.ravel()))
    out.append("SCALARS pressure double 1")
    out.append("LOOKUP_TABLE default")
    out.extend(_fmt(v) for v in P.ravel())
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"SLBFCKPT"
_VERSION = 1


def save_checkpoint(path, stepper, record: RunRecord) -> None:
    """Serialize the marching state so a run can resume bit-identically.

    Captures the current geometry and fields, the per-slab diagnostics
    recorded so far, the surface history behind the flux error, and the
    warm-start vector (it steers the Newton path, so dropping it would
    change subsequent iterates).
    """
    patch = stepper.mesh.patch
    n_u = patch.n_u
    slabs = record.surface_slabs
    guess = stepper.surface_guess
    arrays = {
        "ctrl": stepper.mesh.ctrl,
        "u": stepper.u,
        "p": stepper.p,
        "rows": np.array([record.times, record.mass, record.mass_err,
                          record.corner_x, record.corner_y,
                          record.quality]).T.reshape(-1, 6),
        "slab_t0dt": np.array([[s.t0, s.dt] for s in slabs]).reshape(-1, 2),
        "slab_lower": (np.stack([s.lower_top for s in slabs])
                       if slabs else np.empty((0, n_u, 2))),
        "slab_upper": (np.stack([s.upper_top for s in slabs])
                       if slabs else np.empty((0, n_u, 2))),
        "slab_u": (np.stack([s.u_top for s in slabs])
                   if slabs else np.empty((0, 2, 2, n_u))),
        "surface_guess": np.empty(0) if guess is None else guess,
    }
    arrays = {k: np.ascontiguousarray(v, dtype=float)
              for k, v in arrays.items()}
    meta = {
        "basis": patch.basis.kind,
        "degree": patch.basis.degree,
        "n_u": n_u,
        "n_v": patch.n_v,
        "t": stepper.t,
        "slab_index": stepper.slab_index,
        "flux_err": record.flux_err,
        "status": record.status,
        "arrays": [[k, str(v.dtype), list(v.shape)]
                   for k, v in arrays.items()],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(blob)))
        f.write(blob)
        for name, _, _ in meta["arrays"]:
            f.write(arrays[name].tobytes())


def load_checkpoint(path, stepper, record: RunRecord) -> None:
    """Restore a stepper and record in place from a saved checkpoint.

    The stepper must already be configured for the same discretization;
    a basis or resolution mismatch is rejected rather than reinterpreted.
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise CheckpointError("not a checkpoint file")
    if len(data) < 20:
        raise CheckpointError("checkpoint header truncated")
    version, blob_len = struct.unpack_from("<IQ", data, 8)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(data[20:20 + blob_len])
    except ValueError as e:
        raise CheckpointError("corrupt checkpoint metadata") from e

    patch = stepper.mesh.patch
    for key, want in (("basis", patch.basis.kind),
                      ("degree", patch.basis.degree),
                      ("n_u", patch.n_u), ("n_v", patch.n_v)):
        if meta[key] != want:
            raise CheckpointError(
                f"checkpoint {key} is {meta[key]!r} but the configured "
                f"run has {want!r}")

    off = 20 + blob_len
    arrays = {}
    for name, dtype, shape in meta["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        dt = np.dtype(dtype)
        if off + count * dt.itemsize > len(data):
            raise CheckpointError("checkpoint payload truncated")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
        arrays[name] = arr.reshape(shape).copy()
        off += arr.nbytes
    if off != len(data):
        raise CheckpointError("checkpoint has trailing bytes")

    stepper.mesh = stepper.mesh.with_ctrl(arrays["ctrl"])
    stepper.u = arrays["u"]
    stepper.p = arrays["p"]
    stepper.t = float(meta["t"])
    stepper.slab_index = int(meta["slab_index"])
    guess = arrays["surface_guess"]
    stepper.surface_guess = guess if guess.size else None

    rows = arrays["rows"]
    record.times = rows[:, 0].tolist()
    record.mass = rows[:, 1].tolist()
    record.mass_err = rows[:, 2].tolist()
    record.corner_x = rows[:, 3].tolist()
    record.corner_y = rows[:, 4].tolist()
    record.quality = rows[:, 5].tolist()
    record.surface_slabs = [
        SurfaceSlabState(t0=t0, dt=dt, lower_top=lo, upper_top=up, u_top=ut)
        for (t0, dt), lo, up, ut in zip(
            arrays["slab_t0dt"], arrays["slab_lower"],
            arrays["slab_upper"], arrays["slab_u"])]
    record.flux_err = float(meta["flux_err"])
    record.status = meta["status"]


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def read_config_file(path) -> dict[str, tuple[str, int]]:
    """Flat key=value pairs, '#' comments; returns key -> (value, line).

    Line numbers ride along so that a key rejected later (unknown name,
    malformed value) can be reported against its place in the file.
    """
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = (value.strip(), lineno)
    return out
