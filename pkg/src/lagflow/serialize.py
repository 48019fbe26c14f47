"""Reading and writing traces, clouds and tables.

JSON for structured data, CSV for time series.  Floats are written with
``repr`` precision so that a reloaded snapshot reproduces every derived
quantity bit for bit.  Every file carries ``format_version``; CSV files
carry it on a leading ``#`` comment line.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .flow import STEP_COLUMNS, FlowControls, FlowState, FlowTrace, estimate_singularity
from .mesh import AmbientSpace, Immersion

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load(path: Path) -> dict:
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {obj.get('format_version')!r}")
    return obj


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def read_csv(path) -> tuple:
    """Return (columns, rows as float arrays or strings); raise FormatError if malformed."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if ln.strip()]
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    if not lines or not lines[0].startswith("# format_version="):
        raise FormatError(f"{path}: missing format_version header")
    reader = csv.reader(lines[1:])
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError(f"{path}: no column header") from None
    rows = []
    for k, row in enumerate(reader):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {k + 1} has {len(row)} fields, expected {len(header)}")
        rows.append(row)
    return header, rows


def numeric_columns(path) -> dict:
    header, rows = read_csv(path)
    out = {}
    for j, name in enumerate(header):
        try:
            out[name] = np.array([float(r[j]) for r in rows])
        except ValueError:
            continue
    return out


# ---------------------------------------------------------------------------
# snapshots and traces


def snapshot_to_dict(state: FlowState) -> dict:
    im = state.immersion
    return {
        "format_version": FORMAT_VERSION,
        "t": state.t,
        "n": im.n,
        "grid_shape": list(im.grid_shape),
        "positions": im.positions.ravel().tolist(),
        "wraps": im.wraps.ravel().tolist(),
        "periods": list(im.ambient.periods) if im.ambient.periods else None,
        "order": state.order,
        "theta_root": state.theta_root,
    }


def snapshot_from_dict(d: dict) -> FlowState:
    n = int(d["n"])
    shape = tuple(d["grid_shape"]) + (2 * n,)
    pos = np.array(d["positions"], dtype=float).reshape(shape)
    periods = tuple(d["periods"]) if d.get("periods") else None
    im = Immersion(pos, AmbientSpace(n, periods), np.array(d["wraps"], dtype=float).reshape(n, 2 * n))
    return FlowState(float(d["t"]), im, int(d["order"]), d.get("theta_root"))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def write_trace(trace: FlowTrace, out, extra: Optional[dict] = None) -> dict:
    """Write trace.csv, snapshots/*.json and summary.json; return the summary."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "trace.csv", STEP_COLUMNS, trace.step_log.tolist())
    snapdir = out / "snapshots"
    snapdir.mkdir(exist_ok=True)
    for old in snapdir.glob("snap_*.json"):
        old.unlink()
    for k, snap in enumerate(trace.snapshots):
        _dump(snapdir / f"snap_{k:05d}.json", snapshot_to_dict(snap))
    summary = {
        "format_version": FORMAT_VERSION,
        "scenario": _jsonable(trace.scenario),
        "termination": trace.termination,
        "steps": int(trace.step_log.shape[0]),
        "final_t": float(trace.final.t),
        "snapshots": len(trace.snapshots),
        "controls": _jsonable(trace.controls.__dict__),
        "initial": _jsonable(trace.initial),
        "singularity_report": trace.singularity_report.to_dict() if trace.singularity_report else None,
    }
    if trace.singularity_report is not None:
        summary["estimated_T"] = trace.singularity_report.T
        summary["X0"] = [float(x) for x in trace.singularity_report.X0]
    if extra:
        summary.update(_jsonable(extra))
    _dump(out / "summary.json", summary)
    return summary


def load_summary(directory) -> dict:
    return _load(Path(directory) / "summary.json")


def load_trace(directory) -> FlowTrace:
    """Rebuild a FlowTrace from a run directory (the singularity report is refitted)."""
    directory = Path(directory)
    summary = load_summary(directory)
    cols = numeric_columns(directory / "trace.csv")
    if cols:
        step_log = np.stack([cols[c] for c in STEP_COLUMNS], axis=1)
    else:
        step_log = np.zeros((0, len(STEP_COLUMNS)))
    files = sorted((directory / "snapshots").glob("snap_*.json"))
    if not files:
        raise FormatError(f"{directory}: no snapshots")
    snaps = [snapshot_from_dict(_load(f)) for f in files]
    controls = FlowControls(**summary["controls"])
    trace = FlowTrace(snaps, step_log, summary["initial"], summary["termination"], controls, None, summary["scenario"])
    if summary.get("singularity_report") is not None:
        trace.singularity_report = estimate_singularity(trace)
    return trace


# ---------------------------------------------------------------------------
# clouds


def cloud_to_file(cloud, path, extra: Optional[dict] = None) -> None:
    body = {"format_version": FORMAT_VERSION}
    body.update(cloud.to_dict())
    if extra:
        body.update(_jsonable(extra))
    _dump(Path(path), body)


def cloud_from_file(path):
    from .blowup import RescaledCloud

    d = _load(Path(path))
    n = int(d["n"])
    pts = np.array(d["points"], dtype=float).reshape(-1, 2 * n)
    M = len(pts)
    theta = np.array(d["theta"], dtype=float)
    tangent = np.array(d["tangent"], dtype=float).reshape(M, n, 2 * n)
    cos = np.array(d["cos_theta"], dtype=float) if "cos_theta" in d else np.cos(theta)
    return RescaledCloud(
        pts,
        np.array(d["weights"], dtype=float),
        tangent,
        theta,
        cos,
        scale=float(d.get("scale", 1.0)),
        kind=d.get("kind", "synthetic"),
        source=d.get("source", {}),
    )

