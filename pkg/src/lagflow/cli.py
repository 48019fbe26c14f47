"""Command-line front end: ``lagflow run | blowup | verify | plot``.

Exit codes: 0 ok, 1 check failure, 2 usage or config error, 3 numerical
failure, 4 missing prerequisite (no singularity report).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

import jsonschema
import numpy as np

from . import blowup, flow, mesh, monitors, serialize, synthetic, verify

log = logging.getLogger("lagflow")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISSING = 0, 1, 2, 3, 4

SYNTHETIC = {"plane_union", "duplicated_plane"}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scenario"],
    "properties": {
        "scenario": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"type": "string", "enum": sorted(set(mesh.SCENARIOS) | SYNTHETIC)},
                "params": {"type": "object"},
            },
        },
        "until": {"anyOf": [{"const": "singularity"}, {"type": "number", "minimum": 0}]},
        "cfl": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "method": {"enum": ["euler", "rk2"]},
        "order": {"enum": [2, 4]},
        "snapshot_every": {"type": "integer", "minimum": 1},
        "curvature_gain": {"type": ["number", "null"], "exclusiveMinimum": 1},
        "max_steps": {"type": ["integer", "null"], "minimum": 0},
        "lambda_max": {"type": "integer", "minimum": 0, "maximum": 8},
        "R": {"type": "number", "exclusiveMinimum": 0},
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "required": ["X0", "t0"],
            "properties": {
                "X0": {"type": "array", "items": {"type": "number"}},
                "t0": {"type": "number"},
                "cutoff_radius": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "output": {"type": "string"},
        "seed": {"type": "integer"},
    },
}

VERIFY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "resolutions": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "integer", "minimum": 8} for k in verify.DEFAULT_CONFIG["resolutions"]},
        },
        "cfl": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "seed": {"type": "integer"},
        "tolerances": {"type": "object", "additionalProperties": {"type": "number"}},
        "suites": {"type": "array", "items": {"type": "string"}},
    },
}

PLOT_KINDS = {
    "timeseries": ("t", "max_A_sq", "volume", "min_cos_theta"),
    "type_indicator": ("t", "indicator"),
    "density_ratio": ("lambda", "t", "ratio"),
    "psi": ("t", "psi"),
}


class UsageError(Exception):
    pass


def _load_config(path: Optional[str], schema: dict) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"config {path} is invalid: {exc.message}") from exc
    return cfg


# ---------------------------------------------------------------------------
# run


def _controls(cfg: dict) -> flow.FlowControls:
    keys = ("cfl", "method", "order", "snapshot_every", "curvature_gain", "max_steps")
    return flow.FlowControls(**{k: cfg[k] for k in keys if k in cfg})


def _run_synthetic(cfg: dict, out: Path, seed: int) -> int:
    name = cfg["scenario"]["name"]
    params = dict(cfg["scenario"].get("params", {}))
    if name == "plane_union":
        theta0 = float(params.pop("theta0", 0.8))
        cloud = synthetic.two_plane_union(synthetic.jprime_lagrangian_pair(theta0), **params)
    else:
        cloud = synthetic.duplicated_plane(**params)
    out.mkdir(parents=True, exist_ok=True)
    serialize.cloud_to_file(cloud, out / "cloud.json")
    n = cloud.n
    summary = {
        "format_version": serialize.FORMAT_VERSION,
        "scenario": cfg["scenario"],
        "synthetic": True,
        "termination": "static",
        "steps": 0,
        "seed": seed,
        "singularity_report": {"estimated_T": 0.0, "X0": [0.0] * (2 * n), "reliable": True, "note": "static cone"},
        "estimated_T": 0.0,
        "X0": [0.0] * (2 * n),
    }
    serialize._dump(out / "summary.json", summary)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args.config, RUN_SCHEMA)
    if not cfg:
        raise UsageError("run needs --config")
    out = Path(args.out or cfg.get("output") or "lagflow_out")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    name = cfg["scenario"]["name"]
    if name in SYNTHETIC:
        return _run_synthetic(cfg, out, seed)
    try:
        im = mesh.build_scenario(name, **cfg["scenario"].get("params", {}))
        controls = _controls(cfg)
    except (mesh.ScenarioError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        trace = flow.run(im, until=cfg.get("until", "singularity"), controls=controls, scenario=cfg["scenario"])
    except (flow.FlowError, mesh.GeometryError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    extra = {"seed": seed}
    if trace.singularity_report is not None:
        cls = flow.classify_type(trace)
        extra["type"] = {k: cls[k] for k in ("type", "plateau", "oscillation", "trailing_sup", "max_deviation")}
        serialize.write_csv(out / "type_indicator.csv", ("t", "indicator"), zip(cls["t"], cls["indicator"]))
    if "kernel" in cfg:
        k = cfg["kernel"]
        spec = monitors.KernelSpec(tuple(k["X0"]), k["t0"], k.get("cutoff_radius"))
        rep = monitors.psi_monotonicity_report(trace, spec)
        rows = zip(rep.times, rep.psi, rep.rate, rep.dissipation)
        serialize.write_csv(out / "psi.csv", ("t", "psi", "rate", "dissipation"), rows)
        extra["psi"] = {"nonincreasing": rep.nonincreasing, "refusals": rep.refusals}
    serialize.write_trace(trace, out, extra)
    log.info("wrote %s (%s, %d steps)", out, trace.termination, trace.step_log.shape[0])
    return EXIT_OK


# ---------------------------------------------------------------------------
# blowup


def _scaled_cloud(cloud: blowup.RescaledCloud, lam: float) -> blowup.RescaledCloud:
    """A static cone through 0 rescaled by lam (positions and area elements)."""
    return blowup.RescaledCloud(
        lam * cloud.points,
        lam**cloud.n * cloud.weights,
        cloud.tangent,
        cloud.theta,
        cloud.cos_theta,
        np.zeros_like(cloud.points),
        np.zeros_like(cloud.points),
        np.zeros(cloud.size),
        scale=lam,
        kind="lambda",
        source=dict(cloud.source),
    )


def _planes_payload(cloud) -> dict:
    cluster = blowup.fit_planes(cloud)
    body = {"format_version": serialize.FORMAT_VERSION}
    body.update(cluster.to_dict())
    if cloud.n == 2:
        wit = blowup.complex_structure_witness(cluster)
        body["witness"] = {k: v for k, v in wit.items()}
    body["plane_like"] = cluster.plane_like
    body["max_residual"] = cluster.max_residual if cluster.planes else None
    return body


def _blowup_synthetic(src: Path, out: Path, K: int, R: float) -> int:
    cloud = serialize.cloud_from_file(src / "cloud.json")
    n = cloud.n
    dens_rows, decay_rows = [], []
    last = cloud
    for k in range(K + 1):
        lam = 2.0**k
        last = _scaled_cloud(cloud, lam)
        serialize.cloud_to_file(last, out / "blowup" / f"lambda_{k}.json", {"lambda": lam})
        dens_rows.append((lam, 0.0, last.ball_mass(np.zeros(2 * n), R) / R**n))
        decay_rows.append((lam, 0.0, 0.0, 0.0, ""))
    serialize._dump(out / "planes.json", _planes_payload(last))
    serialize.write_csv(out / "density.csv", ("lambda", "t", "ratio"), dens_rows)
    serialize.write_csv(out / "decay.csv", ("lambda", "grad_cos", "H", "perp", "note"), decay_rows)
    return EXIT_OK


def _common_window(trace, lambdas):
    lo, hi = -math.inf, math.inf
    for lam in lambdas:
        a, b = blowup.covered_window(trace, lam)
        lo, hi = max(lo, a), min(hi, b)
    return lo, hi


def _resolution_ok(cloud: blowup.RescaledCloud, R: float) -> bool:
    im = cloud.immersion
    inside = np.linalg.norm(im.positions, axis=-1) <= R
    if not np.any(inside):
        return True
    worst = 0.0
    for axis in range(im.n):
        lin = im.linear_part()
        per = im.positions - lin
        step = np.roll(per, -1, axis=axis) - per + im.wraps[axis] * (im.spacing[axis] / (2 * math.pi))
        edge = np.linalg.norm(step, axis=-1)
        worst = max(worst, float(np.max(edge[inside])))
    return worst < 0.1


def cmd_blowup(args) -> int:
    src = Path(args.trace)
    out = Path(args.out) if args.out else src
    cfg = _load_config(args.config, RUN_SCHEMA) if args.config else {}
    K = args.lambda_max if args.lambda_max is not None else cfg.get("lambda_max", 3)
    R = float(cfg.get("R", 2.0))
    try:
        summary = serialize.load_summary(src)
    except (OSError, serialize.FormatError) as exc:
        raise UsageError(f"cannot read trace directory {src}: {exc}") from exc
    if summary.get("singularity_report") is None:
        log.error("%s has no singularity report (termination: %s)", src, summary.get("termination"))
        return EXIT_MISSING
    if summary.get("synthetic"):
        return _blowup_synthetic(src, out, K, R)
    trace = serialize.load_trace(src)
    if trace.singularity_report is None:
        return EXIT_MISSING
    lambdas = [2.0**k for k in range(K + 1)]
    lo, hi = _common_window(trace, lambdas)
    while len(lambdas) > 1 and not lo < hi:
        lambdas.pop()
        lo, hi = _common_window(trace, lambdas)
    t_mid = 0.5 * (lo + hi)
    kept = []
    for k, lam in enumerate(lambdas):
        cloud = blowup.lambda_rescale(trace, lam, t_mid)
        if kept and not _resolution_ok(cloud, R):
            log.info("lambda %g under-resolved inside B_%g; ladder capped", lam, R)
            break
        kept.append(lam)
        serialize.cloud_to_file(cloud, out / "blowup" / f"lambda_{k}.json", {"lambda": lam, "t": t_mid})
        last = cloud
    serialize._dump(out / "planes.json", _planes_payload(last))
    times = list(np.linspace(lo, hi, 5)[1:-1])
    vd = monitors.volume_density_bound(trace, R=R, lambdas=kept, times=times)
    rows = [(lam, t, vd.ratios[i, j]) for i, lam in enumerate(kept) for j, t in enumerate(times)]
    serialize.write_csv(out / "density.csv", ("lambda", "t", "ratio"), rows)
    dec = blowup.integral_decay_report(trace, kept, R, times[0], times[-1], n_times=5)
    serialize.write_csv(
        out / "decay.csv",
        ("lambda", "grad_cos", "H", "perp", "note"),
        [(r["lambda"], r["grad_cos"], r["H"], r["perp"], r["note"]) for r in dec.rows()],
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    cfg = _load_config(args.config, VERIFY_SCHEMA)
    suites = args.suite or cfg.pop("suites", None) or list(verify.SUITES)
    cfg.pop("suites", None)
    if args.seed is not None:
        cfg["seed"] = args.seed
    unknown = [s for s in suites if s not in verify.SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; choose from {list(verify.SUITES)}")
    results = verify.run_suites(suites, cfg)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(verify.report_json(results))
    failed = [r for r in results if r.status == "fail"]
    for r in results:
        log.info("%-6s %s value=%.3g bound=%.3g", r.status, r.check_id, r.value, r.bound)
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    kind = args.kind
    need = PLOT_KINDS[kind]
    try:
        cols = serialize.numeric_columns(args.csv)
    except serialize.FormatError as exc:
        raise UsageError(str(exc)) from exc
    missing = [c for c in need if c not in cols]
    if missing or not cols or len(cols[need[0]]) == 0:
        raise UsageError(f"{args.csv}: malformed for kind {kind!r} (missing {missing or 'rows'})")
    plt.rcParams["svg.hashsalt"] = "lagflow"
    plt.rcParams["svg.fonttype"] = "none"
    if kind == "timeseries":
        fig, axes = plt.subplots(3, 1, figsize=(6, 7), sharex=True)
        t = cols["t"]
        axes[0].semilogy(t, cols["max_A_sq"])
        axes[0].set_ylabel("max |A|^2")
        axes[1].plot(t, cols["volume"])
        axes[1].set_ylabel("volume")
        axes[2].plot(t, cols["min_cos_theta"])
        axes[2].set_ylabel("min cos theta")
        axes[2].set_xlabel("t")
    else:
        fig, ax = plt.subplots(figsize=(6, 4))
        if kind == "density_ratio":
            for lam in sorted(set(cols["lambda"])):
                sel = cols["lambda"] == lam
                ax.plot(cols["t"][sel], cols["ratio"][sel], marker="o", label=f"lambda = {lam:g}")
            ax.set_xlabel("rescaled time")
            ax.set_ylabel("R^-n area in B_R")
            ax.legend()
        else:
            ax.plot(cols["t"], cols[need[1]])
            ax.set_xlabel("t")
            ax.set_ylabel("(T - t) max |A|^2" if kind == "type_indicator" else "Psi")
    fig.tight_layout()
    path = Path(args.csv)
    target = path.with_name(f"{path.stem}_{kind}.svg")
    fig.savefig(target, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    log.info("wrote %s", target)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lagflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="integrate a scenario and write its trace")
    r.add_argument("--config", required=True, help="run config (JSON)")
    r.add_argument("--out", help="output directory")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("blowup", help="rescale a singular trace and fit its tangent cone")
    b.add_argument("trace", help="directory written by 'lagflow run'")
    b.add_argument("--out", help="output directory (default: the trace directory)")
    b.add_argument("--config", help="run config supplying lambda_max and R")
    b.add_argument("--lambda-max", dest="lambda_max", type=int, help="largest k in lambda = 2^k")
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_blowup)

    v = sub.add_parser("verify", help="run property suites and write report.json")
    v.add_argument("--suite", action="append", help=f"suite name, repeatable (default all: {', '.join(verify.SUITES)})")
    v.add_argument("--config", help="verify config (JSON): resolutions, tolerances, seed")
    v.add_argument("--out", help="output directory for report.json")
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_verify)

    pl = sub.add_parser("plot", help="render a CSV series as SVG")
    pl.add_argument("csv")
    pl.add_argument("--kind", required=True, choices=sorted(PLOT_KINDS))
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lagflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
