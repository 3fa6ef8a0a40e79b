"""Command line interface: ``bp-scanmatch {simulate,match,benchmark,oracle-check}``.

Exit codes: 0 success, 2 configuration error, 3 degraded benchmark,
4 component failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .geometry import to_chart
from .harness import ConfigError, ExperimentConfig, ReportError
from .lidar import make_rng, save_map, scan
from .pointcloud import CloudFormatError, SourceCloud, SurfaceCloud, estimate_normals, load_cloud, save_cloud

EXIT_OK, EXIT_CONFIG, EXIT_DEGRADED, EXIT_FAILURE = 0, 2, 3, 4
SEED_ENV = "BP_SCANMATCH_SEED"


def _load(args) -> ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.default_config()
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from exc
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    if getattr(args, "methods", None):
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        cfg = cfg.with_overrides(methods=methods)
    return cfg


def cmd_simulate(args) -> int:
    """Scans along the first trial's stretch of road, plus ground truth."""
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    poses = cfg.trajectory()
    frames = cfg["frames_per_trial"]
    if len(poses) < frames + 1:
        raise ConfigError(f"trajectory has {len(poses)} poses, too few for {frames} frames")
    world, sensor, clutter = cfg.segment_map(), cfg.sensor_spec(), cfg.clutter_spec()
    lines = ["k,x,y,theta"]
    for k in range(frames + 1):
        cloud = scan(world, poses[k], sensor, clutter, make_rng(cfg["seed"], 0, k))
        save_cloud(cloud, out / f"scan_{k:04d}.csv")
        x, y, th = to_chart(poses[k])
        lines.append(f"{k},{x!r},{y!r},{th!r}")
    (out / "poses.csv").write_text("\n".join(lines) + "\n")
    save_map(world, out / "map.txt")
    print(f"wrote {frames + 1} scans to {out}")
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = _load(args)
    source = load_cloud(args.source)
    dest = load_cloud(args.destination)
    if isinstance(dest, SourceCloud):
        dest = estimate_normals(dest.points, float(cfg["model"]["d_th"]))
    if isinstance(source, SurfaceCloud):
        source = SourceCloud(source.points)
    from .inference import match_scans

    res = match_scans(
        source, dest, cfg.inference_config(), cfg.scan_model(), cfg.prior(), seed=cfg["seed"]
    )
    x, y, th = to_chart(res.map_pose)
    diag = {k: v for k, v in res.diagnostics.items() if k != "objective_trace"}
    doc = {
        "map_pose": {"x": x, "y": y, "theta": th},
        "log_posterior_at_map": res.log_posterior_at_map,
        "diagnostics": harness._clean(_plain(diag)),
        "association_marginals": res.association_marginals.tolist(),
    }
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "match.json").write_text(text)
        print(f"x={x:.6f} y={y:.6f} theta={th:.6f}  ->  {out / 'match.json'}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def cmd_benchmark(args) -> int:
    cfg = _load(args)
    if not args.out:
        raise ConfigError("benchmark needs --out <dir>")

    def progress(tr):
        done = [r for r in tr.records if not r.reason]
        print(f"trial {tr.trial}: {len(tr.records)} results, {len(tr.records) - len(done)} failed", file=sys.stderr)

    report = harness.run_benchmark(cfg, jobs=args.jobs, progress=progress)
    harness.emit_report(report, args.out)
    for m in report.methods:
        q = report.quantiles[m]
        print(
            f"{harness.METHOD_LABELS[m]:17s} e_trans50={_pct(q['e_trans']['50'])} e_trans95={_pct(q['e_trans']['95'])} "
            f"e_rot50={_degm(q['e_rot']['50'])} e_rot95={_degm(q['e_rot']['95'])} "
            f"failed={report.failures[m]['failed']}/{report.failures[m]['frames']}"
        )
    if report.degraded:
        print("benchmark degraded: more than 10% of frames failed for some method", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def _pct(v):
    return "nan" if v is None or math.isnan(v) else f"{100 * v:.3f}%"


def _degm(v):
    return "nan" if v is None or math.isnan(v) else f"{math.degrees(v):.4f}deg/m"


def cmd_oracle_check(args) -> int:
    from . import oracle

    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, "0") or 0)
    ok = True
    for line, passed in oracle.run_all(seed):
        print(("PASS " if passed else "FAIL ") + line)
        ok = ok and passed
    return EXIT_OK if ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bp-scanmatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False, methods=False):
        sp.add_argument("--config", help="JSON config (schema bp-scanmatch-config/1)")
        sp.add_argument("--seed", type=int, help=f"overrides the config seed and ${SEED_ENV}")
        sp.add_argument("--out", help="output directory")
        if methods:
            sp.add_argument("--methods", help="comma-separated subset of proposed,ndt,imls")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="parallel trials (default 1)")

    sp = sub.add_parser("simulate", help="simulate the scans of one trial")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("match", help="match a source cloud against a destination cloud")
    sp.add_argument("source")
    sp.add_argument("destination")
    common(sp)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("benchmark", help="Monte Carlo benchmark with drift quantiles")
    common(sp, jobs=True, methods=True)
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("oracle-check", help="compare against exact enumeration at toy sizes")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CloudFormatError, ReportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:
        print(f"component failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
