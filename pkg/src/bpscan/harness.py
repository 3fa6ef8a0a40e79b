"""
Monte Carlo benchmark: simulate a drive, match consecutive scans with every
enabled method, score the estimates against ground truth and write reports.

Configs are JSON documents tagged ``"schema": "bp-scanmatch-config/1"``.
Every key is optional; missing keys take the defaults in :data:`DEFAULTS`
and unknown keys are rejected.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import ImlsConfig, imls_match, ndt_match
from .geometry import (
    Pose,
    UndefinedMetricError,
    compose,
    rotation_error,
    scan_relative_pose,
    to_chart,
    translation_error,
)
from .inference import InferenceConfig, PosePrior, match_scans
from .lidar import (
    ClutterSpec,
    SensorSpec,
    TrajectorySpec,
    demo_map_path,
    demo_trajectory_path,
    generate_trajectory,
    load_map,
    load_waypoints,
    make_rng,
    scan,
)
from .measurement import AssociabilityModel, ClutterModel, ErrorModel, ScanModel
from .pointcloud import estimate_normals

SCHEMA = "bp-scanmatch-config/1"
REPORT_SCHEMA = "bp-scanmatch-report/1"
METHODS = ("proposed", "ndt", "imls")
METHOD_LABELS = {"proposed": "BP scan matching", "ndt": "NDT", "imls": "IMLS-style"}
QUANTILES = (50, 95)
DEGRADED_FRACTION = 0.10

DEFAULTS = {
    "schema": SCHEMA,
    "seed": 0,
    "n_mc": 100,
    "frames_per_trial": 50,
    "methods": list(METHODS),
    "map": "demo",
    "trajectory": {"waypoints": "demo", "speed": 10.0, "scan_period": 0.08},
    "sensor": {
        "angular_resolution_deg": 1.0,
        "max_range": 100.0,
        "sigma_range": 0.05,
        "sigma_bearing_deg": 0.5,
    },
    "clutter": {"lambda_na": 1.0},
    "model": {"sigma_e": 0.03, "f_a": 0.8, "lambda_na": None, "d_th": 2.0},
    "prior": {"x": [-10.0, 10.0], "y": [-10.0, 10.0], "theta_deg": [-90.0, 90.0]},
    "inference": {
        "n_p": 2000,
        "n_da": 200,
        "bp_tol": 1e-8,
        "damping": 0.0,
        "n_it": 100,
        "prune": True,
        "prune_sigmas": 9.0,
        "refine_method": "nelder-mead",
        "anneal": [30.0, 10.0, 3.0, 1.0],
        "n_starts": 4,
        "start_ranking": "coarse",
        "ranking_scale": 10.0,
        "coarse_stride": 4,
    },
    "ndt": {"cell_size": 2.0, "max_iters": 100},
    "imls": {"h": 2.0, "radius": None, "max_iters": 50},
}


class ConfigError(ValueError):
    pass


class ReportError(OSError):
    pass


def _merge(defaults, user, where=""):
    if not isinstance(user, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        path = f"{where}.{key}" if where else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], val, path)
        else:
            out[key] = val
    return out


def _number(d, key, where, lo=None, hi=None, strict_lo=False, integer=False, optional=False):
    v = d[key]
    name = f"{where}.{key}" if where else key
    if v is None and optional:
        return
    kinds = (int,) if integer else (int, float)
    if isinstance(v, bool) or not isinstance(v, kinds) or not math.isfinite(v):
        raise ConfigError(f"{name} must be a finite {'integer' if integer else 'number'}, got {v!r}")
    if lo is not None and (v <= lo if strict_lo else v < lo):
        raise ConfigError(f"{name} must be {'>' if strict_lo else '>='} {lo}, got {v!r}")
    if hi is not None and v > hi:
        raise ConfigError(f"{name} must be <= {hi}, got {v!r}")


def _interval(d, key, where):
    v = d[key]
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v) and v[0] <= v[1]):
        raise ConfigError(f"{where}.{key} must be an interval [lo, hi] with lo <= hi")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated benchmark configuration; ``data`` is the fully merged JSON
    document and ``base_dir`` resolves relative file paths."""

    data: dict
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, user: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        if user.get("schema") != SCHEMA:
            raise ConfigError(f"config schema must be {SCHEMA!r}, got {user.get('schema')!r}")
        cfg = cls(_merge(DEFAULTS, user), Path(base_dir))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        d = self.data
        _number(d, "seed", "", lo=0, integer=True)
        _number(d, "n_mc", "", lo=1, integer=True)
        _number(d, "frames_per_trial", "", lo=1, integer=True)
        methods = d["methods"]
        if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods):
            raise ConfigError(f"methods must be a non-empty subset of {list(METHODS)}")
        if len(set(methods)) != len(methods):
            raise ConfigError("methods must not repeat")
        t = d["trajectory"]
        _number(t, "speed", "trajectory", lo=0, strict_lo=True)
        _number(t, "scan_period", "trajectory", lo=0, strict_lo=True)
        s = d["sensor"]
        _number(s, "angular_resolution_deg", "sensor", lo=0, strict_lo=True)
        _number(s, "max_range", "sensor", lo=0, strict_lo=True)
        _number(s, "sigma_range", "sensor", lo=0)
        _number(s, "sigma_bearing_deg", "sensor", lo=0)
        _number(d["clutter"], "lambda_na", "clutter", lo=0)
        m = d["model"]
        _number(m, "sigma_e", "model", lo=0, strict_lo=True)
        _number(m, "f_a", "model", lo=0, hi=1)
        if m["f_a"] >= 1:
            raise ConfigError("model.f_a must be < 1")
        _number(m, "lambda_na", "model", lo=0, strict_lo=True, optional=True)
        _number(m, "d_th", "model", lo=0, strict_lo=True)
        if m["lambda_na"] is None and d["clutter"]["lambda_na"] == 0:
            raise ConfigError("model.lambda_na must be set (> 0) when clutter.lambda_na is 0")
        for key in ("x", "y", "theta_deg"):
            _interval(d["prior"], key, "prior")
        inf = d["inference"]
        for key in ("n_p", "n_da", "n_it", "n_starts", "coarse_stride"):
            _number(inf, key, "inference", lo=1, integer=True)
        _number(inf, "bp_tol", "inference", lo=0, strict_lo=True)
        _number(inf, "damping", "inference", lo=0, hi=0.999999)
        _number(inf, "prune_sigmas", "inference", lo=0, strict_lo=True)
        _number(inf, "ranking_scale", "inference", lo=0, strict_lo=True)
        if inf["start_ranking"] not in ("coarse", "fine"):
            raise ConfigError("inference.start_ranking must be 'coarse' or 'fine'")
        if not isinstance(inf["prune"], bool):
            raise ConfigError("inference.prune must be true or false")
        if not isinstance(inf["anneal"], list) or not inf["anneal"]:
            raise ConfigError("inference.anneal must be a non-empty list")
        _number(d["ndt"], "cell_size", "ndt", lo=0, strict_lo=True)
        _number(d["ndt"], "max_iters", "ndt", lo=1, integer=True)
        _number(d["imls"], "h", "imls", lo=0, strict_lo=True)
        _number(d["imls"], "radius", "imls", lo=0, strict_lo=True, optional=True)
        _number(d["imls"], "max_iters", "imls", lo=1, integer=True)
        for key, holder in (("map", d), ("waypoints", t)):
            if holder[key] != "demo" and not self._path(holder[key]).is_file():
                raise ConfigError(f"{key} file not found: {self._path(holder[key])}")
        try:
            self.sensor_spec()
            self.inference_config()
            self.prior()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    # -- builders

    def __getitem__(self, key):
        return self.data[key]

    def segment_map(self):
        m = self.data["map"]
        return load_map(demo_map_path() if m == "demo" else self._path(m))

    def trajectory(self) -> list[Pose]:
        t = self.data["trajectory"]
        wp = load_waypoints(demo_trajectory_path() if t["waypoints"] == "demo" else self._path(t["waypoints"]))
        return generate_trajectory(TrajectorySpec(wp, t["speed"], t["scan_period"]))

    def sensor_spec(self) -> SensorSpec:
        s = self.data["sensor"]
        return SensorSpec(
            math.radians(s["angular_resolution_deg"]),
            float(s["max_range"]),
            float(s["sigma_range"]),
            math.radians(s["sigma_bearing_deg"]),
        )

    def clutter_spec(self) -> ClutterSpec:
        return ClutterSpec(lambda_na=float(self.data["clutter"]["lambda_na"]))

    def scan_model(self) -> ScanModel:
        m = self.data["model"]
        lam = m["lambda_na"] if m["lambda_na"] is not None else self.data["clutter"]["lambda_na"]
        return ScanModel(
            ErrorModel(float(m["sigma_e"])),
            AssociabilityModel(float(m["f_a"])),
            ClutterModel(lambda_na=float(lam), max_range=float(self.data["sensor"]["max_range"])),
        )

    def prior(self) -> PosePrior:
        p = self.data["prior"]
        th = [math.radians(v) for v in p["theta_deg"]]
        return PosePrior(tuple(p["x"]), tuple(p["y"]), tuple(th))

    def inference_config(self) -> InferenceConfig:
        inf = dict(self.data["inference"])
        inf["anneal"] = tuple(float(a) for a in inf["anneal"])
        return InferenceConfig(**inf)

    def imls_config(self) -> ImlsConfig:
        i = self.data["imls"]
        return ImlsConfig(h=float(i["h"]), radius=i["radius"], max_iters=int(i["max_iters"]))

    def with_overrides(self, **top) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        d.update(top)
        return ExperimentConfig.from_dict(d, self.base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return ExperimentConfig.from_dict(user, path.parent)


def default_config() -> ExperimentConfig:
    return ExperimentConfig.from_dict({"schema": SCHEMA})


# ---------------------------------------------------------------------------
# metrics


def compute_quantile(values, q: float) -> float:
    """Lower empirical quantile: the smallest sample ``v`` with at least
    ``q`` percent of the samples ``<= v``. NaNs are ignored."""
    v = np.asarray(values, dtype=float).ravel()
    v = np.sort(v[~np.isnan(v)])
    if len(v) == 0:
        raise ValueError("no finite values to take a quantile of")
    if not 0 <= q <= 100:
        raise ValueError("q must lie in [0, 100]")
    k = max(math.ceil(q * len(v) / 100), 1)
    return float(v[k - 1])


def accumulate_trajectory(relative_poses) -> list[Pose]:
    """``T_0 = I``, ``T_k = T_{k-1} o dP_k``."""
    out = [Pose.identity()]
    for dp in relative_poses:
        out.append(compose(out[-1], dp))
    return out


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class FrameRecord:
    trial: int
    frame: int  # pose index of the source scan
    method: str
    e_trans: float
    e_rot: float
    estimate: tuple | None
    reason: str = ""


@dataclass
class TrialResult:
    trial: int
    truth: list  # ground-truth relative poses as (x, y, theta), one per frame
    records: list
    stationary: int
    runtime: dict


@dataclass
class BenchmarkReport:
    config: dict
    seed: int
    methods: list
    records: list
    truth: dict  # trial -> list of (x, y, theta)
    quantiles: dict
    failures: dict
    stationary_frames: int
    degraded: bool
    runtime: dict = field(default_factory=dict)

    def records_for(self, method: str, trial: int | None = None) -> list:
        return [r for r in self.records if r.method == method and (trial is None or r.trial == trial)]


def trial_offsets(n_poses: int, frames: int, n_mc: int) -> list[int]:
    """Start indices spreading the trials evenly along the trajectory."""
    span = n_poses - 1 - frames
    if span < 0:
        raise ConfigError(f"trajectory has {n_poses} poses, too few for {frames} frames")
    if n_mc == 1:
        return [0]
    return [(t * span) // (n_mc - 1) for t in range(n_mc)]


def frame_seed(seed: int, trial: int, frame: int) -> int:
    return int(np.random.SeedSequence([seed, trial, frame, 1]).generate_state(1)[0])


def _match(method, cfg: ExperimentConfig, source, dest, surf, seed):
    if method == "proposed":
        return match_scans(source, surf, cfg.inference_config(), cfg.scan_model(), cfg.prior(), seed=seed).map_pose
    if method == "ndt":
        n = cfg["ndt"]
        return ndt_match(source, dest, Pose.identity(), float(n["cell_size"]), int(n["max_iters"]))
    return imls_match(source, surf, cfg.imls_config(), Pose.identity())


def run_trial(cfg: ExperimentConfig, trial: int, methods=None) -> TrialResult:
    """One Monte Carlo trial: a fresh noise stream over one stretch of road.

    The previous scan is the destination and the current scan the source.
    Failures are recorded as NaN with the exception text.
    """
    methods = list(methods or cfg["methods"])
    seed = cfg["seed"]
    poses = cfg.trajectory()
    frames = cfg["frames_per_trial"]
    start = trial_offsets(len(poses), frames, cfg["n_mc"])[trial]
    world = cfg.segment_map()
    sensor, clutter = cfg.sensor_spec(), cfg.clutter_spec()
    d_th = float(cfg["model"]["d_th"])

    scans = {}

    def get_scan(k):
        if k not in scans:
            scans[k] = scan(world, poses[k], sensor, clutter, make_rng(seed, trial, k))
        return scans[k]

    records, truth, runtime = [], [], {m: 0.0 for m in methods}
    stationary = 0
    for k in range(start + 1, start + frames + 1):
        dest, source = get_scan(k - 1), get_scan(k)
        scans.pop(k - 1)
        gt = scan_relative_pose(poses[k], poses[k - 1])
        truth.append(tuple(float(v) for v in to_chart(gt)))
        if float(np.linalg.norm(gt.translation)) == 0.0:
            stationary += 1
            continue
        surf = estimate_normals(dest.points, d_th)
        for method in methods:
            t0 = time.perf_counter()
            try:
                est = _match(method, cfg, source, dest.points, surf, frame_seed(seed, trial, k))
                rec = FrameRecord(
                    trial, k, method,
                    translation_error(est, gt), rotation_error(est, gt),
                    tuple(float(v) for v in to_chart(est)),
                )
            except UndefinedMetricError:  # pragma: no cover - excluded above
                raise
            except Exception as exc:  # component failure: record, keep going
                rec = FrameRecord(trial, k, method, math.nan, math.nan, None, f"{type(exc).__name__}: {exc}")
            runtime[method] += time.perf_counter() - t0
            records.append(rec)
    return TrialResult(trial, truth, records, stationary, runtime)


def _worker_init():
    # one compiled-kernel thread per worker; the trials are the parallelism
    import numba

    numba.set_num_threads(1)


def _run_trial_job(args):
    data, base_dir, trial, methods = args
    cfg = ExperimentConfig(data, Path(base_dir))
    return run_trial(cfg, trial, methods)


def run_benchmark(cfg: ExperimentConfig, methods=None, jobs: int = 1, progress=None) -> BenchmarkReport:
    """Run ``n_mc`` trials (in parallel processes when ``jobs > 1``).

    Results are merged in trial order, so the report does not depend on
    ``jobs``. A method whose failed-frame fraction exceeds 10% marks the
    benchmark as degraded.
    """
    methods = list(methods or cfg["methods"])
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
    n_mc = cfg["n_mc"]
    t0, c0 = time.perf_counter(), time.process_time()
    if jobs > 1:
        args = [(cfg.data, str(cfg.base_dir), t, methods) for t in range(n_mc)]
        # spawn, not fork: the parent may already run an OpenMP thread pool
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=_worker_init) as pool:
            trials = []
            for res in pool.map(_run_trial_job, args):
                trials.append(res)
                if progress:
                    progress(res)
    else:
        trials = []
        for t in range(n_mc):
            trials.append(run_trial(cfg, t, methods))
            if progress:
                progress(trials[-1])
    wall = time.perf_counter() - t0
    cpu = time.process_time() - c0  # this process only; workers are not counted

    records = [r for tr in trials for r in tr.records]
    quantiles, failures = {}, {}
    degraded = False
    for m in methods:
        recs = [r for r in records if r.method == m]
        n_fail = sum(1 for r in recs if r.reason)
        failures[m] = {"frames": len(recs), "failed": n_fail}
        if recs and n_fail / len(recs) > DEGRADED_FRACTION:
            degraded = True
        quantiles[m] = {}
        for metric in ("e_trans", "e_rot"):
            vals = [getattr(r, metric) for r in recs]
            quantiles[m][metric] = {}
            for q in QUANTILES:
                try:
                    quantiles[m][metric][str(q)] = compute_quantile(vals, q)
                except ValueError:
                    quantiles[m][metric][str(q)] = math.nan
    runtime = {
        "wall_seconds": wall,
        "cpu_seconds": cpu,
        "jobs": jobs,
        "method_seconds": {m: sum(tr.runtime[m] for tr in trials) for m in methods},
    }
    return BenchmarkReport(
        config=copy.deepcopy(cfg.data),
        seed=cfg["seed"],
        methods=methods,
        records=records,
        truth={tr.trial: tr.truth for tr in trials},
        quantiles=quantiles,
        failures=failures,
        stationary_frames=sum(tr.stationary for tr in trials),
        degraded=degraded,
        runtime=runtime,
    )


# ---------------------------------------------------------------------------
# output


def _clean(x):
    """JSON-safe copy: NaN becomes null, tuples become lists."""
    if isinstance(x, float):
        return None if math.isnan(x) else x
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def report_to_dict(report: BenchmarkReport) -> dict:
    return _clean(
        {
            "schema": REPORT_SCHEMA,
            "config": report.config,
            "seed": report.seed,
            "methods": report.methods,
            "labels": {m: METHOD_LABELS[m] for m in report.methods},
            "quantiles": report.quantiles,
            "failures": report.failures,
            "stationary_frames": report.stationary_frames,
            "degraded": report.degraded,
            "frames": [
                {
                    "trial": r.trial,
                    "frame": r.frame,
                    "method": r.method,
                    "e_trans": r.e_trans,
                    "e_rot": r.e_rot,
                    "estimate": r.estimate,
                    "reason": r.reason,
                }
                for r in report.records
            ],
            "truth": {str(t): v for t, v in sorted(report.truth.items())},
        }
    )


def report_from_dict(doc: dict) -> BenchmarkReport:
    """Inverse of :func:`report_to_dict` (runtime statistics are not stored)."""
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"not a {REPORT_SCHEMA} document")

    def num(v):
        return math.nan if v is None else float(v)

    records = [
        FrameRecord(
            f["trial"], f["frame"], f["method"], num(f["e_trans"]), num(f["e_rot"]),
            tuple(f["estimate"]) if f["estimate"] is not None else None, f["reason"],
        )
        for f in doc["frames"]
    ]
    quantiles = {
        m: {metric: {q: num(v) for q, v in qs.items()} for metric, qs in d.items()}
        for m, d in doc["quantiles"].items()
    }
    return BenchmarkReport(
        config=doc["config"],
        seed=doc["seed"],
        methods=list(doc["methods"]),
        records=records,
        truth={int(t): [tuple(v) for v in vals] for t, vals in doc["truth"].items()},
        quantiles=quantiles,
        failures=doc["failures"],
        stationary_frames=doc["stationary_frames"],
        degraded=doc["degraded"],
    )


def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def trajectories(report: BenchmarkReport, trial: int = 0) -> dict:
    """Accumulated trajectories of one trial per method, plus ``"truth"``.

    A failed frame contributes no motion to its method's trajectory.
    """
    truth = [Pose.from_xytheta(*t) for t in report.truth.get(trial, [])]
    out = {"truth": accumulate_trajectory(truth)}
    for m in report.methods:
        by_frame = {r.frame: r for r in report.records_for(m, trial)}
        frames = sorted(by_frame)
        steps = [
            Pose.from_xytheta(*by_frame[k].estimate) if by_frame[k].estimate else Pose.identity()
            for k in frames
        ]
        out[m] = accumulate_trajectory(steps)
    return out


def _write(path: Path, text: str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportError(f"{path}: cannot write report file ({exc.strerror})") from exc


def emit_report(report: BenchmarkReport, out_dir) -> list[Path]:
    """Write report.json, errors.csv, quantiles.csv, trajectory_<method>.csv
    and runtime.json into ``out_dir``.

    Everything except runtime.json is a deterministic function of the config.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"{out}: cannot create output directory ({exc.strerror})") from exc
    written = []

    def put(name, text):
        _write(out / name, text)
        written.append(out / name)

    put("report.json", json.dumps(report_to_dict(report), indent=1, sort_keys=True, allow_nan=False) + "\n")

    lines = ["trial,frame,method,e_trans,e_rot,reason"]
    for r in report.records:
        reason = r.reason.replace('"', "'")
        lines.append(f'{r.trial},{r.frame},{r.method},{_fmt(r.e_trans)},{_fmt(r.e_rot)},"{reason}"')
    put("errors.csv", "\n".join(lines) + "\n")

    lines = ["method,metric,q,value,frames,failed"]
    for m in report.methods:
        for metric in ("e_trans", "e_rot"):
            for q in QUANTILES:
                f = report.failures[m]
                lines.append(f"{m},{metric},{q},{_fmt(report.quantiles[m][metric][str(q)])},{f['frames']},{f['failed']}")
    put("quantiles.csv", "\n".join(lines) + "\n")

    for name, traj in trajectories(report).items():
        lines = ["k,x,y,theta"] + [
            f"{k},{_fmt(p.x)},{_fmt(p.y)},{_fmt(p.theta)}" for k, p in enumerate(traj)
        ]
        put(f"trajectory_{name}.csv", "\n".join(lines) + "\n")

    put("runtime.json", json.dumps(_clean(report.runtime), indent=1, sort_keys=True) + "\n")
    return written


def read_errors_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
