import json
import math
from pathlib import Path

import numpy as np
import pytest

from bpscan import cli, harness
from bpscan.geometry import Pose, from_chart, rotation_error, scan_relative_pose, translation_error
from bpscan.harness import (
    DEFAULTS,
    ConfigError,
    ExperimentConfig,
    accumulate_trajectory,
    compute_quantile,
    default_config,
    emit_report,
    load_config,
    read_errors_csv,
    report_from_dict,
    report_to_dict,
    run_benchmark,
    trial_offsets,
)
from bpscan.pointcloud import load_cloud

GOLDEN = Path(__file__).parent / "golden"


def small(**over):
    d = {"schema": harness.SCHEMA, "seed": 5, "n_mc": 2, "frames_per_trial": 1}
    d.update(over)
    return ExperimentConfig.from_dict(d)


# -- quantiles and trajectories


def test_quantile_examples():
    assert compute_quantile([5.0], 50) == 5.0
    assert compute_quantile([5.0], 95) == 5.0
    assert compute_quantile(np.arange(1, 101), 95) == 95
    assert compute_quantile(np.arange(1, 101), 50) == 50


def test_quantile_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.integers(0, 20, size=rng.integers(1, 40)).astype(float)
        q = float(rng.uniform(0, 100))
        s = np.sort(v)
        oracle = next(x for x in s if np.mean(s <= x) * 100 >= q)
        assert compute_quantile(v, q) == oracle


def test_quantile_ignores_nan_and_rejects_empty():
    assert compute_quantile([np.nan, 1.0, 2.0], 50) == 1.0
    with pytest.raises(ValueError):
        compute_quantile([np.nan], 50)
    with pytest.raises(ValueError):
        compute_quantile([1.0], 101)


def test_accumulate_examples():
    assert len(accumulate_trajectory([])) == 1
    out = accumulate_trajectory([from_chart([1, 0, 0]), from_chart([1, 0, 0])])
    assert [tuple(p.translation) for p in out] == [(0, 0), (1, 0), (2, 0)]


def test_accumulating_truth_reproduces_trajectory():
    cfg = default_config()
    poses = cfg.trajectory()[:40]
    rel = [scan_relative_pose(poses[k], poses[k - 1]) for k in range(1, len(poses))]
    acc = accumulate_trajectory(rel)
    base = poses[0]
    for p, q in zip(acc, poses):
        expect = scan_relative_pose(q, base)
        assert np.allclose(p.translation, expect.translation, atol=1e-9)
        assert np.allclose(p.rotation, expect.rotation, atol=1e-9)


def test_trial_offsets_spread():
    assert trial_offsets(100, 10, 1) == [0]
    offs = trial_offsets(101, 10, 4)
    assert offs[0] == 0 and offs[-1] == 90
    assert offs == sorted(offs)
    with pytest.raises(ConfigError):
        trial_offsets(5, 10, 1)


# -- configuration


def test_default_config_file_matches_defaults():
    path = Path(harness.__file__).parent / "data" / "default_config.json"
    assert json.loads(path.read_text()) == DEFAULTS
    assert load_config(path).data == default_config().data


@pytest.mark.parametrize(
    "doc, fragment",
    [
        ({"schema": "other/1"}, "schema"),
        ({"schema": harness.SCHEMA, "sigma_e": 0.1}, "unknown config key 'sigma_e'"),
        ({"schema": harness.SCHEMA, "model": {"sigma_e": -0.1}}, "model.sigma_e"),
        ({"schema": harness.SCHEMA, "model": {"sigmae": 0.1}}, "model.sigmae"),
        ({"schema": harness.SCHEMA, "n_mc": 0}, "n_mc"),
        ({"schema": harness.SCHEMA, "methods": ["icp"]}, "methods"),
        ({"schema": harness.SCHEMA, "map": "nowhere.txt"}, "not found"),
        ({"schema": harness.SCHEMA, "inference": {"start_ranking": "best"}}, "start_ranking"),
        ({"schema": harness.SCHEMA, "clutter": {"lambda_na": 0.0}}, "lambda_na"),
        ({"schema": harness.SCHEMA, "prior": {"x": [1.0, -1.0]}}, "prior.x"),
    ],
)
def test_config_rejections(doc, fragment):
    with pytest.raises(ConfigError, match=None) as exc:
        ExperimentConfig.from_dict(doc)
    assert fragment in str(exc.value)


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "schema": "bp-scanmatch-config/1",\n  "seed": ,\n}\n')
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert f"{p}:3:" in str(exc.value)


def test_config_builders_follow_values():
    cfg = small(model={"sigma_e": 0.05, "lambda_na": 2.0}, prior={"theta_deg": [-10.0, 10.0]})
    m = cfg.scan_model()
    assert m.error.sigma_e == 0.05 and m.clutter.lambda_na == 2.0
    assert m.clutter.max_range == 100.0
    assert cfg.prior().theta_range == pytest.approx((-math.radians(10), math.radians(10)))
    assert cfg.inference_config().start_ranking == "coarse"
    assert cfg.sensor_spec().n_beams == 360


# -- benchmark and reports


@pytest.fixture(scope="module")
def golden_run(tmp_path_factory):
    cfg = load_config(GOLDEN / "config.json")
    report = run_benchmark(cfg)
    out = tmp_path_factory.mktemp("golden")
    emit_report(report, out)
    return cfg, report, out


def _close(a, b, path=""):
    if isinstance(a, dict):
        assert set(a) == set(b), path
        for k in a:
            _close(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            _close(x, y, f"{path}[{i}]")
    elif isinstance(a, float) or isinstance(b, float):
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12), path
    else:
        assert a == b, path


def test_golden_report(golden_run):
    _, _, out = golden_run
    for name in ("report.json",):
        _close(json.loads((out / name).read_text()), json.loads((GOLDEN / "report" / name).read_text()))
    for name in ("errors.csv", "quantiles.csv", "trajectory_truth.csv", "trajectory_proposed.csv",
                 "trajectory_ndt.csv", "trajectory_imls.csv"):
        got = (out / name).read_text().splitlines()
        want = (GOLDEN / "report" / name).read_text().splitlines()
        assert len(got) == len(want)
        for g, w in zip(got, want):
            gs, ws = g.split(","), w.split(",")
            assert len(gs) == len(ws)
            for x, y in zip(gs, ws):
                try:
                    assert float(x) == pytest.approx(float(y), rel=1e-9, abs=1e-12)
                except ValueError:
                    assert x == y


def test_report_metrics_use_geometry_functions(golden_run):
    _, report, _ = golden_run
    for r in report.records:
        truth = report.truth[r.trial][r.frame - 1]
        est = Pose.from_xytheta(*r.estimate)
        gt = Pose.from_xytheta(*truth)
        assert r.e_trans == pytest.approx(translation_error(est, gt), rel=1e-12)
        assert r.e_rot == pytest.approx(rotation_error(est, gt), rel=1e-12, abs=1e-15)


def test_report_files_are_deterministic(golden_run, tmp_path):
    cfg, _, out = golden_run
    emit_report(run_benchmark(cfg), tmp_path)
    for f in out.iterdir():
        if f.name != "runtime.json":
            assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name


def test_quantiles_csv_rows(golden_run):
    _, report, out = golden_run
    rows = (out / "quantiles.csv").read_text().splitlines()[1:]
    assert len(rows) == len(report.methods) * 2 * 2
    keys = {tuple(r.split(",")[:3]) for r in rows}
    assert ("imls", "e_rot", "95") in keys


def test_report_round_trips(golden_run):
    _, report, out = golden_run
    doc = json.loads((out / "report.json").read_text())
    assert doc["labels"]["imls"] == "IMLS-style"
    # the echoed config loads again and names the same experiment
    assert ExperimentConfig.from_dict(doc["config"]).data == report.config
    again = report_from_dict(doc)
    assert report_to_dict(again) == doc
    rows = read_errors_csv(out / "errors.csv")
    assert len(rows) == len(report.records)


def test_trajectory_files(golden_run):
    _, report, out = golden_run
    lines = (out / "trajectory_truth.csv").read_text().splitlines()
    assert lines[0] == "k,x,y,theta"
    assert len(lines) == 1 + 1 + report.config["frames_per_trial"]


def test_parallel_jobs_reproduce_serial():
    cfg = small(methods=["proposed", "imls"])
    a = report_to_dict(run_benchmark(cfg, jobs=1))
    b = report_to_dict(run_benchmark(cfg, jobs=2))
    assert a == b


def test_failures_are_recorded_and_degrade(monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(harness, "imls_match", boom)
    report = run_benchmark(small(methods=["imls"]))
    assert report.degraded
    assert report.failures["imls"] == {"frames": 2, "failed": 2}
    assert all("solver exploded" in r.reason and math.isnan(r.e_trans) for r in report.records)
    assert math.isnan(report.quantiles["imls"]["e_trans"]["50"])


def test_report_dir_errors_name_path(tmp_path, golden_run):
    _, report, _ = golden_run
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(harness.ReportError) as exc:
        emit_report(report, blocker / "sub")
    assert str(blocker) in str(exc.value)


# -- command line


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema": harness.SCHEMA, "bogus": 1}))
    assert cli.main(["benchmark", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_cli_unknown_method_is_config_error(tmp_path):
    assert cli.main(["benchmark", "--methods", "icp", "--out", str(tmp_path)]) == 2


def test_cli_degraded_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(harness, "ndt_match", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("x")))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema": harness.SCHEMA, "n_mc": 1, "frames_per_trial": 1}))
    rc = cli.main(["benchmark", "--config", str(cfg), "--methods", "ndt", "--out", str(tmp_path / "o")])
    assert rc == 3
    assert (tmp_path / "o" / "report.json").exists()


def test_cli_simulate_and_match(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema": harness.SCHEMA, "frames_per_trial": 1}))
    assert cli.main(["simulate", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "sim")]) == 0
    sim = tmp_path / "sim"
    assert len(load_cloud(sim / "scan_0000.csv")) > 100
    assert (sim / "poses.csv").read_text().count("\n") == 3
    rc = cli.main(["match", str(sim / "scan_0001.csv"), str(sim / "scan_0000.csv"),
                   "--config", str(cfg), "--out", str(tmp_path / "m")])
    assert rc == 0
    doc = json.loads((tmp_path / "m" / "match.json").read_text())
    assert abs(doc["map_pose"]["x"] - 0.8) < 0.15
    assert doc["diagnostics"]["bp_iterations"] >= 1


def test_cli_match_missing_file_is_failure(tmp_path):
    assert cli.main(["match", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 4


def test_cli_seed_precedence(monkeypatch):
    monkeypatch.setenv("BP_SCANMATCH_SEED", "42")
    args = cli.build_parser().parse_args(["benchmark", "--out", "x"])
    assert cli._load(args)["seed"] == 42
    args = cli.build_parser().parse_args(["benchmark", "--out", "x", "--seed", "7"])
    assert cli._load(args)["seed"] == 7
    monkeypatch.setenv("BP_SCANMATCH_SEED", "abc")
    args = cli.build_parser().parse_args(["benchmark", "--out", "x"])
    with pytest.raises(ConfigError):
        cli._load(args)


def test_cli_rejects_bad_jobs(tmp_path):
    assert cli.main(["benchmark", "--jobs", "0", "--out", str(tmp_path)]) == 2
