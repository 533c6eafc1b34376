import csv
import json

import pytest

from semistatic_vem import cli, sim, vem
from semistatic_vem.geom import Pose2


def _traj(n, dx=0.0):
    return [Pose2(float(k) + dx, 0.0, 0.0) for k in range(n)]


# -- metrics -----------------------------------------------------------------

def test_metrics_identical_trajectories():
    m = cli.metrics(_traj(5), _traj(5), {}, {})
    assert m.ate == 0.0 and m.mpe == 0.0
    assert m.change_precision == 1.0 and m.change_recall == 1.0


def test_metrics_constant_offset():
    m = cli.metrics(_traj(10, 0.1), _traj(10), {}, {})
    assert m.ate == pytest.approx(0.1, abs=1e-12)
    assert m.mpe == pytest.approx(0.1, abs=1e-12)


def test_metrics_single_outlier_frame():
    est = _traj(100)
    est[37] = Pose2(38.0, 0.0, 0.0)
    m = cli.metrics(est, _traj(100), {}, {})
    assert m.mpe == pytest.approx(1.0)
    assert m.ate == pytest.approx(0.1)


def test_metrics_length_mismatch():
    with pytest.raises(ValueError):
        cli.metrics(_traj(3), _traj(4), {}, {})


def test_change_classification():
    truth = {1: 2, 2: 2, 3: None, 4: None}
    history = {
        1: [(1, "active"), (2, "rejected_pending"), (3, "removed")],
        2: [(1, "rejected_pending"), (2, "active"), (3, "active")],  # flagged before its move
        3: [(1, "active"), (2, "rejected_pending")],                 # false positive
        4: [(1, "active")],
    }
    m = cli.metrics(_traj(3), _traj(3), truth, history)
    assert m.change_recall == 0.5
    assert m.change_precision == 0.5


def test_run_metrics_validation():
    with pytest.raises(ValueError):
        cli.RunMetrics(0.0, 0.0, 1.5, 0.0)


def test_ablation_spec_validation():
    with pytest.raises(vem.ConfigError):
        cli.AblationSpec(("full",), (), preset="baseline_6m4s")
    with pytest.raises(vem.ConfigError):
        cli.AblationSpec(("fancy",), (0,), preset="baseline_6m4s")
    with pytest.raises(vem.ConfigError):
        cli.AblationSpec(("full",), (0,))
    spec = cli.AblationSpec(("full",), (3,), preset="all_static")
    assert spec.scenario(3).seed == 3


def test_parse_seeds():
    assert cli._parse_seeds("0-3") == (0, 1, 2, 3)
    assert cli._parse_seeds("1,4,7") == (1, 4, 7)
    assert cli._parse_seeds("0-1,5") == (0, 1, 5)


# -- runs --------------------------------------------------------------------

def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_writes_documented_csvs(tmp_path, capsys):
    assert cli.main(["run", "--preset", "baseline_6m4s", "--out", str(tmp_path), "--svg"]) == 0
    assert "ate=" in capsys.readouterr().out
    for name, cols in [("trajectory.csv", cli.TRAJECTORY_COLUMNS), ("objects.csv", cli.OBJECTS_COLUMNS),
                       ("elbo_trace.csv", cli.ELBO_COLUMNS),
                       ("consistency_trace.csv", cli.CONSISTENCY_COLUMNS),
                       ("metrics.csv", cli.METRICS_COLUMNS)]:
        with open(tmp_path / name) as fh:
            assert tuple(next(csv.reader(fh))) == cols
    assert len(_rows(tmp_path / "trajectory.csv")) == sim.preset("baseline_6m4s").n_frames
    (m,) = _rows(tmp_path / "metrics.csv")
    assert float(m["change_recall"]) == 1.0
    assert (tmp_path / "frame1_traces.svg").read_text().startswith("<svg")


def test_all_static_zero_noise_is_exact(tmp_path):
    scenario = sim.preset("all_static").replace(noise=sim.NoiseConfig.zero())
    result = cli.run_scenario(scenario)
    assert result.metrics.ate < 1e-9
    assert result.metrics.change_precision == 1.0


def test_byte_identical_reruns(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    for d in (a, b):
        assert cli.main(["run", "--preset", "coherent_shift", "--seed", "4", "--out", str(d)]) == 0
    for name in cli.OUTPUT_FILES:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_dump_graph(tmp_path):
    assert cli.main(["run", "--preset", "all_static", "--em-iters", "2", "--out", str(tmp_path),
                     "--dump-graph"]) == 0
    text = (tmp_path / "graph.txt").read_text()
    assert "iter=1 VAR pose:1" in text and "FACTOR landmark_measurement" in text


def test_missing_out_dir(tmp_path, capsys):
    target = tmp_path / "nope"
    assert cli.main(["run", "--preset", "all_static", "--out", str(target)]) == 2
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
    assert "does not exist" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["run", "--preset", "moon", "--out", str(tmp_path)]) == 2
    assert cli.main(["run", "--out", str(tmp_path)]) == 2
    assert cli.main(["preset", "show"]) == 2
    assert cli.main(["preset", "show", "moon"]) == 2
    assert list(tmp_path.iterdir()) == []


def test_help_exits_ok(capsys):
    assert cli.main(["--help"]) == 0
    assert "run" in capsys.readouterr().out


def test_preset_list_and_show(capsys):
    assert cli.main(["preset", "list"]) == 0
    assert capsys.readouterr().out.split() == sorted(sim.PRESETS)
    assert cli.main(["preset", "show", "all_static"]) == 0
    shown = sim.ScenarioConfig.from_json(capsys.readouterr().out)
    assert shown == sim.preset("all_static")


def test_validate(tmp_path, capsys):
    good = tmp_path / "good.json"
    d = sim.preset("baseline_6m4s").to_dict()
    d["vem"] = {"em_iters": 10}
    good.write_text(json.dumps(d))
    assert cli.main(["validate", str(good)]) == 0
    assert "10 objects" in capsys.readouterr().out

    bad = tmp_path / "bad.json"
    d["vem"] = {"em_iters": 0, "nonsense": 1}
    bad.write_text(json.dumps(d))
    assert cli.main(["validate", str(bad)]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    assert cli.main(["validate", str(broken)]) == 2
    assert cli.main(["validate", str(tmp_path / "missing.json")]) == 2


def test_run_from_config_file(tmp_path):
    cfg = tmp_path / "scene.json"
    d = sim.preset("all_static", seed=1).to_dict()
    d["robot_path"] = d["robot_path"][:4]
    d["vem"] = {"window": 3}
    cfg.write_text(json.dumps(d))
    out = tmp_path / "out"
    out.mkdir()
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(_rows(out / "trajectory.csv")) == 4


def test_pipeline_failure_exit_status(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise FloatingPointError("solver blew up")

    monkeypatch.setattr(vem, "process_frame", boom)
    assert cli.main(["run", "--preset", "all_static", "--out", str(tmp_path)]) == 1
    assert list(tmp_path.iterdir()) == []


def test_ablate_small(tmp_path, capsys):
    assert cli.main(["ablate", "--preset", "baseline_6m4s", "--seeds", "0-1", "--em-iters", "10",
                     "--variants", "full,point_estimate", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "ablation.csv")
    assert [(r["variant"], r["seed"]) for r in rows] == [
        ("full", "0"), ("full", "1"), ("full", "median"),
        ("point_estimate", "0"), ("point_estimate", "1"), ("point_estimate", "median")]
    assert (tmp_path / "full" / "seed_1" / "metrics.csv").exists()
    assert "median ate=" in capsys.readouterr().out
