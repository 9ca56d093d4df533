"""End-to-end command-line workflows on a one-segment toy setup."""

import numpy as np
import pytest

from shapectl.cli import main
from shapectl.config import load_run_config
from shapectl.control_node import load_control_model
from shapectl.reports import (
    read_dataset_csv,
    read_metrics_csv,
    read_shape_eval_csv,
    read_tracking_log_csv,
)
from shapectl.robot import sample_dataset
from shapectl.shape_node import load_shape_model

TINY_INI = """\
[robot]
n_segments = 1

[shape]
hidden = 16,16
solver = rk4
iterations = 40
batch_size = 16
val_interval = 10

[control]
hidden = 16
horizon = 3
batch_size = 4
iterations = 6

[run]
n_samples = 80
seed = 11
duration = 1.0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset, shape model, and control model built once via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    assert main(["generate", "--config", str(ini), "--out", str(root / "gen")]) == 0
    assert (
        main(
            [
                "train-shape",
                "--config",
                str(ini),
                "--dataset",
                str(root / "gen" / "dataset.csv"),
                "--out",
                str(root / "ts"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "train-control",
                "--config",
                str(ini),
                "--shape-model",
                str(root / "ts" / "shape_model.json"),
                "--out",
                str(root / "tc"),
            ]
        )
        == 0
    )
    return root, ini


def _shape_model_path(workdir):
    return str(workdir[0] / "ts" / "shape_model.json")


def _control_model_path(workdir):
    return str(workdir[0] / "tc" / "control_model.json")


def test_generate_prints_count_and_seed(workdir, tmp_path, capsys):
    root, ini = workdir
    rc = main(
        [
            "generate",
            "--config",
            str(ini),
            "--n-samples",
            "3",
            "--out",
            str(tmp_path / "g"),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "3 samples" in out and "seed 11" in out
    assert len((tmp_path / "g" / "dataset.csv").read_text().splitlines()) == 4
    assert (tmp_path / "g" / "resolved_config.ini").exists()


def test_generate_byte_identical(workdir, tmp_path):
    root, ini = workdir
    for name in ("a", "b"):
        assert (
            main(["generate", "--config", str(ini), "--out", str(tmp_path / name)])
            == 0
        )
    a = (tmp_path / "a" / "dataset.csv").read_bytes()
    b = (tmp_path / "b" / "dataset.csv").read_bytes()
    assert a == b
    assert a == (root / "gen" / "dataset.csv").read_bytes()


def test_generated_dataset_matches_library(workdir):
    root, ini = workdir
    cfg = load_run_config(ini)
    robot = cfg.robot_config()
    back = read_dataset_csv(root / "gen" / "dataset.csv", robot)
    direct = sample_dataset(robot, 80, np.random.default_rng(11))
    assert len(back) == 80
    for a, b in zip(direct, back):
        assert np.array_equal(a.action.q, b.action.q)
        assert np.array_equal(a.shape.points, b.shape.points)


def test_env_override(workdir, tmp_path, monkeypatch):
    root, ini = workdir
    monkeypatch.setenv("SHAPECTL_RUN_N_SAMPLES", "5")
    assert main(["generate", "--config", str(ini), "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "dataset.csv").read_text().splitlines()) == 6
    assert "n_samples = 5" in (tmp_path / "resolved_config.ini").read_text()


def test_train_shape_outputs(workdir):
    root, ini = workdir
    history = (root / "ts" / "shape_history.csv").read_text().splitlines()
    assert history[0] == "iteration,train_loss,val_loss"
    assert len(history) == 41
    model, saved_robot = load_shape_model(root / "ts" / "shape_model.json")
    assert saved_robot.n_segments == 1
    assert model.solver == "rk4"


def test_train_shape_resume_deterministic(workdir, tmp_path, monkeypatch):
    root, ini = workdir
    monkeypatch.setenv("SHAPECTL_SHAPE_ITERATIONS", "5")
    for name in ("r1", "r2"):
        assert (
            main(
                [
                    "train-shape",
                    "--config",
                    str(ini),
                    "--dataset",
                    str(root / "gen" / "dataset.csv"),
                    "--init-model",
                    _shape_model_path(workdir),
                    "--out",
                    str(tmp_path / name),
                ]
            )
            == 0
        )
    h1 = (tmp_path / "r1" / "shape_history.csv").read_bytes()
    h2 = (tmp_path / "r2" / "shape_history.csv").read_bytes()
    assert h1 == h2
    m1 = (tmp_path / "r1" / "shape_model.json").read_bytes()
    m2 = (tmp_path / "r2" / "shape_model.json").read_bytes()
    assert m1 == m2


def test_train_control_history_rows(workdir):
    root, ini = workdir
    history = (root / "tc" / "control_history.csv").read_text().splitlines()
    assert history[0] == "iteration,train_loss"
    assert len(history) == 7
    model, saved_robot = load_control_model(root / "tc" / "control_model.json")
    assert model.horizon == 3
    assert saved_robot.n_segments == 1


def test_train_control_zero_iterations_rejected(workdir, tmp_path, monkeypatch):
    root, ini = workdir
    monkeypatch.setenv("SHAPECTL_CONTROL_ITERATIONS", "0")
    rc = main(
        [
            "train-control",
            "--config",
            str(ini),
            "--shape-model",
            _shape_model_path(workdir),
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 3


def test_obstacle_flag_changes_training_loss(workdir, tmp_path, monkeypatch, capsys):
    root, ini = workdir
    monkeypatch.setenv("SHAPECTL_CONTROL_ITERATIONS", "2")
    for scenario, name in (("tracking", "t"), ("obstacle", "o")):
        rc = main(
            [
                "train-control",
                "--config",
                str(ini),
                "--shape-model",
                _shape_model_path(workdir),
                "--scenario",
                scenario,
                "--out",
                str(tmp_path / name),
            ]
        )
        assert rc == 0
    out = capsys.readouterr().out
    assert "obstacle at (" in out
    losses = {}
    for name in ("t", "o"):
        row = (tmp_path / name / "control_history.csv").read_text().splitlines()[1]
        losses[name] = float(row.split(",")[1])
    assert losses["t"] != losses["o"]
    resolved = (tmp_path / "o" / "resolved_config.ini").read_text()
    obstacle_line = [x for x in resolved.splitlines() if x.startswith("obstacle")][0]
    assert obstacle_line.split("=")[1].strip() != ""


def test_evaluate_shape_table_matches_logs(workdir, tmp_path):
    root, ini = workdir
    rc = main(
        [
            "evaluate",
            "--config",
            str(ini),
            "--shape-model",
            _shape_model_path(workdir),
            "--scenario",
            "shape",
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 0
    table = read_metrics_csv(tmp_path / "metrics.csv")
    assert [r.axis for r in table.rows] == ["x", "y", "z"]
    assert all(r.n_trials == 50 for r in table.rows)
    truth, pred = read_shape_eval_csv(tmp_path / "shape_eval.csv")
    err = (pred - truth).reshape(-1, 3)
    rmse = np.sqrt((err * err).mean(axis=0)) * 1000.0
    std = err.std(axis=0) * 1000.0
    for j, row in enumerate(table.rows):
        assert abs(row.rmse_mm - rmse[j]) < 1e-9
        assert abs(row.std_mm - std[j]) < 1e-9


def test_evaluate_tracking_table_matches_logs(workdir, tmp_path, capsys):
    root, ini = workdir
    args = [
        "evaluate",
        "--config",
        str(ini),
        "--shape-model",
        _shape_model_path(workdir),
        "--control-model",
        _control_model_path(workdir),
        "--scenario",
        "tracking",
    ]
    assert main(args + ["--out", str(tmp_path / "e1")]) == 0
    out = capsys.readouterr().out
    assert "x̃" in out
    table = read_metrics_csv(tmp_path / "e1" / "metrics.csv")
    kinds = ("circle", "ellipse", "s_shape", "square")
    assert [r.scenario for r in table.rows] == [k for k in kinds for _ in range(3)]
    for kind in kinds:
        logs = [
            read_tracking_log_csv(tmp_path / "e1" / f"track_{kind}_trial{i}.csv")
            for i in range(5)
        ]
        err = np.concatenate([log.tips - log.goals for log in logs], axis=0)
        rmse = np.sqrt((err * err).mean(axis=0)) * 1000.0
        std = err.std(axis=0) * 1000.0
        rows = [r for r in table.rows if r.scenario == kind]
        for j, row in enumerate(rows):
            assert abs(row.rmse_mm - rmse[j]) < 1e-9
            assert abs(row.std_mm - std[j]) < 1e-9
            assert row.n_trials == 5
    import xml.etree.ElementTree as ET

    ET.parse(tmp_path / "e1" / "track_circle.svg")
    # same command, same bytes
    assert main(args + ["--out", str(tmp_path / "e2")]) == 0
    assert (tmp_path / "e1" / "metrics.csv").read_bytes() == (
        tmp_path / "e2" / "metrics.csv"
    ).read_bytes()
    assert (tmp_path / "e1" / "track_circle_trial0.csv").read_bytes() == (
        tmp_path / "e2" / "track_circle_trial0.csv"
    ).read_bytes()


def test_evaluate_payload_emits_five_rows(workdir, tmp_path):
    root, ini = workdir
    rc = main(
        [
            "evaluate",
            "--config",
            str(ini),
            "--shape-model",
            _shape_model_path(workdir),
            "--control-model",
            _control_model_path(workdir),
            "--scenario",
            "payload",
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 0
    table = read_metrics_csv(tmp_path / "metrics.csv")
    assert [r.scenario for r in table.rows] == [
        "payload_0g",
        "payload_5g",
        "payload_10g",
        "payload_15g",
        "payload_20g",
    ]
    assert all(r.axis == "xyz" for r in table.rows)
    assert (tmp_path / "payload_20g_trial4.csv").exists()
    assert (tmp_path / "payload_helix.svg").exists()


def test_evaluate_obstacle_with_baseline(workdir, tmp_path, capsys):
    root, ini = workdir
    rc = main(
        [
            "evaluate",
            "--config",
            str(ini),
            "--shape-model",
            _shape_model_path(workdir),
            "--control-model",
            _control_model_path(workdir),
            "--baseline-model",
            _control_model_path(workdir),
            "--scenario",
            "obstacle",
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "violation ticks" in out
    table = read_metrics_csv(tmp_path / "metrics.csv")
    scenarios = {r.scenario for r in table.rows}
    assert scenarios == {"circle", "baseline_circle", "square", "baseline_square"}
    log = read_tracking_log_csv(tmp_path / "obstacle_circle_trial0.csv")
    assert log.min_obstacle_dist is not None
    resolved = (tmp_path / "resolved_config.ini").read_text()
    obstacle_line = [x for x in resolved.splitlines() if x.startswith("obstacle")][0]
    assert obstacle_line.split("=")[1].strip() != ""
    assert (tmp_path / "obstacle_circle.svg").exists()


def test_rollout_closed_loop(workdir, tmp_path):
    root, ini = workdir
    rc = main(
        [
            "rollout",
            "--config",
            str(ini),
            "--shape-model",
            _shape_model_path(workdir),
            "--control-model",
            _control_model_path(workdir),
            "--closed-loop",
            "--trajectory",
            "circle",
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 0
    log = read_tracking_log_csv(tmp_path / "rollout.csv")
    assert log.n_ticks == 2
    assert np.all(log.actions > -15.0) and np.all(log.actions < 15.0)
    assert log.min_obstacle_dist is None


def test_rollout_open_loop_ignores_plant_feedback(workdir, tmp_path):
    root, ini = workdir
    base = [
        "rollout",
        "--config",
        str(ini),
        "--shape-model",
        _shape_model_path(workdir),
        "--open-loop",
        "--trajectory",
        "circle",
    ]
    assert main(base + ["--out", str(tmp_path / "p0")]) == 0
    assert main(base + ["--payload", "0", "--out", str(tmp_path / "p0b")]) == 0
    assert main(base + ["--payload", "5", "--out", str(tmp_path / "p5")]) == 0
    # explicit zero payload equals omitting the flag
    assert (tmp_path / "p0" / "rollout.csv").read_bytes() == (
        tmp_path / "p0b" / "rollout.csv"
    ).read_bytes()
    clean = read_tracking_log_csv(tmp_path / "p0" / "rollout.csv")
    loaded = read_tracking_log_csv(tmp_path / "p5" / "rollout.csv")
    # no feedback: commanded actions identical though the plant drooped
    assert np.array_equal(clean.actions, loaded.actions)
    assert not np.array_equal(clean.tips, loaded.tips)


def test_rollout_obstacle_adds_distance_column(workdir, tmp_path):
    root, ini = workdir
    rc = main(
        [
            "rollout",
            "--config",
            str(ini),
            "--shape-model",
            _shape_model_path(workdir),
            "--open-loop",
            "--obstacle",
            "0.02,0.0,0.08",
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 0
    header = (tmp_path / "rollout.csv").read_text().splitlines()[0]
    assert header.endswith(",min_obstacle_dist")


def test_rollout_flag_conflicts_are_usage_errors(workdir, tmp_path, capsys):
    root, ini = workdir
    sm = _shape_model_path(workdir)
    rc = main(
        ["rollout", "--shape-model", sm, "--open-loop", "--closed-loop", "--out", str(tmp_path)]
    )
    assert rc == 2
    rc = main(["rollout", "--shape-model", sm, "--out", str(tmp_path)])
    assert rc == 2
    capsys.readouterr()


def test_cli_error_codes(workdir, tmp_path, capsys):
    root, ini = workdir
    sm = _shape_model_path(workdir)
    # closed loop without a control model: config error
    rc = main(
        [
            "rollout",
            "--config",
            str(ini),
            "--shape-model",
            sm,
            "--closed-loop",
            "--out",
            str(tmp_path / "a"),
        ]
    )
    assert rc == 3
    # negative payload: config error
    rc = main(
        [
            "rollout",
            "--config",
            str(ini),
            "--shape-model",
            sm,
            "--open-loop",
            "--payload",
            "-1",
            "--out",
            str(tmp_path / "b"),
        ]
    )
    assert rc == 3
    # missing dataset file: I/O error
    rc = main(
        [
            "train-shape",
            "--config",
            str(ini),
            "--dataset",
            str(tmp_path / "missing.csv"),
            "--out",
            str(tmp_path / "c"),
        ]
    )
    assert rc == 4
    # corrupt model file: clean config error, not a traceback
    bad = tmp_path / "bad_model.json"
    bad.write_text("{not json")
    rc = main(
        [
            "train-shape",
            "--config",
            str(ini),
            "--dataset",
            str(root / "gen" / "dataset.csv"),
            "--init-model",
            str(bad),
            "--out",
            str(tmp_path / "d"),
        ]
    )
    assert rc == 3
    # dataset whose points hold NaN: numeric failure while training
    lines = (root / "gen" / "dataset.csv").read_text().splitlines()
    cells = lines[1].split(",")
    cells[5] = "nan"
    nan_ds = tmp_path / "nan.csv"
    nan_ds.write_text("\n".join([lines[0], ",".join(cells)] + lines[2:32]))
    rc = main(
        [
            "train-shape",
            "--config",
            str(ini),
            "--dataset",
            str(nan_ds),
            "--out",
            str(tmp_path / "e"),
        ]
    )
    assert rc == 5
    capsys.readouterr()


def test_unknown_config_key_is_config_error(workdir, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[robot]\nwheels = 4\n")
    rc = main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 3
