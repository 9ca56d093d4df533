"""Command line interface.

Subcommands cover the full workflow: ``generate`` simulates a dataset,
``train-shape`` fits the shape model to it, ``train-control`` trains the
policy against the frozen shape model, ``evaluate`` runs the standard
benchmark scenarios and prints a metrics table, and ``rollout`` runs a
single tracking episode.  Every command accepts ``--config`` (INI file),
``--seed``, and ``--out``; environment variables named
``SHAPECTL_<SECTION>_<KEY>`` override file values key by key, and CLI
flags override both.  The resolved configuration is written into the
output directory so any run can be reproduced from its artifacts alone.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 I/O
error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_run_config
from .control_node import (
    ControlNodeModel,
    closed_loop_track,
    count_violations,
    evaluate_tracking,
    init_control_model,
    load_control_model,
    open_loop_jacobian_track,
    place_obstacle,
    save_control_model,
    train_control_node,
)
from .reports import (
    MetricsRow,
    MetricsTable,
    read_dataset_csv,
    read_shape_eval_csv,
    read_tracking_log_csv,
    svg_path_overlay,
    write_dataset_csv,
    write_history_csv,
    write_metrics_csv,
    write_shape_eval_csv,
    write_tracking_log_csv,
)
from .robot import RobotConfig, reference_trajectory, sample_dataset
from .shape_node import (
    ShapeNodeModel,
    evaluate_shape_rmse,
    init_shape_model,
    load_shape_model,
    predict_shape_batch,
    robot_config_hash,
    save_shape_model,
    train_shape_node,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5

TRAJECTORY_KINDS = ("circle", "ellipse", "s_shape", "helix", "square")
TRACKING_KINDS = ("circle", "ellipse", "s_shape", "square")
OBSTACLE_KINDS = ("circle", "square")
PAYLOAD_GRAMS = (0.0, 5.0, 10.0, 15.0, 20.0)
SHAPE_EVAL_TRIALS = 50
TRACKING_TRIALS = 5


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve(args) -> tuple[RunConfig, Path]:
    """Config from defaults, file, environment, then CLI flags."""
    cfg = load_run_config(args.config, os.environ)
    if args.seed is not None:
        cfg.set_raw("run", "seed", str(args.seed))
    for flag, section, key in (
        ("n_samples", "run", "n_samples"),
        ("scenario", "run", "scenario"),
        ("trajectory", "run", "trajectory"),
        ("payload", "run", "payload_grams"),
        ("obstacle", "run", "obstacle"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set_raw(section, key, str(value))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    (out / "resolved_config.ini").write_text(cfg.resolved_text(), encoding="utf-8")


def _check_kind(kind: str) -> str:
    if kind not in TRAJECTORY_KINDS:
        raise ConfigError(
            f"unknown trajectory {kind!r}; pick one of {', '.join(TRAJECTORY_KINDS)}"
        )
    return kind


def _load_shape(path, robot: RobotConfig) -> ShapeNodeModel:
    try:
        model, saved = load_shape_model(path)
    except ValueError as exc:
        raise ConfigError(f"cannot load shape model: {exc}") from exc
    if robot_config_hash(saved) != robot_config_hash(robot):
        raise ConfigError("shape model was trained for a different robot config")
    return model


def _load_control(path, robot: RobotConfig) -> ControlNodeModel:
    try:
        model, saved = load_control_model(path)
    except ValueError as exc:
        raise ConfigError(f"cannot load control model: {exc}") from exc
    if robot_config_hash(saved) != robot_config_hash(robot):
        raise ConfigError("control model was trained for a different robot config")
    return model


def _reference_polyline(kind: str, length: float, period: float) -> np.ndarray:
    times = np.linspace(0.0, period, 401)
    return reference_trajectory(kind, times, length, period)


def _ensure_obstacle(cfg: RunConfig, shape_model: ShapeNodeModel, robot: RobotConfig):
    """Obstacle from config, or placed on the swept body and recorded
    back into the config so the resolved file reproduces the run."""
    spec = cfg.obstacle_spec()
    if spec is None:
        kind = _check_kind(cfg.get("run", "trajectory"))
        center = place_obstacle(
            shape_model, robot, kind, period=cfg.get("run", "period")
        )
        cfg.values[("run", "obstacle")] = tuple(float(v) for v in center)
        spec = cfg.obstacle_spec()
    return spec


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg, out = _resolve(args)
    _write_resolved(cfg, out)
    robot = cfg.robot_config()
    n = cfg.get("run", "n_samples")
    seed = cfg.get("run", "seed")
    samples = sample_dataset(robot, n, np.random.default_rng(seed))
    path = out / "dataset.csv"
    write_dataset_csv(path, samples, robot)
    print(f"wrote {n} samples (seed {seed}) to {path}")
    return EXIT_OK


def cmd_train_shape(args) -> int:
    cfg, out = _resolve(args)
    _write_resolved(cfg, out)
    robot = cfg.robot_config()
    try:
        dataset = read_dataset_csv(args.dataset, robot)
    except ValueError as exc:
        raise ConfigError(f"cannot use dataset: {exc}") from exc
    train_cfg = cfg.shape_train_config()
    if args.init_model is not None:
        model = _load_shape(args.init_model, robot)
    else:
        solver = cfg.get("shape", "solver")
        if solver not in ("euler", "rk4", "fixed-adams"):
            raise ConfigError(f"unknown solver {solver!r}")
        model = init_shape_model(
            np.random.default_rng(train_cfg.seed + 1),
            robot,
            hidden=cfg.get("shape", "hidden"),
            solver=solver,
            steps_per_segment=cfg.get("shape", "steps_per_segment"),
        )
    t0 = time.monotonic()
    model, history = train_shape_node(dataset, train_cfg, robot, model=model)
    minutes = (time.monotonic() - t0) / 60.0
    save_shape_model(out / "shape_model.json", model, robot)
    write_history_csv(
        out / "shape_history.csv", history, ["iteration", "train_loss", "val_loss"]
    )
    # report on the same held-out split the trainer used
    perm = np.random.default_rng(train_cfg.seed).permutation(len(dataset))
    n_val = max(1, int(round(train_cfg.val_fraction * len(dataset))))
    val = [dataset[i] for i in perm[:n_val]]
    res = evaluate_shape_rmse(model, val, robot)
    rmse = res.rmse_mm
    print(f"trained {len(history)} iterations in {minutes:.1f} min")
    print(f"final train loss {history[-1][1]:.8f}")
    print(
        f"final val RMSE (mm): x={rmse[0]:.4f} y={rmse[1]:.4f} z={rmse[2]:.4f}"
        f" over {res.n_samples} samples"
    )
    print(f"wrote {out / 'shape_model.json'}")
    return EXIT_OK


def cmd_train_control(args) -> int:
    cfg, out = _resolve(args)
    robot = cfg.robot_config()
    shape_model = _load_shape(args.shape_model, robot)
    scenario = cfg.get("run", "scenario")
    if scenario not in ("tracking", "obstacle"):
        raise ConfigError(f"unknown scenario {scenario!r} for train-control")
    obstacle = _ensure_obstacle(cfg, shape_model, robot) if scenario == "obstacle" else None
    _write_resolved(cfg, out)
    train_cfg = cfg.control_train_config()
    loss_cfg = cfg.control_loss_config()
    model = init_control_model(
        np.random.default_rng(train_cfg.seed + 1),
        robot,
        hidden=cfg.get("control", "hidden"),
        horizon=cfg.get("control", "horizon"),
        dt=cfg.get("control", "dt"),
        rate_scale=cfg.get("control", "rate_scale"),
    )
    t0 = time.monotonic()
    model, history = train_control_node(
        shape_model,
        robot,
        train_cfg,
        loss_cfg,
        scenario=scenario,
        obstacle=obstacle,
        model=model,
    )
    minutes = (time.monotonic() - t0) / 60.0
    save_control_model(out / "control_model.json", model, robot)
    write_history_csv(out / "control_history.csv", history, ["iteration", "train_loss"])
    if obstacle is not None:
        c = obstacle.center
        print(f"obstacle at ({c[0]:.4f}, {c[1]:.4f}, {c[2]:.4f})")
    print(f"trained {len(history)} iterations in {minutes:.1f} min")
    print(f"final train loss {history[-1][1]:.6f}")
    print(f"wrote {out / 'control_model.json'}")
    return EXIT_OK


def _tracking_rows(
    kind: str, paths: list[Path], rows: list[MetricsRow]
) -> list:
    """Read logs back and append one metrics row per axis."""
    logs = [read_tracking_log_csv(p) for p in paths]
    m = evaluate_tracking(logs)
    for j, axis in enumerate("xyz"):
        rows.append(
            MetricsRow(kind, axis, float(m.rmse_mm[j]), float(m.std_mm[j]), len(logs))
        )
    return logs


def _eval_shape(cfg: RunConfig, out: Path, args) -> MetricsTable:
    robot = cfg.robot_config()
    model = _load_shape(args.shape_model, robot)
    seed = cfg.get("run", "seed")
    samples = []
    for i in range(SHAPE_EVAL_TRIALS):
        samples.extend(
            sample_dataset(
                robot,
                1,
                np.random.default_rng(seed + i),
                points_per_segment=model.steps_per_segment,
            )
        )
    truth = np.array([s.shape.points[1:] for s in samples])
    pred = predict_shape_batch(model, np.array([s.action.q for s in samples]), robot)
    write_shape_eval_csv(out / "shape_eval.csv", truth, pred)
    t, p = read_shape_eval_csv(out / "shape_eval.csv")
    err = (p - t).reshape(-1, 3)
    rmse = np.sqrt((err * err).mean(axis=0)) * 1000.0
    std = err.std(axis=0) * 1000.0
    rows = [
        MetricsRow("shape", axis, float(rmse[j]), float(std[j]), SHAPE_EVAL_TRIALS)
        for j, axis in enumerate("xyz")
    ]
    side = np.column_stack  # x-z side view shows the backbone bending
    svg_path_overlay(
        out / "shape_eval.svg",
        [
            ("simulated", side([truth[0, :, 0], truth[0, :, 2]])),
            ("model", side([p[0, :, 0], p[0, :, 2]])),
        ],
        "backbone, first evaluation sample",
    )
    return MetricsTable(rows=rows)


def _eval_tracking(cfg: RunConfig, out: Path, args) -> MetricsTable:
    robot = cfg.robot_config()
    shape_model = _load_shape(args.shape_model, robot)
    if args.control_model is None:
        raise ConfigError("tracking evaluation needs --control-model")
    policy = _load_control(args.control_model, robot)
    seed = cfg.get("run", "seed")
    duration = cfg.get("run", "duration")
    period = cfg.get("run", "period")
    noise = cfg.get("control", "noise_std")
    rows: list[MetricsRow] = []
    for kind in TRACKING_KINDS:
        paths = []
        for i in range(TRACKING_TRIALS):
            log = closed_loop_track(
                policy,
                shape_model,
                robot,
                kind,
                duration=duration,
                period=period,
                noise_std=noise,
                rng=np.random.default_rng(seed + i),
            )
            path = out / f"track_{kind}_trial{i}.csv"
            write_tracking_log_csv(path, log)
            paths.append(path)
        logs = _tracking_rows(kind, paths, rows)
        svg_path_overlay(
            out / f"track_{kind}.svg",
            [
                ("reference", _reference_polyline(kind, robot.total_length, period)),
                ("achieved", logs[0].tips),
            ],
            f"{kind} tracking, trial 0",
        )
    return MetricsTable(rows=rows)


def _eval_payload(cfg: RunConfig, out: Path, args) -> MetricsTable:
    robot = cfg.robot_config()
    shape_model = _load_shape(args.shape_model, robot)
    if args.control_model is None:
        raise ConfigError("payload evaluation needs --control-model")
    policy = _load_control(args.control_model, robot)
    seed = cfg.get("run", "seed")
    duration = cfg.get("run", "duration")
    period = cfg.get("run", "period")
    noise = cfg.get("control", "noise_std")
    kind = "helix"
    rows: list[MetricsRow] = []
    first_logs = {}
    for grams in PAYLOAD_GRAMS:
        paths = []
        for i in range(TRACKING_TRIALS):
            log = closed_loop_track(
                policy,
                shape_model,
                robot,
                kind,
                duration=duration,
                period=period,
                payload_grams=grams,
                noise_std=noise,
                rng=np.random.default_rng(seed + i),
            )
            path = out / f"payload_{grams:g}g_trial{i}.csv"
            write_tracking_log_csv(path, log)
            paths.append(path)
        logs = [read_tracking_log_csv(p) for p in paths]
        first_logs[grams] = logs[0]
        err = np.concatenate([log.errors for log in logs], axis=0)
        norms = np.sqrt((err * err).sum(axis=1))
        rows.append(
            MetricsRow(
                f"payload_{grams:g}g",
                "xyz",
                float(np.sqrt((norms * norms).mean()) * 1000.0),
                float(norms.std() * 1000.0),
                TRACKING_TRIALS,
            )
        )
    svg_path_overlay(
        out / "payload_helix.svg",
        [
            ("reference", _reference_polyline(kind, robot.total_length, period)),
            ("0 g", first_logs[PAYLOAD_GRAMS[0]].tips),
            ("20 g", first_logs[PAYLOAD_GRAMS[-1]].tips),
        ],
        "helix tracking under payload, trial 0",
    )
    return MetricsTable(rows=rows)


def _eval_obstacle(cfg: RunConfig, out: Path, args) -> MetricsTable:
    robot = cfg.robot_config()
    shape_model = _load_shape(args.shape_model, robot)
    if args.control_model is None:
        raise ConfigError("obstacle evaluation needs --control-model")
    policy = _load_control(args.control_model, robot)
    baseline = (
        _load_control(args.baseline_model, robot)
        if args.baseline_model is not None
        else None
    )
    obstacle = _ensure_obstacle(cfg, shape_model, robot)
    seed = cfg.get("run", "seed")
    duration = cfg.get("run", "duration")
    period = cfg.get("run", "period")
    noise = cfg.get("control", "noise_std")
    rows: list[MetricsRow] = []
    summary = []
    for kind in OBSTACLE_KINDS:
        for label, m in (("", policy), ("baseline_", baseline)):
            if m is None:
                continue
            paths = []
            for i in range(TRACKING_TRIALS):
                log = closed_loop_track(
                    m,
                    shape_model,
                    robot,
                    kind,
                    duration=duration,
                    period=period,
                    obstacle=obstacle,
                    noise_std=noise,
                    rng=np.random.default_rng(seed + i),
                )
                path = out / f"obstacle_{label}{kind}_trial{i}.csv"
                write_tracking_log_csv(path, log)
                paths.append(path)
            logs = _tracking_rows(label + kind, paths, rows)
            violations = sum(count_violations(log, obstacle) for log in logs)
            ticks = sum(log.n_ticks for log in logs)
            summary.append((label + kind, violations, ticks))
            if not label:
                svg_path_overlay(
                    out / f"obstacle_{kind}.svg",
                    [
                        (
                            "reference",
                            _reference_polyline(kind, robot.total_length, period),
                        ),
                        ("achieved", logs[0].tips),
                    ],
                    f"{kind} with obstacle, trial 0",
                    marks=[
                        (
                            float(obstacle.center[0]),
                            float(obstacle.center[1]),
                            float(np.sqrt(obstacle.threshold_sq)),
                        )
                    ],
                )
    c = obstacle.center
    print(
        f"obstacle at ({c[0]:.4f}, {c[1]:.4f}, {c[2]:.4f}),"
        f" threshold {np.sqrt(obstacle.threshold_sq) * 1000.0:.1f} mm"
    )
    for name, violations, ticks in summary:
        print(f"{name}: {violations} violation ticks of {ticks}")
    return MetricsTable(rows=rows)


def cmd_evaluate(args) -> int:
    cfg, out = _resolve(args)
    scenario = cfg.get("run", "scenario")
    if scenario == "shape":
        _write_resolved(cfg, out)
        table = _eval_shape(cfg, out, args)
    elif scenario == "tracking":
        _write_resolved(cfg, out)
        table = _eval_tracking(cfg, out, args)
    elif scenario == "payload":
        _write_resolved(cfg, out)
        table = _eval_payload(cfg, out, args)
    elif scenario == "obstacle":
        robot = cfg.robot_config()
        _ensure_obstacle(cfg, _load_shape(args.shape_model, robot), robot)
        _write_resolved(cfg, out)
        table = _eval_obstacle(cfg, out, args)
    else:
        raise ConfigError(f"unknown evaluation scenario {scenario!r}")
    write_metrics_csv(out / "metrics.csv", table)
    print(table.format_table())
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg, out = _resolve(args)
    robot = cfg.robot_config()
    shape_model = _load_shape(args.shape_model, robot)
    kind = _check_kind(cfg.get("run", "trajectory"))
    obstacle = cfg.obstacle_spec()
    _write_resolved(cfg, out)
    duration = cfg.get("run", "duration")
    period = cfg.get("run", "period")
    payload = cfg.get("run", "payload_grams")
    if payload < 0:
        raise ConfigError("payload must be non-negative")
    seed = cfg.get("run", "seed")
    if args.closed_loop:
        if args.control_model is None:
            raise ConfigError("closed-loop rollout needs --control-model")
        policy = _load_control(args.control_model, robot)
        log = closed_loop_track(
            policy,
            shape_model,
            robot,
            kind,
            duration=duration,
            period=period,
            payload_grams=payload,
            obstacle=obstacle,
            noise_std=cfg.get("control", "noise_std"),
            rng=np.random.default_rng(seed),
        )
        mode = "closed-loop"
    else:
        log = open_loop_jacobian_track(
            shape_model,
            robot,
            kind,
            duration=duration,
            period=period,
            payload_grams=payload,
            obstacle=obstacle,
        )
        mode = "open-loop"
    path = out / "rollout.csv"
    write_tracking_log_csv(path, log)
    if log.n_ticks > 0:
        m = evaluate_tracking(read_tracking_log_csv(path))
        print(
            f"{mode} {kind}: {m.n_ticks} ticks,"
            f" aggregate RMSE {m.aggregate_rmse_mm:.3f} mm"
        )
    else:
        print(f"{mode} {kind}: 0 ticks")
    if obstacle is not None:
        print(f"violation ticks: {count_violations(log, obstacle)}")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapectl",
        description="Continuum-robot shape estimation and control workflows.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="master RNG seed")
    common.add_argument("--out", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="simulate a dataset")
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-shape", parents=[common], help="fit the shape model")
    p.add_argument("--dataset", required=True, help="dataset CSV")
    p.add_argument("--init-model", help="resume from a saved shape model")
    p.set_defaults(func=cmd_train_shape)

    p = sub.add_parser("train-control", parents=[common], help="train the policy")
    p.add_argument("--shape-model", required=True, help="saved shape model")
    p.add_argument("--scenario", choices=("tracking", "obstacle"))
    p.set_defaults(func=cmd_train_control)

    p = sub.add_parser("evaluate", parents=[common], help="run benchmark scenarios")
    p.add_argument("--shape-model", required=True, help="saved shape model")
    p.add_argument("--control-model", help="saved control model")
    p.add_argument("--baseline-model", help="obstacle scenario comparison model")
    p.add_argument(
        "--scenario", choices=("shape", "tracking", "obstacle", "payload")
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rollout", parents=[common], help="run one tracking episode")
    p.add_argument("--shape-model", required=True, help="saved shape model")
    p.add_argument("--control-model", help="saved control model")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--open-loop", action="store_true")
    mode.add_argument("--closed-loop", action="store_true")
    p.add_argument("--trajectory", choices=TRAJECTORY_KINDS)
    p.add_argument("--payload", type=float, help="payload mass in grams")
    p.add_argument("--obstacle", help="obstacle center as x,y,z")
    p.set_defaults(func=cmd_rollout)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
