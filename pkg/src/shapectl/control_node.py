"""Time-domain neural ODE policy for whole-body tip control.

The policy is an MLP whose output drives the pre-activation action state
z through time; the emitted action is q = q_min + (tanh(z)+1)/2 *
(q_max - q_min), so bounds hold exactly for all time.  A rollout
alternates policy steps with shape-model solves: the observation at
every horizon step is the model-predicted backbone (downsampled to nine
equal-arc points), the predicted tip, the current action, and the goal.
Training minimizes an MPC-style loss over the horizon (tracking, action
rate, shape consistency, terminal, optional obstacle proximity) through
the full rollout.  Deployment runs receding-horizon: observe the
simulated robot, re-plan, apply the first action.  The open-loop
baseline integrates q' = J+ g' with the damped pseudo-inverse of the
model tip Jacobian and no feedback.

The policy state advances with one explicit Euler step per horizon step.
With the observation frozen over the step the stage dynamics are
constant, so any single-step scheme lands on the same value, and a
memoryless step keeps re-planning from an achieved state consistent
with continuing the previous plan.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tape, Tensor
from .nn import (
    AdamConfig,
    MlpParams,
    MlpTensors,
    adam_step,
    collect_mlp_grads,
    init_mlp,
    mlp_forward,
    params_from_dict,
    params_to_dict,
)
from .robot import (
    ActionVector,
    ObstacleSpec,
    RobotConfig,
    forward_kinematics,
    min_obstacle_distance,
    reference_trajectory,
)
from .shape_node import (
    ShapeNodeModel,
    ShapeRollout,
    robot_config_hash,
    rollout_shape,
    tip_jacobian,
)

OBS_POINTS = 9  # backbone samples per observation, tip included

CONTROL_MODEL_FORMAT = "control-node-v1"

TICKS_PER_PERIOD = 200


def observation_dim(config: RobotConfig) -> int:
    """Observation width: 9 backbone points, tip, action, goal."""
    return 3 * OBS_POINTS + 3 + config.action_dim + 3


@dataclass
class ControlLossConfig:
    """Weights and noise settings for the MPC-style rollout loss."""

    tracking_weight: float = 5000.0
    action_rate_weight: float = 100.0
    shape_weight: float = 200.0
    terminal_weight: float = 1000.0
    obstacle_weight: float = 100.0
    obstacle_threshold_sq: float = 1e-4
    obstacle_sharpness: float | None = None
    noise_std: float = 0.00033

    def __post_init__(self):
        weights = (
            self.tracking_weight,
            self.action_rate_weight,
            self.shape_weight,
            self.terminal_weight,
            self.obstacle_weight,
        )
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be non-negative")
        if self.obstacle_threshold_sq <= 0:
            raise ValueError("obstacle threshold must be positive")
        if self.obstacle_sharpness is not None and self.obstacle_sharpness <= 0:
            raise ValueError("obstacle sharpness must be positive")
        if self.noise_std < 0:
            raise ValueError("noise stddev must be non-negative")

    @property
    def tau(self) -> float:
        """Width of the smooth obstacle surrogate; defaults to thr/10."""
        if self.obstacle_sharpness is not None:
            return self.obstacle_sharpness
        return self.obstacle_threshold_sq / 10.0


@dataclass
class ControlTrainConfig:
    """Optimization schedule for :func:`train_control_node`."""

    batch_size: int = 256
    iterations: int = 10_000
    learning_rate: float = 1e-3
    reset_scale: float = 0.2
    target_scale: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.reset_scale < 1.0:
            raise ValueError("reset_scale must lie in (0, 1)")
        if self.target_scale <= 0:
            raise ValueError("target_scale must be positive")


@dataclass
class ControlNodeModel:
    """Policy network plus the action-space and horizon it was built for."""

    params: MlpParams
    n_segments: int
    q_min: float
    q_max: float
    horizon: int = 10
    dt: float = 1.0
    rate_scale: float = 1.0

    def __post_init__(self):
        sizes = self.params.sizes
        expect_in = 3 * OBS_POINTS + 3 + 2 * self.n_segments + 3
        if sizes[0] != expect_in or sizes[-1] != 2 * self.n_segments:
            raise ValueError(
                f"policy must map {expect_in} -> {2 * self.n_segments}, "
                f"got {sizes[0]} -> {sizes[-1]}"
            )
        if self.params.out_activation != "tanh":
            raise ValueError("policy output activation must be tanh")
        if not self.q_min < self.q_max:
            raise ValueError("q_min must be below q_max")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.dt <= 0 or self.rate_scale <= 0:
            raise ValueError("dt and rate_scale must be positive")

    @property
    def action_dim(self) -> int:
        return 2 * self.n_segments

    def copy(self) -> "ControlNodeModel":
        return ControlNodeModel(
            params=self.params.copy(),
            n_segments=self.n_segments,
            q_min=self.q_min,
            q_max=self.q_max,
            horizon=self.horizon,
            dt=self.dt,
            rate_scale=self.rate_scale,
        )


def init_control_model(
    rng: np.random.Generator,
    config: RobotConfig,
    hidden: tuple[int, ...] = (256, 256),
    horizon: int = 10,
    dt: float = 1.0,
    rate_scale: float = 1.0,
) -> ControlNodeModel:
    """Fresh Glorot-initialized policy for one robot geometry."""
    in_dim = observation_dim(config)
    out_dim = config.action_dim
    # positions in meters get x10, actions normalize by the bound
    input_scale = np.concatenate(
        [
            np.full(3 * OBS_POINTS + 3, 10.0),
            np.full(out_dim, 1.0 / config.u_max),
            np.full(3, 10.0),
        ]
    )
    params = init_mlp(
        rng,
        [in_dim, *hidden, out_dim],
        out_activation="tanh",
        input_scale=input_scale,
    )
    return ControlNodeModel(
        params=params,
        n_segments=config.n_segments,
        q_min=config.q_min,
        q_max=config.q_max,
        horizon=horizon,
        dt=dt,
        rate_scale=rate_scale,
    )


def bound_actions(z: Tensor, q_min: float, q_max: float) -> Tensor:
    """Map the unbounded state to q_min + (tanh(z)+1)/2 (q_max - q_min)."""
    half = 0.5 * (q_max - q_min)
    mid = 0.5 * (q_max + q_min)
    return ad.add_const(ad.scale(ad.tanh(z), half), mid)


def unbound_actions(q: Array, q_min: float, q_max: float) -> Array:
    """Inverse of :func:`bound_actions`; actions must be strictly inside."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= q_min) or np.any(q >= q_max):
        raise ValueError("actions must lie strictly inside the bounds")
    half = 0.5 * (q_max - q_min)
    mid = 0.5 * (q_max + q_min)
    return np.arctanh((q - mid) / half)


def _downsample_plan(
    n_points: int, n_out: int = OBS_POINTS
) -> list[tuple[int, int, float]]:
    """Interpolation stencil mapping the solver grid to equal-arc samples.

    Output i targets arc fraction (i+1)/n_out; with grid point j sitting
    at fraction (j+1)/n_points, each entry gives (j0, j1, w) for the
    convex combination (1-w) point[j0] + w point[j1].  The final entry
    is always the tip exactly.
    """
    if n_points < n_out:
        raise ValueError("grid has fewer points than the downsample asks for")
    plan = []
    for i in range(1, n_out + 1):
        target = i * n_points / n_out - 1.0
        j0 = min(int(np.floor(target)), n_points - 1)
        w = target - j0
        if w < 1e-12:
            plan.append((j0, j0, 0.0))
        else:
            plan.append((j0, min(j0 + 1, n_points - 1), w))
    return plan


def downsample_shape(points: list[Tensor], n_out: int = OBS_POINTS) -> list[Tensor]:
    """Nine equal-arc backbone tensors (tip last) from rollout points."""
    out = []
    for j0, j1, w in _downsample_plan(len(points), n_out):
        if w == 0.0:
            out.append(points[j0])
        else:
            out.append(
                ad.add(ad.scale(points[j0], 1.0 - w), ad.scale(points[j1], w))
            )
    return out


def downsample_backbone(points: Array, n_out: int = OBS_POINTS) -> Array:
    """Value twin of :func:`downsample_shape` for a (1 + P, 3) backbone.

    The input includes the base row, which the stencil never samples;
    the arithmetic matches the tensor version bitwise.
    """
    pts = np.asarray(points, dtype=np.float64)[1:]
    rows = []
    for j0, j1, w in _downsample_plan(pts.shape[0], n_out):
        if w == 0.0:
            rows.append(pts[j0])
        else:
            rows.append(pts[j0] * (1.0 - w) + pts[j1] * w)
    return np.stack(rows, axis=0)


@dataclass
class RolloutResult:
    """One differentiable policy rollout over the horizon.

    ``actions``/``tips`` hold the M post-step tensors; ``shapes_ds`` has
    M+1 entries of nine backbone tensors each (index 0 is the initial
    shape); ``rollouts[k]`` is the full shape solve behind step k (None
    at index 0 when the initial observation came from outside).
    ``policy_tensors`` is the tape-resident parameter set every step
    reused, so adjoints accumulate across the horizon.
    """

    actions: list[Tensor]
    tips: list[Tensor]
    shapes_ds: list[list[Tensor]]
    rollouts: list[ShapeRollout | None]
    policy_tensors: MlpTensors
    q0: Array
    goals: Array

    @property
    def horizon(self) -> int:
        return len(self.actions)


def _as_goal_array(goal, horizon: int, batch: int) -> Array:
    """Normalize goal input to shape (horizon, batch, 3)."""
    if callable(goal):
        rows = [
            np.broadcast_to(np.asarray(goal(k), dtype=np.float64), (batch, 3))
            for k in range(horizon)
        ]
        return np.stack(rows, axis=0).copy()
    arr = np.asarray(goal, dtype=np.float64)
    if arr.ndim == 2:
        if arr.shape != (batch, 3):
            raise ValueError(f"goal must have shape ({batch}, 3)")
        return np.broadcast_to(arr, (horizon, batch, 3)).copy()
    if arr.shape != (horizon, batch, 3):
        raise ValueError(f"goal must have shape ({horizon}, {batch}, 3)")
    return arr


def rollout_policy(
    policy: ControlNodeModel,
    shape_model: ShapeNodeModel,
    config: RobotConfig,
    tape: Tape,
    q0: Array,
    goal,
    horizon: int | None = None,
    noise_rng: np.random.Generator | None = None,
    noise_std: float = 0.0,
    noise_first_only: bool = False,
    initial_rollout: ShapeRollout | None = None,
    initial_observation: tuple[Array, Array] | None = None,
) -> RolloutResult:
    """Roll the policy for M horizon steps against the shape model.

    ``goal`` is a (batch, 3) array held fixed over the horizon, an
    (M, batch, 3) array, or a callable step -> (batch, 3).  The initial
    shape comes from ``initial_rollout`` (tensors already on this tape),
    from ``initial_observation`` ((shape_ds, tip) value arrays, e.g. a
    camera view of the real robot), or from a fresh shape solve at
    ``q0``.  Gaussian noise of ``noise_std`` perturbs every component of
    the observation; ``noise_first_only`` noises only the first step,
    modeling sensor noise on real feedback with noise-free internal
    predictions.
    """
    if initial_rollout is not None and initial_observation is not None:
        raise ValueError("give either initial_rollout or initial_observation")
    q0 = np.asarray(q0, dtype=np.float64)
    batch = q0.shape[0]
    m = policy.horizon if horizon is None else horizon
    if m < 1:
        raise ValueError("horizon must be at least 1")
    goals = _as_goal_array(goal, m, batch)

    if initial_observation is not None:
        ds_val, tip_val = initial_observation
        ds_val = np.asarray(ds_val, dtype=np.float64)
        if ds_val.shape != (batch, OBS_POINTS, 3):
            raise ValueError(
                f"initial shape must have shape ({batch}, {OBS_POINTS}, 3)"
            )
        shape_ds = [tape.tensor(ds_val[:, i]) for i in range(OBS_POINTS)]
        cur_tip = tape.tensor(np.asarray(tip_val, dtype=np.float64))
        first_rollout = None
    else:
        first_rollout = (
            initial_rollout
            if initial_rollout is not None
            else rollout_shape(shape_model, config, tape, q0)
        )
        shape_ds = downsample_shape(first_rollout.points)
        cur_tip = first_rollout.tip

    pmt = policy.params.as_tensors(tape)
    z = tape.tensor(unbound_actions(q0, policy.q_min, policy.q_max))
    q_cur = tape.tensor(q0)
    actions: list[Tensor] = []
    tips: list[Tensor] = []
    shapes_ds: list[list[Tensor]] = [shape_ds]
    rollouts: list[ShapeRollout | None] = [first_rollout]
    for k in range(m):
        try:
            goal_leaf = tape.tensor(goals[k])
            obs = ad.concat(shapes_ds[k] + [cur_tip, q_cur, goal_leaf], axis=1)
            if (
                noise_rng is not None
                and noise_std > 0.0
                and (k == 0 or not noise_first_only)
            ):
                obs = ad.add_const(
                    obs, noise_rng.normal(0.0, noise_std, size=obs.value.shape)
                )
            drive = mlp_forward(pmt, obs)
            z = ad.add(z, ad.scale(drive, policy.rate_scale * policy.dt))
            q_cur = bound_actions(z, policy.q_min, policy.q_max)
            ro = rollout_shape(shape_model, config, tape, q_cur)
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"policy rollout failed at horizon step {k + 1}: {exc}"
            ) from exc
        actions.append(q_cur)
        tips.append(ro.tip)
        cur_tip = ro.tip
        shapes_ds.append(downsample_shape(ro.points))
        rollouts.append(ro)
    return RolloutResult(
        actions=actions,
        tips=tips,
        shapes_ds=shapes_ds,
        rollouts=rollouts,
        policy_tensors=pmt,
        q0=q0,
        goals=goals,
    )


def _min_sq_distance(points: list[Tensor], center: Array) -> Tensor:
    """Min squared obstacle distance per sample, subgradient at argmin."""
    d2 = [
        ad.reduce_sum(ad.square(ad.add_const(p, -center)), axis=1)
        for p in points
    ]
    stacked = np.stack([t.value for t in d2], axis=1)
    idx = np.argmin(stacked, axis=1)
    total: Tensor | None = None
    for j, t in enumerate(d2):
        mask = (idx == j).astype(np.float64)
        if not mask.any():
            continue
        part = ad.cmul(t, mask)
        total = part if total is None else ad.add(total, part)
    return total


def control_loss(
    result: RolloutResult,
    cfg: ControlLossConfig,
    obstacle: ObstacleSpec | None = None,
) -> Tensor:
    """Batch-mean MPC loss over the rollout, as a scalar tensor.

    Sum over horizon steps of tracking, action-rate, and shape
    consistency terms, a terminal tracking term, and (when an obstacle
    is given) a smooth proximity penalty on the closest predicted
    backbone point, standing in for the hard violation indicator.
    """
    m = result.horizon
    tape = result.actions[0].tape
    q0_leaf = tape.tensor(result.q0)
    total: Tensor | None = None

    def accumulate(term: Tensor, weight: float):
        nonlocal total
        part = ad.scale(term, weight)
        total = part if total is None else ad.add(total, part)

    for k in range(1, m + 1):
        if cfg.tracking_weight > 0.0:
            tip_err = ad.add_const(result.tips[k - 1], -result.goals[k - 1])
            accumulate(
                ad.reduce_mean(ad.reduce_sum(ad.square(tip_err), axis=1)),
                cfg.tracking_weight,
            )
        if cfg.action_rate_weight > 0.0:
            prev_q = q0_leaf if k == 1 else result.actions[k - 2]
            dq = ad.sub(result.actions[k - 1], prev_q)
            accumulate(
                ad.reduce_mean(ad.reduce_sum(ad.square(dq), axis=1)),
                cfg.action_rate_weight,
            )
        if cfg.shape_weight > 0.0:
            for prev_p, cur_p in zip(result.shapes_ds[k - 1], result.shapes_ds[k]):
                dp = ad.sub(cur_p, prev_p)
                accumulate(
                    ad.reduce_mean(ad.reduce_sum(ad.square(dp), axis=1)),
                    cfg.shape_weight,
                )
        if obstacle is not None and cfg.obstacle_weight > 0.0:
            d2min = _min_sq_distance(result.rollouts[k].points, obstacle.center)
            margin = ad.scale(
                ad.add_const(ad.neg(d2min), cfg.obstacle_threshold_sq),
                1.0 / cfg.tau,
            )
            accumulate(ad.reduce_mean(ad.sigmoid(margin)), cfg.obstacle_weight)
    if cfg.terminal_weight > 0.0:
        tip_err = ad.add_const(result.tips[m - 1], -result.goals[m - 1])
        accumulate(
            ad.reduce_mean(ad.reduce_sum(ad.square(tip_err), axis=1)),
            cfg.terminal_weight,
        )
    if total is None:
        raise ValueError("every loss term has zero weight")
    return total


def clamp_to_workspace(targets: Array, config: RobotConfig) -> Array:
    """Pull targets into the reachable dome: z >= 0, norm <= 0.98 L."""
    out = np.array(targets, dtype=np.float64)
    out[:, 2] = np.maximum(out[:, 2], 0.0)
    limit = 0.98 * config.total_length
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    over = norms > limit
    return np.where(over, out * (limit / np.where(over, norms, 1.0)), out)


def train_control_node(
    shape_model: ShapeNodeModel,
    config: RobotConfig,
    train_cfg: ControlTrainConfig,
    loss_cfg: ControlLossConfig,
    scenario: str = "tracking",
    obstacle: ObstacleSpec | None = None,
    model: ControlNodeModel | None = None,
    hidden: tuple[int, ...] = (256, 256),
) -> tuple[ControlNodeModel, list[tuple[int, float]]]:
    """Train the policy MPC-style against the frozen shape model.

    Every iteration draws a fresh batch of episodes: reset actions
    uniform within +-reset_scale * u_max, goals the episode's initial
    predicted tip perturbed by +-target_scale per axis and clamped to
    the workspace.  The obstacle scenario adds the proximity penalty
    around a fixed obstacle.  Returns the model and the history rows
    (iteration, train_loss).
    """
    if scenario not in ("tracking", "obstacle"):
        raise ValueError(f"unknown scenario {scenario!r}")
    if scenario == "obstacle" and obstacle is None:
        raise ValueError("obstacle scenario needs an obstacle")
    loss_obstacle = obstacle if scenario == "obstacle" else None
    rng = np.random.default_rng(train_cfg.seed)
    if model is None:
        model = init_control_model(rng, config, hidden=hidden)
    adam = AdamConfig(lr=train_cfg.learning_rate)
    reset_span = train_cfg.reset_scale * config.u_max
    history: list[tuple[int, float]] = []
    for it in range(1, train_cfg.iterations + 1):
        q0 = rng.uniform(
            -reset_span, reset_span, (train_cfg.batch_size, config.action_dim)
        )
        try:
            tape = Tape()
            roll0 = rollout_shape(shape_model, config, tape, q0)
            targets = roll0.tip.value + rng.uniform(
                -train_cfg.target_scale,
                train_cfg.target_scale,
                (train_cfg.batch_size, 3),
            )
            targets = clamp_to_workspace(targets, config)
            result = rollout_policy(
                model,
                shape_model,
                config,
                tape,
                q0,
                targets,
                noise_rng=rng,
                noise_std=loss_cfg.noise_std,
                initial_rollout=roll0,
            )
            loss = control_loss(result, loss_cfg, loss_obstacle)
            train_loss = float(loss.value)
            if not np.isfinite(train_loss):
                raise FloatingPointError("loss is not finite")
            grads = ad.backward(loss)
            policy_grads = collect_mlp_grads(grads, result.policy_tensors)
            adam_step(model.params, policy_grads, adam)
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"control training diverged at iteration {it}: {exc}"
            ) from exc
        history.append((it, train_loss))
    return model, history


# ---------------------------------------------------------------------------
# deployment


@dataclass
class TrackingLog:
    """Tick-by-tick record of one tracking run."""

    times: Array
    goals: Array
    tips: Array
    actions: Array
    min_obstacle_dist: Array | None = None

    @property
    def n_ticks(self) -> int:
        return self.times.shape[0]

    @property
    def errors(self) -> Array:
        return self.tips - self.goals


def damped_pinv(jac: Array, damping: float = 1e-6) -> Array:
    """J+ = J^T (J J^T + damping I)^-1, safe at singular configurations."""
    jac = np.asarray(jac, dtype=np.float64)
    gram = jac @ jac.T + damping * np.eye(jac.shape[0])
    return np.linalg.solve(gram, jac).T


def _clip_inside(q: Array, q_min: float, q_max: float, margin: float = 1e-6) -> Array:
    return np.clip(q, q_min + margin, q_max - margin)


def ik_solve(
    shape_model: ShapeNodeModel,
    config: RobotConfig,
    target: Array,
    q_init: Array | None = None,
    max_iters: int = 200,
    tol: float = 1e-4,
    damping: float = 1e-6,
) -> Array:
    """Damped least-squares inverse kinematics on the model tip.

    Returns the best iterate seen; stops early once within ``tol`` of the
    target or when the error stalls, which is what happens at the closest
    approach to an unreachable target.
    """
    target = np.asarray(target, dtype=np.float64)
    q = (
        np.zeros(config.action_dim)
        if q_init is None
        else np.asarray(q_init, dtype=np.float64).copy()
    )
    best_q, best_norm, stalled = q, np.inf, 0
    for _ in range(max_iters):
        tape = Tape()
        tip = rollout_shape(shape_model, config, tape, q[None]).tip.value[0]
        err = target - tip
        norm = float(np.linalg.norm(err))
        if norm < (1.0 - 1e-3) * best_norm:
            best_q, best_norm, stalled = q, norm, 0
        else:
            stalled += 1
        if best_norm < tol or stalled >= 5:
            break
        jac = tip_jacobian(shape_model, q, config)
        q = _clip_inside(
            q + damped_pinv(jac, damping) @ err, config.q_min, config.q_max
        )
    return best_q


def place_obstacle(
    shape_model: ShapeNodeModel,
    config: RobotConfig,
    kind: str,
    period: float = 100.0,
    phase: float = 0.125,
    offset: float = 0.04,
) -> Array:
    """Obstacle center on the swept body, an arc offset back from the tip.

    Solves inverse kinematics for one reference point, then walks the
    ground-truth backbone at that action back from the tip by ``offset``
    meters of arc length.  A plain tip-tracking controller sweeps its
    body through this point even though its tip path stays clear of it,
    so whole-body avoidance is what a policy has to learn.
    """
    target = reference_trajectory(kind, phase * period, config.total_length, period)
    q = ik_solve(shape_model, config, target)
    shape = forward_kinematics(config, ActionVector(q), mismatch=True)
    arc_from_tip = shape.s[-1] - shape.s
    idx = int(np.argmin(np.abs(arc_from_tip - offset)))
    return np.array(shape.points[idx], dtype=np.float64)


def closed_loop_track(
    policy: ControlNodeModel,
    shape_model: ShapeNodeModel,
    config: RobotConfig,
    kind: str,
    duration: float = 100.0,
    period: float = 100.0,
    payload_grams: float = 0.0,
    obstacle: ObstacleSpec | None = None,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    q_init: Array | None = None,
) -> TrackingLog:
    """Receding-horizon tracking against the simulated robot.

    Each tick observes the simulated backbone (payload applied), plans a
    full horizon with the models, applies only the first action, and
    logs the achieved tip against the reference at the new time.
    ``noise_std`` perturbs the observed feedback, which is what makes
    seeded runs distinct.
    """
    tick = period / TICKS_PER_PERIOD
    n = int(round(duration / tick))
    length = config.total_length
    q = (
        ik_solve(
            shape_model, config, reference_trajectory(kind, 0.0, length, period)
        )
        if q_init is None
        else np.asarray(q_init, dtype=np.float64).copy()
    )
    times = np.zeros(n)
    goals = np.zeros((n, 3))
    tips = np.zeros((n, 3))
    actions = np.zeros((n, config.action_dim))
    dists = np.zeros(n) if obstacle is not None else None
    for k in range(n):
        t_next = (k + 1) * tick
        observed = forward_kinematics(config, q, payload_grams=payload_grams)
        obs_ds = downsample_backbone(observed.points)
        goal = reference_trajectory(kind, t_next, length, period)
        tape = Tape()
        result = rollout_policy(
            policy,
            shape_model,
            config,
            tape,
            q[None],
            goal[None],
            noise_rng=rng if noise_std > 0.0 else None,
            noise_std=noise_std,
            noise_first_only=True,
            initial_observation=(obs_ds[None], observed.tip[None]),
        )
        # tanh can hit the exact bound in float64; keep the applied
        # action strictly inside so the next re-plan can invert it
        q = _clip_inside(result.actions[0].value[0], config.q_min, config.q_max)
        achieved = forward_kinematics(config, q, payload_grams=payload_grams)
        times[k] = t_next
        goals[k] = goal
        tips[k] = achieved.tip
        actions[k] = q
        if dists is not None:
            dists[k] = min_obstacle_distance(achieved.points, obstacle)
    return TrackingLog(
        times=times, goals=goals, tips=tips, actions=actions, min_obstacle_dist=dists
    )


def open_loop_jacobian_track(
    shape_model: ShapeNodeModel,
    config: RobotConfig,
    kind: str,
    duration: float = 100.0,
    period: float = 100.0,
    payload_grams: float = 0.0,
    obstacle: ObstacleSpec | None = None,
    q_init: Array | None = None,
    damping: float = 1e-6,
) -> TrackingLog:
    """Feedforward baseline integrating q' = J+ g' with no feedback."""
    tick = period / TICKS_PER_PERIOD
    n = int(round(duration / tick))
    length = config.total_length
    q = (
        ik_solve(
            shape_model, config, reference_trajectory(kind, 0.0, length, period)
        )
        if q_init is None
        else np.asarray(q_init, dtype=np.float64).copy()
    )
    times = np.zeros(n)
    goals = np.zeros((n, 3))
    tips = np.zeros((n, 3))
    actions = np.zeros((n, config.action_dim))
    dists = np.zeros(n) if obstacle is not None else None
    for k in range(n):
        t_now = k * tick
        t_next = (k + 1) * tick
        g_now = reference_trajectory(kind, t_now, length, period)
        g_next = reference_trajectory(kind, t_next, length, period)
        jac = tip_jacobian(shape_model, q, config)
        q = _clip_inside(
            q + damped_pinv(jac, damping) @ (g_next - g_now),
            config.q_min,
            config.q_max,
        )
        achieved = forward_kinematics(config, q, payload_grams=payload_grams)
        times[k] = t_next
        goals[k] = g_next
        tips[k] = achieved.tip
        actions[k] = q
        if dists is not None:
            dists[k] = min_obstacle_distance(achieved.points, obstacle)
    return TrackingLog(
        times=times, goals=goals, tips=tips, actions=actions, min_obstacle_dist=dists
    )


@dataclass
class TrackingMetrics:
    """Per-axis and aggregate tip error statistics in millimeters."""

    rmse_mm: Array
    std_mm: Array
    aggregate_rmse_mm: float
    n_ticks: int

    def as_rows(self) -> list[tuple[str, float, float]]:
        axes = ("x", "y", "z")
        return [
            (axes[i], float(self.rmse_mm[i]), float(self.std_mm[i]))
            for i in range(3)
        ]


def evaluate_tracking(logs) -> TrackingMetrics:
    """Error statistics over one log or several pooled together."""
    if isinstance(logs, TrackingLog):
        logs = [logs]
    if not logs or all(log.n_ticks == 0 for log in logs):
        raise ValueError("tracking log is empty")
    err = np.concatenate([log.errors for log in logs], axis=0)
    rmse = np.sqrt((err * err).mean(axis=0)) * 1000.0
    std = err.std(axis=0) * 1000.0
    aggregate = float(np.sqrt((err * err).sum(axis=1).mean()) * 1000.0)
    return TrackingMetrics(
        rmse_mm=rmse, std_mm=std, aggregate_rmse_mm=aggregate, n_ticks=err.shape[0]
    )


def count_violations(log: TrackingLog, obstacle: ObstacleSpec) -> int:
    """Number of ticks whose backbone broke the hard distance threshold."""
    if log.min_obstacle_dist is None:
        raise ValueError("log has no obstacle distance column")
    d = log.min_obstacle_dist
    return int(np.count_nonzero(d * d < obstacle.threshold_sq))


# ---------------------------------------------------------------------------
# persistence


def save_control_model(path, model: ControlNodeModel, config: RobotConfig) -> None:
    """Write the policy plus its robot binding as a single JSON document."""
    doc = {
        "format": CONTROL_MODEL_FORMAT,
        "n_segments": model.n_segments,
        "q_min": model.q_min,
        "q_max": model.q_max,
        "horizon": model.horizon,
        "dt": model.dt,
        "rate_scale": model.rate_scale,
        "robot_config": config.to_dict(),
        "robot_config_hash": robot_config_hash(config),
        "params": params_to_dict(model.params),
    }
    Path(path).write_text(json.dumps(doc), encoding="ascii")


def load_control_model(path) -> tuple[ControlNodeModel, RobotConfig]:
    """Load a saved policy; malformed files raise ``ValueError``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="ascii"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"not a valid model file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CONTROL_MODEL_FORMAT:
        raise ValueError("not a control model file")
    try:
        config = RobotConfig.from_dict(doc["robot_config"])
        if doc["robot_config_hash"] != robot_config_hash(config):
            raise ValueError("robot config hash mismatch")
        model = ControlNodeModel(
            params=params_from_dict(doc["params"]),
            n_segments=int(doc["n_segments"]),
            q_min=float(doc["q_min"]),
            q_max=float(doc["q_max"]),
            horizon=int(doc["horizon"]),
            dt=float(doc["dt"]),
            rate_scale=float(doc["rate_scale"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"incomplete model file: {exc!r}") from exc
    return model, config
