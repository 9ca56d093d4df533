"""Arc-length neural ODE that learns the backbone shape map.

The model integrates a 7-dimensional state [position (3), curvature (3),
augmentation (1)] along arc length with an MLP as the derivative field.
Each robot segment is one solve: the initial state takes the previous
segment's predicted end position, the segment's commanded (mismatch-free)
curvature, and a zero augmentation coordinate.  Training regresses the
integrated positions onto simulated backbones; the mismatch between the
commanded curvature map and the simulated robot is exactly what the
network has to absorb.

The derivative MLP uses LeakyReLU hidden layers and a Tanh output with
per-component scales: position derivatives scaled by 2 (unit tangent),
curvature derivatives by 2*u_max per meter, augmentation by 1.  The final
layer starts at zero with a position bias of atanh(e3/scale), so an
untrained model already predicts the straight zero-curvature backbone and
training only has to learn corrections.
"""

from __future__ import annotations

import hashlib
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
from .odeint import (
    IntegrationGrid,
    SolverKind,
    integrate,
    integrate_batch_masked,
)
from .robot import ActionVector, BackboneShape, RobotConfig, backbone_arc_coords

STATE_DIM = 7  # position (3) + curvature (3) + augmentation (1)

# keeps the Euclidean distance differentiable when prediction hits truth
LOSS_EPS_SQ = 1e-24

SHAPE_MODEL_FORMAT = "shape-node-v1"


@dataclass
class ShapeNodeModel:
    """Trained or initialized shape predictor.

    ``params`` is the derivative MLP (width 7 in and out); ``solver`` and
    ``steps_per_segment`` fix the arc-length discretization every
    prediction uses.
    """

    params: MlpParams
    solver: SolverKind = "fixed-adams"
    steps_per_segment: int = 10

    def __post_init__(self):
        sizes = self.params.sizes
        if sizes[0] != STATE_DIM or sizes[-1] != STATE_DIM:
            raise ValueError(f"shape model must map {STATE_DIM} -> {STATE_DIM}")
        if self.steps_per_segment < 1:
            raise ValueError("steps_per_segment must be positive")

    @property
    def output_scale(self) -> Array:
        return self.params.output_scale

    def copy(self) -> "ShapeNodeModel":
        return ShapeNodeModel(
            params=self.params.copy(),
            solver=self.solver,
            steps_per_segment=self.steps_per_segment,
        )


@dataclass
class ShapeTrainConfig:
    """Optimization settings for :func:`train_shape_node`."""

    batch_size: int = 256
    iterations: int = 10_000
    learning_rate: float = 1e-3
    val_fraction: float = 0.1
    val_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.val_interval < 1:
            raise ValueError("val_interval must be at least 1")


def init_shape_model(
    rng: np.random.Generator,
    config: RobotConfig,
    hidden: tuple[int, ...] = (256, 256),
    solver: SolverKind = "fixed-adams",
    steps_per_segment: int = 10,
) -> ShapeNodeModel:
    """Fresh model whose dynamics start at the straight-backbone prior."""
    um = config.u_max
    input_scale = np.array([10.0, 10.0, 10.0, 1.0 / um, 1.0 / um, 1.0 / um, 10.0])
    output_scale = np.array([2.0, 2.0, 2.0, 2.0 * um, 2.0 * um, 2.0 * um, 1.0])
    params = init_mlp(
        rng,
        [STATE_DIM, *hidden, STATE_DIM],
        input_scale=input_scale,
        output_scale=output_scale,
    )
    # zero final layer, position bias toward p' = e3: the untrained field
    # is exactly the zero-curvature straight-line prior
    params.weights[-1][:] = 0.0
    params.biases[-1][:] = 0.0
    params.biases[-1][2] = np.arctanh(1.0 / output_scale[2])
    return ShapeNodeModel(
        params=params, solver=solver, steps_per_segment=steps_per_segment
    )


def commanded_curvatures(config: RobotConfig, q_batch: Array) -> Array:
    """Nominal mismatch-free curvature per segment for a batch of actions.

    Vectorized twin of the ground-truth commanded map: embed (q_x, q_y)
    as [q_x, q_y, 0] and saturate the norm at u_max.  Shape (batch,
    n_segments, 3).  Raises ``ValueError`` for out-of-bounds actions.
    """
    q = np.asarray(q_batch, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != config.action_dim:
        raise ValueError(f"actions must have shape (batch, {config.action_dim})")
    if np.any(q < config.q_min) or np.any(q > config.q_max):
        raise ValueError("action outside configured bounds")
    u = np.zeros((q.shape[0], config.n_segments, 3))
    u[:, :, :2] = q.reshape(q.shape[0], config.n_segments, 2)
    norms = np.sqrt((u * u).sum(axis=2, keepdims=True))
    over = norms > config.u_max
    denom = np.where(over, norms, 1.0)
    return np.where(over, u * (config.u_max / denom), u)


def _curvature_node(
    tape: Tape, q: Tensor, u_value: Array, seg: int, config: RobotConfig
) -> Tensor:
    """Tape node for one segment's commanded curvature of a taped action.

    Forward value is the precomputed ``u_value`` slice from
    :func:`commanded_curvatures`; backward chains through the norm
    saturation in closed form (identity inside the ball, the scaled
    projection on it), routing into the segment's two action columns.
    """
    qv = q.value[:, 2 * seg : 2 * seg + 2]
    norms = np.sqrt((qv * qv).sum(axis=1, keepdims=True))
    um = config.u_max
    action_dim = config.action_dim

    def bk(grad):
        g2 = grad[:, :2]
        over = norms > um
        safe = np.where(over, norms, 1.0)
        qhat = qv / safe
        proj = qhat * (qhat * g2).sum(axis=1, keepdims=True)
        d2 = np.where(over, (um / safe) * (g2 - proj), g2)
        out = np.zeros((grad.shape[0], action_dim))
        out[:, 2 * seg : 2 * seg + 2] = d2
        return (out,)

    return tape._record(u_value, (q.nid,), bk)


def _segment_grid(steps_per_segment: int, ends: Array) -> IntegrationGrid:
    """Shared grid for one segment slot with per-sample end lengths.

    Picks the smallest refinement of ``steps_per_segment`` on which every
    sample's length lands exactly on a grid node; if none exists up to
    64x, the ends snap to the nearest node of the 4x grid.
    """
    ends = np.asarray(ends, dtype=np.float64)
    if np.any(ends <= 0.0):
        raise ValueError("segment lengths must be positive")
    t_end = float(ends.max())
    for k in range(1, 65):
        n = steps_per_segment * k
        counts = n * ends / t_end
        if np.max(np.abs(counts - np.rint(counts))) < 1e-9:
            return IntegrationGrid(0.0, t_end, n, per_sample_end=ends)
    return IntegrationGrid(
        0.0, t_end, steps_per_segment * 4, per_sample_end=ends
    )


@dataclass
class ShapeRollout:
    """Tape-resident prediction for one batch of actions.

    ``points`` holds one (batch, 3) tensor per integration output node,
    base excluded, ordered base to tip; ``points_per_segment[i]`` says how
    many of them segment ``i`` contributed (== steps_per_segment unless
    per-sample lengths forced a refined masked grid).  ``u0_leaves`` are
    the commanded-curvature tensors, one per segment: leaves when the
    actions came in as an array, derived nodes when they came in as a
    tensor.
    """

    points: list[Tensor]
    points_per_segment: list[int]
    u0_leaves: list[Tensor]
    mt: MlpTensors

    @property
    def tip(self) -> Tensor:
        return self.points[-1]


def rollout_shape(
    model: ShapeNodeModel,
    config: RobotConfig,
    tape: Tape,
    q_batch: Array | Tensor,
    lengths: Array | None = None,
) -> ShapeRollout:
    """Differentiable backbone rollout for a batch of actions.

    Per segment, the initial state is [previous predicted end position,
    commanded curvature, carried augmentation] and the MLP field is
    integrated over [0, l].  The augmentation coordinate starts at 0 at
    the base and flows through segment boundaries unreset, giving the
    field a persistent channel for whatever it learns to accumulate
    along the arc (the position alone does not determine the incoming
    direction once two or more segments lie behind it).  ``lengths``
    (batch, n_segments) allows per-sample segment lengths; slots where
    they differ run on a shared grid with per-sample end masking,
    freezing each sample at its own length.

    ``q_batch`` may be a tape tensor, in which case gradients flow from
    the predicted points back into the actions through the saturating
    curvature map.
    """
    q_tensor = q_batch if isinstance(q_batch, Tensor) else None
    q = (
        q_tensor.value
        if q_tensor is not None
        else np.asarray(q_batch, dtype=np.float64)
    )
    u0 = commanded_curvatures(config, q)
    batch = q.shape[0]
    if lengths is None:
        lengths_arr = np.broadcast_to(
            np.asarray(config.segment_lengths), (batch, config.n_segments)
        )
    else:
        lengths_arr = np.asarray(lengths, dtype=np.float64)
        if lengths_arr.shape != (batch, config.n_segments):
            raise ValueError("lengths must have shape (batch, n_segments)")
    mt = model.params.as_tensors(tape)

    def field(t, x, u):
        return mlp_forward(mt, x)

    p = tape.tensor(np.zeros((batch, 3)))
    aug = tape.tensor(np.zeros((batch, 1)))
    points: list[Tensor] = []
    counts_out: list[int] = []
    leaves: list[Tensor] = []
    for seg in range(config.n_segments):
        if q_tensor is not None:
            u_leaf = _curvature_node(tape, q_tensor, u0[:, seg], seg, config)
        else:
            u_leaf = tape.tensor(u0[:, seg])
        leaves.append(u_leaf)
        x0 = ad.concat([p, u_leaf, aug], axis=1)
        ends = lengths_arr[:, seg]
        if np.all(ends == ends[0]):
            grid = IntegrationGrid(0.0, float(ends[0]), model.steps_per_segment)
            states = integrate(field, x0, grid, model.solver)
        else:
            grid = _segment_grid(model.steps_per_segment, ends)
            states = integrate_batch_masked(field, x0, grid, model.solver)
        for st in states[1:]:
            points.append(ad.slice_cols(st, 0, 3))
        counts_out.append(len(states) - 1)
        p = points[-1]
        aug = ad.slice_cols(states[-1], 6, 7)
    return ShapeRollout(
        points=points, points_per_segment=counts_out, u0_leaves=leaves, mt=mt
    )


def predict_shape(
    model: ShapeNodeModel, q: ActionVector | Array, config: RobotConfig
) -> BackboneShape:
    """Predicted backbone for one action, on the ground-truth grid."""
    q_arr = q.q if isinstance(q, ActionVector) else np.asarray(q, dtype=np.float64)
    tape = Tape()
    ro = rollout_shape(model, config, tape, q_arr.reshape(1, -1))
    pts = np.vstack([np.zeros((1, 3))] + [t.value for t in ro.points])
    return BackboneShape(
        s=backbone_arc_coords(config, model.steps_per_segment), points=pts
    )


def predict_shape_batch(
    model: ShapeNodeModel, q_batch: Array, config: RobotConfig
) -> Array:
    """Predicted backbone points for a batch, shape (batch, P, 3).

    P counts every grid node except the base (steps_per_segment per
    segment), matching the layout :func:`shape_loss` and the evaluators
    use.
    """
    tape = Tape()
    ro = rollout_shape(model, config, tape, q_batch)
    return np.stack([t.value for t in ro.points], axis=1)


def _points_array(shapes) -> Array:
    """Stack predictions/truths into (batch, P, 3), base row excluded."""
    if isinstance(shapes, np.ndarray):
        arr = shapes
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ValueError("points must have shape (batch, P, 3)")
        return arr
    if isinstance(shapes, BackboneShape):
        shapes = [shapes]
    return np.stack([s.points[1:] for s in shapes], axis=0)


def shape_loss(predicted, truth) -> float:
    """Mean Euclidean position error over batch and grid points."""
    p = _points_array(predicted)
    t = _points_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape grids do not match: {p.shape} vs {t.shape}")
    return float(np.mean(np.linalg.norm(p - t, axis=-1)))


def shape_loss_tensor(rollout: ShapeRollout, truth_points: Array) -> Tensor:
    """Taped twin of :func:`shape_loss` for training.

    ``truth_points`` has shape (batch, P, 3) aligned with
    ``rollout.points``.  The per-point distance uses a tiny epsilon under
    the square root so the gradient stays finite at zero error.
    """
    n_points = len(rollout.points)
    truth = np.asarray(truth_points, dtype=np.float64)
    batch = rollout.points[0].value.shape[0]
    if truth.shape != (batch, n_points, 3):
        raise ValueError(
            f"truth has shape {truth.shape}, expected {(batch, n_points, 3)}"
        )
    total = None
    for k, pt in enumerate(rollout.points):
        d = ad.add_const(pt, -truth[:, k])
        ssum = ad.reduce_sum(ad.square(d), axis=1)
        dist = ad.sqrt(ad.add_const(ssum, LOSS_EPS_SQ))
        part = ad.reduce_sum(dist)
        total = part if total is None else ad.add(total, part)
    return ad.scale(total, 1.0 / (n_points * batch))


def _dataset_arrays(dataset, config: RobotConfig, steps_per_segment: int):
    q = np.array([s.action.q for s in dataset])
    truth = np.array([s.shape.points[1:] for s in dataset])
    expect = config.n_segments * steps_per_segment
    if truth.shape[1] != expect:
        raise ValueError(
            f"dataset grid has {truth.shape[1]} points per shape, expected {expect}"
        )
    return q, truth


def _validation_loss(
    model: ShapeNodeModel,
    config: RobotConfig,
    q: Array,
    truth: Array,
    batch_size: int,
) -> float:
    total = 0.0
    for start in range(0, q.shape[0], batch_size):
        idx = slice(start, start + batch_size)
        tape = Tape()
        ro = rollout_shape(model, config, tape, q[idx])
        loss = shape_loss_tensor(ro, truth[idx])
        total += float(loss.value) * (q[idx].shape[0])
    return total / q.shape[0]


def train_shape_node(
    dataset,
    config: ShapeTrainConfig,
    robot: RobotConfig,
    model: ShapeNodeModel | None = None,
) -> tuple[ShapeNodeModel, list[tuple[int, float, float]]]:
    """Fit the shape model to simulated samples.

    Splits the dataset 90/10 (by ``val_fraction``) with the configured
    seed, runs Adam over shuffled minibatches, evaluates validation loss
    every ``val_interval`` iterations, and returns the best-validation
    checkpoint plus history rows (iteration, train_loss, val_loss); the
    val column repeats the latest measurement between evaluations.
    Divergence raises ``FloatingPointError`` naming the iteration.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if model is None:
        model = init_shape_model(np.random.default_rng(config.seed + 1), robot)
    q_all, truth_all = _dataset_arrays(dataset, robot, model.steps_per_segment)
    n = q_all.shape[0]
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    if n_val >= n:
        raise ValueError("dataset too small for the validation split")
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    adam = AdamConfig(lr=config.learning_rate)
    batch = min(config.batch_size, train_idx.size)

    def batches():
        while True:
            order = rng.permutation(train_idx)
            for start in range(0, order.size - batch + 1, batch):
                yield order[start : start + batch]

    stream = batches()
    history: list[tuple[int, float, float]] = []
    best_val = np.inf
    best_params = None
    last_val = np.nan
    for it in range(1, config.iterations + 1):
        idx = next(stream)
        try:
            tape = Tape()
            ro = rollout_shape(model, robot, tape, q_all[idx])
            loss = shape_loss_tensor(ro, truth_all[idx])
            train_loss = float(loss.value)
            if not np.isfinite(train_loss):
                raise FloatingPointError("loss is not finite")
            grads = ad.backward(loss)
            adam_step(model.params, collect_mlp_grads(grads, ro.mt), adam)
            if it == 1 or it % config.val_interval == 0 or it == config.iterations:
                last_val = _validation_loss(
                    model, robot, q_all[val_idx], truth_all[val_idx], batch
                )
                if last_val < best_val:
                    best_val = last_val
                    best_params = model.params.copy()
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"shape training diverged at iteration {it}: {exc}"
            ) from exc
        history.append((it, train_loss, last_val))
    if best_params is not None:
        model.params = best_params
    return model, history


def tip_jacobian(
    model: ShapeNodeModel, q: ActionVector | Array, config: RobotConfig
) -> Array:
    """Sensitivity of the predicted tip to the action, shape (3, 2n).

    Backpropagates each tip coordinate to the commanded-curvature leaves,
    then chains through the saturating action-to-curvature map in closed
    form (identity inside the norm ball, the norm-projection Jacobian on
    it).
    """
    q_arr = q.q if isinstance(q, ActionVector) else np.asarray(q, dtype=np.float64)
    q_arr = q_arr.reshape(1, -1)
    tape = Tape()
    ro = rollout_shape(model, config, tape, q_arr)
    d_u0 = np.zeros((3, config.n_segments, 3))
    for j in range(3):
        comp = ad.reduce_sum(ad.slice_cols(ro.tip, j, j + 1))
        grads = ad.backward(comp)
        for i, leaf in enumerate(ro.u0_leaves):
            d_u0[j, i] = ad.grad_of(grads, leaf)[0]
    jac = np.zeros((3, config.action_dim))
    per_seg = q_arr.reshape(config.n_segments, 2)
    for i in range(config.n_segments):
        jac[:, 2 * i : 2 * i + 2] = d_u0[:, i, :] @ _clamp_jacobian(
            per_seg[i], config.u_max
        )
    return jac


def _clamp_jacobian(q2: Array, u_max: float) -> Array:
    """d(commanded curvature)/d(q_x, q_y) for one segment, shape (3, 2)."""
    v = np.array([q2[0], q2[1], 0.0])
    n = np.linalg.norm(v)
    if n <= u_max:
        return np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    vhat = v / n
    return (u_max / n) * (np.eye(3) - np.outer(vhat, vhat))[:, :2]


@dataclass
class ShapeEvalResult:
    """Per-axis backbone error statistics over a test set, in mm."""

    rmse_mm: Array
    std_mm: Array
    n_samples: int

    def as_rows(self) -> list[tuple[str, float, float]]:
        axes = ("x", "y", "z")
        return [
            (axes[i], float(self.rmse_mm[i]), float(self.std_mm[i]))
            for i in range(3)
        ]


def evaluate_shape_rmse(
    model: ShapeNodeModel, samples, config: RobotConfig
) -> ShapeEvalResult:
    """Per-axis RMSE and error STD (mm) over all grid points of a test set."""
    q, truth = _dataset_arrays(samples, config, model.steps_per_segment)
    pred = predict_shape_batch(model, q, config)
    err = (pred - truth).reshape(-1, 3)
    rmse = np.sqrt((err * err).mean(axis=0)) * 1000.0
    std = err.std(axis=0) * 1000.0
    return ShapeEvalResult(rmse_mm=rmse, std_mm=std, n_samples=q.shape[0])


# ---------------------------------------------------------------------------
# persistence


def robot_config_hash(config: RobotConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("ascii")
    return hashlib.sha256(blob).hexdigest()


def save_shape_model(path, model: ShapeNodeModel, config: RobotConfig) -> None:
    """Write the model plus its robot binding as a single JSON document."""
    doc = {
        "format": SHAPE_MODEL_FORMAT,
        "solver": model.solver,
        "steps_per_segment": model.steps_per_segment,
        "robot_config": config.to_dict(),
        "robot_config_hash": robot_config_hash(config),
        "params": params_to_dict(model.params),
    }
    Path(path).write_text(json.dumps(doc), encoding="ascii")


def load_shape_model(path) -> tuple[ShapeNodeModel, RobotConfig]:
    """Load a saved model; malformed files raise ``ValueError``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="ascii"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"not a valid model file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != SHAPE_MODEL_FORMAT:
        raise ValueError("not a shape model file")
    try:
        config = RobotConfig.from_dict(doc["robot_config"])
        if doc["robot_config_hash"] != robot_config_hash(config):
            raise ValueError("robot config hash mismatch")
        model = ShapeNodeModel(
            params=params_from_dict(doc["params"]),
            solver=doc["solver"],
            steps_per_segment=int(doc["steps_per_segment"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"incomplete model file: {exc!r}") from exc
    return model, config
