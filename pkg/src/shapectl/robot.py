"""Ground-truth continuum robot model and task geometry.

The robot is a chain of constant-curvature-commanded segments.  Actions are
two commands per segment (q_x, q_y), mapped to a body-frame curvature
vector u = [u_x, u_y, 0] whose norm never exceeds ``u_max``.  The backbone
follows the moving-frame system

    R'(s) = R(s) [u]x          p'(s) = R(s) e3

integrated along arc length with the curvature held constant within each
segment and each segment's end pose seeding the next.  The integrator here
is plain numpy RK4 with frame re-orthonormalization; it is the simulator
the learned models are trained against and evaluated on, and it shares no
code with the taped solvers in :mod:`shapectl.odeint`.

The action-to-curvature map has a deliberate mismatch term so that the
commanded map (``mismatch=False``) and the simulated robot
(``mismatch=True``) disagree; learning that residual is the point of the
shape model.  A payload droops the backbone quadratically in arc length,
and obstacles are spheres tested against every backbone point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array

E3 = np.array([0.0, 0.0, 1.0])

TRAJECTORY_KINDS: tuple[str, ...] = ("circle", "square", "s_shape", "ellipse", "helix")

# payload droop per gram at the tip, in meters
PAYLOAD_COEFF = 0.001

PAYLOAD_MAX_GRAMS = 20.0


@dataclass(frozen=True)
class RobotConfig:
    """Geometry, actuation limits, and action bounds for one robot."""

    n_segments: int = 3
    segment_lengths: tuple[float, ...] | None = None
    u_max: float = 15.0
    mismatch_amplitude: float = 0.1
    q_min: float | None = None
    q_max: float | None = None

    def __post_init__(self):
        if not 1 <= self.n_segments <= 4:
            raise ValueError("n_segments must be between 1 and 4")
        if self.segment_lengths is None:
            object.__setattr__(self, "segment_lengths", (0.1,) * self.n_segments)
        else:
            lengths = tuple(float(x) for x in self.segment_lengths)
            if len(lengths) != self.n_segments:
                raise ValueError("segment_lengths must have n_segments entries")
            if any(x <= 0 for x in lengths):
                raise ValueError("segment lengths must be positive")
            object.__setattr__(self, "segment_lengths", lengths)
        if self.u_max <= 0:
            raise ValueError("u_max must be positive")
        if self.mismatch_amplitude < 0:
            raise ValueError("mismatch_amplitude must be non-negative")
        if self.q_min is None:
            object.__setattr__(self, "q_min", -self.u_max)
        if self.q_max is None:
            object.__setattr__(self, "q_max", self.u_max)
        if not self.q_min < self.q_max:
            raise ValueError("q_min must be below q_max")

    @property
    def total_length(self) -> float:
        return float(sum(self.segment_lengths))

    @property
    def action_dim(self) -> int:
        return 2 * self.n_segments

    def to_dict(self) -> dict:
        return {
            "n_segments": self.n_segments,
            "segment_lengths": list(self.segment_lengths),
            "u_max": self.u_max,
            "mismatch_amplitude": self.mismatch_amplitude,
            "q_min": self.q_min,
            "q_max": self.q_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobotConfig":
        return cls(
            n_segments=int(d["n_segments"]),
            segment_lengths=tuple(d["segment_lengths"]),
            u_max=float(d["u_max"]),
            mismatch_amplitude=float(d["mismatch_amplitude"]),
            q_min=float(d["q_min"]),
            q_max=float(d["q_max"]),
        )


@dataclass(frozen=True)
class FramePose:
    """Rotation plus translation of a backbone cross-section."""

    R: Array
    p: Array

    @classmethod
    def identity(cls) -> "FramePose":
        return cls(R=np.eye(3), p=np.zeros(3))


@dataclass(frozen=True)
class ActionVector:
    """Flat action vector, two commands (q_x, q_y) per segment."""

    q: Array

    def __post_init__(self):
        v = np.asarray(self.q, dtype=np.float64)
        if v.ndim != 1 or v.size % 2 != 0 or v.size == 0:
            raise ValueError("action must be a flat vector with 2 entries per segment")
        object.__setattr__(self, "q", v)

    @property
    def n_segments(self) -> int:
        return self.q.size // 2

    @property
    def per_segment(self) -> Array:
        return self.q.reshape(-1, 2)


@dataclass(frozen=True)
class CurvatureVector:
    """Per-segment body-frame curvature triples [u_x, u_y, 0]."""

    values: Array

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("curvatures must have shape (n_segments, 3)")
        if np.any(v[:, 2] != 0.0):
            raise ValueError("torsion component must be exactly zero")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ObstacleSpec:
    """Spherical keep-out region: violation when any backbone point has
    squared distance to ``center`` below ``threshold_sq``."""

    center: Array
    threshold_sq: float = 1e-4

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        if c.shape != (3,):
            raise ValueError("obstacle center must be a 3-vector")
        object.__setattr__(self, "center", c)
        if self.threshold_sq <= 0:
            raise ValueError("threshold_sq must be positive")


@dataclass
class BackboneShape:
    """Sampled backbone curve: arc coordinates and xyz points."""

    s: Array
    points: Array

    @property
    def tip(self) -> Array:
        return self.points[-1]


@dataclass
class ShapeSample:
    """One supervised example: the action, the curvatures it realized,
    the segment lengths, and the simulated backbone."""

    action: ActionVector
    curvature: CurvatureVector
    lengths: tuple[float, ...]
    shape: BackboneShape


def clamp_norm(v: Array, limit: float) -> Array:
    """Scale ``v`` down to Euclidean norm ``limit`` when it exceeds it."""
    n = float(np.linalg.norm(v))
    if n > limit:
        return v * (limit / n)
    return np.asarray(v, dtype=np.float64)


def _coerce_action(config: RobotConfig, action: ActionVector | Array) -> Array:
    if isinstance(action, ActionVector):
        q = action.q
    else:
        q = np.asarray(action, dtype=np.float64).reshape(-1)
    if q.size != config.action_dim:
        raise ValueError(
            f"action has {q.size} entries, expected {config.action_dim}"
        )
    return q


def action_to_curvature(
    config: RobotConfig, action: ActionVector | Array, mismatch: bool
) -> CurvatureVector:
    """Map actions to per-segment curvatures.

    The commanded map embeds (q_x, q_y) as [q_x, q_y, 0] and saturates
    the norm at ``u_max``.  With ``mismatch`` the simulated robot adds a
    smooth cross-coupling between the two bending components (zero at
    q = 0) and re-saturates, so commanded and realized curvature differ
    most at large mixed bends.

    Raises ``ValueError`` for actions outside the configured bounds.
    """
    q = _coerce_action(config, action)
    if np.any(q < config.q_min) or np.any(q > config.q_max):
        raise ValueError("action outside configured bounds")
    um = config.u_max
    amp = config.mismatch_amplitude
    out = np.zeros((config.n_segments, 3))
    for i in range(config.n_segments):
        qx, qy = q[2 * i], q[2 * i + 1]
        u = clamp_norm(np.array([qx, qy, 0.0]), um)
        if mismatch and amp > 0.0:
            u = u + amp * um * np.array(
                [
                    np.sin(qx / um) * (qy / um),
                    np.sin(qy / um) * (qx / um),
                    0.0,
                ]
            )
            u = clamp_norm(u, um)
        out[i] = u
    return CurvatureVector(out)


def _hat(u: Array) -> Array:
    return np.array(
        [
            [0.0, -u[2], u[1]],
            [u[2], 0.0, -u[0]],
            [-u[1], u[0], 0.0],
        ]
    )


def _orthonormalize(R: Array) -> Array:
    # Gram-Schmidt on columns; adequate for the tiny drift one RK4
    # substep introduces
    c0 = R[:, 0] / np.linalg.norm(R[:, 0])
    c1 = R[:, 1] - c0 * (c0 @ R[:, 1])
    c1 = c1 / np.linalg.norm(c1)
    c2 = np.cross(c0, c1)
    return np.column_stack([c0, c1, c2])


def _rod_rk4_interval(
    R: Array, p: Array, u: Array, h: float, substeps: int
) -> tuple[Array, Array]:
    """Advance the frame ODE by ``h`` using ``substeps`` RK4 steps."""
    uh = _hat(u)
    dt = h / substeps

    def deriv(Rc):
        return Rc @ uh, Rc[:, 2]

    for _ in range(substeps):
        k1R, k1p = deriv(R)
        k2R, k2p = deriv(R + 0.5 * dt * k1R)
        k3R, k3p = deriv(R + 0.5 * dt * k2R)
        k4R, k4p = deriv(R + dt * k3R)
        p = p + (dt / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        R = R + (dt / 6.0) * (k1R + 2.0 * k2R + 2.0 * k3R + k4R)
        R = _orthonormalize(R)
    return R, p


def backbone_arc_coords(config: RobotConfig, points_per_segment: int = 10) -> Array:
    """Arc coordinates of the standard output grid, base included."""
    s = [0.0]
    start = 0.0
    for length in config.segment_lengths:
        for k in range(1, points_per_segment + 1):
            s.append(start + length * k / points_per_segment)
        start += length
    return np.array(s)


def forward_kinematics(
    config: RobotConfig,
    action: ActionVector | Array,
    mismatch: bool = True,
    payload_grams: float = 0.0,
    points_per_segment: int = 10,
    substeps: int = 4,
    base: FramePose | None = None,
) -> BackboneShape:
    """Simulate the backbone for one action.

    Returns the backbone sampled at ``points_per_segment`` intervals per
    segment plus the base point.  The frame ODE runs at ``substeps`` RK4
    steps per interval (4x the output resolution by default) so the
    simulator's own error stays well below learner tolerances.
    ``payload_grams`` droops the resulting curve; it does not enter the
    frame integration.
    """
    curv = action_to_curvature(config, action, mismatch=mismatch)
    pose = base if base is not None else FramePose.identity()
    R, p = pose.R.copy(), pose.p.copy()
    points = [p.copy()]
    for seg in range(config.n_segments):
        length = config.segment_lengths[seg]
        h = length / points_per_segment
        u = curv.values[seg]
        for _ in range(points_per_segment):
            R, p = _rod_rk4_interval(R, p, u, h, substeps)
            points.append(p.copy())
    shape = BackboneShape(
        s=backbone_arc_coords(config, points_per_segment), points=np.array(points)
    )
    if payload_grams != 0.0:
        shape = apply_payload(shape, payload_grams, config.total_length)
    return shape


def tip_position(config: RobotConfig, action: ActionVector | Array, **kwargs) -> Array:
    """Convenience wrapper: simulated tip point for one action."""
    return forward_kinematics(config, action, **kwargs).tip


def backbone_frames(
    config: RobotConfig,
    action: ActionVector | Array,
    mismatch: bool = True,
    points_per_segment: int = 10,
    substeps: int = 4,
) -> list[FramePose]:
    """Full cross-section frames at every grid point of the backbone."""
    curv = action_to_curvature(config, action, mismatch=mismatch)
    R, p = np.eye(3), np.zeros(3)
    frames = [FramePose(R=R.copy(), p=p.copy())]
    for seg in range(config.n_segments):
        length = config.segment_lengths[seg]
        h = length / points_per_segment
        u = curv.values[seg]
        for _ in range(points_per_segment):
            R, p = _rod_rk4_interval(R, p, u, h, substeps)
            frames.append(FramePose(R=R.copy(), p=p.copy()))
    return frames


def apply_payload(
    shape: BackboneShape,
    grams: float,
    total_length: float,
    coeff: float = PAYLOAD_COEFF,
) -> BackboneShape:
    """Droop the backbone under a tip payload.

    Each point drops by ``coeff * grams * (s / L)^2``: zero at the base,
    ``coeff * grams`` meters at the tip, linear in the payload mass.
    """
    if grams < 0:
        raise ValueError("payload must be non-negative")
    if grams == 0.0:
        return BackboneShape(s=shape.s.copy(), points=shape.points.copy())
    droop = coeff * grams * (shape.s / total_length) ** 2
    points = shape.points.copy()
    points[:, 2] -= droop
    return BackboneShape(s=shape.s.copy(), points=points)


def sample_actions(config: RobotConfig, n_samples: int, rng: np.random.Generator) -> Array:
    """Uniform actions over the per-channel box [q_min, q_max]."""
    return rng.uniform(config.q_min, config.q_max, size=(n_samples, config.action_dim))


def sample_dataset(
    config: RobotConfig,
    n_samples: int,
    rng: np.random.Generator,
    points_per_segment: int = 10,
) -> list[ShapeSample]:
    """Draw random actions and simulate their backbones (with mismatch)."""
    actions = sample_actions(config, n_samples, rng)
    out = []
    for i in range(n_samples):
        act = ActionVector(actions[i])
        curv = action_to_curvature(config, act, mismatch=True)
        shape = forward_kinematics(
            config, act, mismatch=True, points_per_segment=points_per_segment
        )
        out.append(
            ShapeSample(
                action=act,
                curvature=curv,
                lengths=config.segment_lengths,
                shape=shape,
            )
        )
    return out


def reference_trajectory(
    kind: str,
    times: Array,
    total_length: float,
    period: float = 100.0,
) -> Array:
    """Goal positions g(t) for the named reference path.

    All references lie in the plane z = L - 0.02 below the straight-up
    tip (the helix sweeps a +-0.01 band around it) and fit inside a 5 cm
    radius, which keeps them in the reachable set.  Times outside
    [0, period] are a contract error.
    """
    t_in = np.asarray(times, dtype=np.float64)
    if np.any(t_in < -1e-9) or np.any(t_in > period + 1e-9):
        raise ValueError("trajectory time outside [0, period]")
    t = t_in.reshape(-1)
    cz = total_length - 0.02
    phase = 2.0 * np.pi * t / period
    out = np.zeros(t.shape + (3,))
    out[..., 2] = cz
    if kind == "circle":
        out[..., 0] = 0.05 * np.cos(phase)
        out[..., 1] = 0.05 * np.sin(phase)
    elif kind == "ellipse":
        out[..., 0] = 0.05 * np.cos(phase)
        out[..., 1] = 0.03 * np.sin(phase)
    elif kind == "s_shape":
        out[..., 0] = 0.03 * np.cos(phase)
        out[..., 1] = 0.05 * np.sin(2.0 * phase)
    elif kind == "helix":
        out[..., 0] = 0.05 * np.cos(phase)
        out[..., 1] = 0.05 * np.sin(phase)
        out[..., 2] = cz - 0.01 + 0.02 * (t / period)
    elif kind == "square":
        half = 0.03
        side = 2.0 * half
        u = np.mod(t / period, 1.0) * 4.0
        edge = np.floor(u).astype(int)
        frac = u - edge
        x = np.empty_like(t, dtype=np.float64)
        y = np.empty_like(t, dtype=np.float64)
        m = edge == 0
        x[m], y[m] = half - side * frac[m], np.full_like(frac[m], half)
        m = edge == 1
        x[m], y[m] = np.full_like(frac[m], -half), half - side * frac[m]
        m = edge == 2
        x[m], y[m] = -half + side * frac[m], np.full_like(frac[m], -half)
        m = edge == 3
        x[m], y[m] = np.full_like(frac[m], half), -half + side * frac[m]
        out[..., 0] = x
        out[..., 1] = y
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return out.reshape(t_in.shape + (3,))


def min_obstacle_distance(points: Array, obstacle: ObstacleSpec) -> float:
    """Smallest Euclidean distance from any backbone point to the center."""
    d = np.linalg.norm(points - obstacle.center, axis=-1)
    return float(d.min())


def obstacle_violation(points: Array, obstacle: ObstacleSpec) -> bool:
    """True when any backbone point enters the keep-out sphere."""
    d2 = ((points - obstacle.center) ** 2).sum(axis=-1)
    return bool((d2 < obstacle.threshold_sq).any())
