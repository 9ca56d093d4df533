"""MLP parameters, forward pass, Adam, and array serialization.

Parameters live outside any tape as plain float64 arrays, together with
their Adam moment buffers and step count.  A training iteration wraps the
weights once into tape leaves (:meth:`MlpParams.as_tensors`), runs any
number of forward passes that share those leaves, calls
:func:`shapectl.autodiff.backward`, and hands the collected gradients to
:func:`adam_step`, which updates the arrays in place.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array, Tape, Tensor, check_finite, cmul, dense, grad_of


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class MlpParams:
    """Fully connected network with LeakyReLU hidden layers.

    ``input_scale`` and ``output_scale`` are constant per-component
    multipliers applied before the first layer and after the output
    activation; they carry unit normalization so the weights see O(1)
    values, and they persist alongside the weights.  ``adam_m`` /
    ``adam_v`` / ``step_count`` hold the optimizer state so a saved
    model resumes training exactly where it left off.
    """

    weights: list[Array]
    biases: list[Array]
    hidden_slope: float = 0.01
    out_activation: str = "tanh"
    input_scale: Array | None = None
    output_scale: Array | None = None
    adam_m: list[Array] = field(default_factory=list)
    adam_v: list[Array] = field(default_factory=list)
    step_count: int = 0

    @property
    def sizes(self) -> list[int]:
        dims = [self.weights[0].shape[0]]
        dims += [w.shape[1] for w in self.weights]
        return dims

    def param_arrays(self) -> list[Array]:
        out: list[Array] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def ensure_moments(self) -> None:
        if not self.adam_m:
            self.adam_m = [np.zeros_like(a) for a in self.param_arrays()]
            self.adam_v = [np.zeros_like(a) for a in self.param_arrays()]

    def as_tensors(self, tape: Tape) -> "MlpTensors":
        layers = [
            (tape.tensor(w), tape.tensor(b))
            for w, b in zip(self.weights, self.biases)
        ]
        return MlpTensors(self, layers)

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            hidden_slope=self.hidden_slope,
            out_activation=self.out_activation,
            input_scale=None if self.input_scale is None else self.input_scale.copy(),
            output_scale=None if self.output_scale is None else self.output_scale.copy(),
            adam_m=[m.copy() for m in self.adam_m],
            adam_v=[v.copy() for v in self.adam_v],
            step_count=self.step_count,
        )


@dataclass
class MlpTensors:
    """Tape-resident view of :class:`MlpParams` for one iteration."""

    params: MlpParams
    layers: list[tuple[Tensor, Tensor]]

    def param_tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out


def init_mlp(
    rng: np.random.Generator,
    sizes: list[int],
    hidden_slope: float = 0.01,
    out_activation: str = "tanh",
    input_scale: Array | None = None,
    output_scale: Array | None = None,
) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if out_activation not in ("tanh", "identity"):
        raise ValueError(f"unknown output activation {out_activation!r}")
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(
        weights=weights,
        biases=biases,
        hidden_slope=hidden_slope,
        out_activation=out_activation,
        input_scale=None if input_scale is None else np.asarray(input_scale, dtype=np.float64),
        output_scale=None if output_scale is None else np.asarray(output_scale, dtype=np.float64),
    )


def mlp_forward(mt: MlpTensors, x: Tensor) -> Tensor:
    """Evaluate the network on a batch ``x`` of shape (batch, in_dim)."""
    p = mt.params
    if x.value.shape[-1] != p.weights[0].shape[0]:
        raise ValueError(
            f"input width {x.value.shape[-1]} does not match "
            f"first layer width {p.weights[0].shape[0]}"
        )
    check_finite(x.value, "mlp input")
    if p.out_activation not in ("tanh", "identity"):
        raise ValueError(f"unknown output activation {p.out_activation!r}")
    h = x
    if p.input_scale is not None:
        h = cmul(h, p.input_scale)
    last = len(mt.layers) - 1
    for i, (w, b) in enumerate(mt.layers):
        if i < last:
            h = dense(h, w, b, "leaky", p.hidden_slope)
        else:
            h = dense(h, w, b, p.out_activation)
    if p.output_scale is not None:
        h = cmul(h, p.output_scale)
    return h


def adam_step(params: MlpParams, grads: list[Array], config: AdamConfig) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    arrays = params.param_arrays()
    if len(grads) != len(arrays):
        raise ValueError("gradient count does not match parameter count")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise ValueError("gradient shape does not match parameter shape")
    params.ensure_moments()
    params.step_count += 1
    t = params.step_count
    b1, b2 = config.beta1, config.beta2
    lr_t = config.lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for a, g, m, v in zip(arrays, grads, params.adam_m, params.adam_v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        a -= lr_t * m / (np.sqrt(v) + config.eps)


def collect_mlp_grads(grads: dict[int, Array], mt: MlpTensors) -> list[Array]:
    """Gradients for every parameter tensor, zeros where unused."""
    return [grad_of(grads, t) for t in mt.param_tensors()]


def gaussian_sample(rng: np.random.Generator, shape, std: float, mean: float = 0.0) -> Array:
    """I.i.d. normal samples; identical seed gives an identical stream."""
    if std < 0:
        raise ValueError("stddev must be non-negative")
    if std == 0.0:
        return np.full(shape, mean)
    return rng.normal(mean, std, size=shape)


# ---------------------------------------------------------------------------
# serialization: arrays as base64 little-endian float64, bit exact


def array_to_b64(a: Array) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def b64_to_array(d: dict) -> Array:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return a.reshape(d["shape"])


def params_to_dict(p: MlpParams) -> dict:
    return {
        "sizes": p.sizes,
        "hidden_slope": p.hidden_slope,
        "out_activation": p.out_activation,
        "weights": [array_to_b64(w) for w in p.weights],
        "biases": [array_to_b64(b) for b in p.biases],
        "input_scale": None if p.input_scale is None else array_to_b64(p.input_scale),
        "output_scale": None if p.output_scale is None else array_to_b64(p.output_scale),
        "adam_m": [array_to_b64(m) for m in p.adam_m],
        "adam_v": [array_to_b64(v) for v in p.adam_v],
        "step_count": p.step_count,
    }


def params_from_dict(d: dict) -> MlpParams:
    return MlpParams(
        weights=[b64_to_array(w) for w in d["weights"]],
        biases=[b64_to_array(b) for b in d["biases"]],
        hidden_slope=float(d["hidden_slope"]),
        out_activation=d["out_activation"],
        input_scale=None if d.get("input_scale") is None else b64_to_array(d["input_scale"]),
        output_scale=None if d.get("output_scale") is None else b64_to_array(d["output_scale"]),
        adam_m=[b64_to_array(m) for m in d.get("adam_m", [])],
        adam_v=[b64_to_array(v) for v in d.get("adam_v", [])],
        step_count=int(d.get("step_count", 0)),
    )
