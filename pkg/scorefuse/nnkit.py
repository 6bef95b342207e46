"""Minimal dense-network machinery in float64 numpy.

Covers exactly what the quality estimator and the fusion experts need:
affine layers with relu/sigmoid/identity activations, batch normalization,
hand-written reverse mode, Adam with decoupled weight decay and a
cosine-annealing schedule with linear warm-up.
"""

import math
from dataclasses import dataclass, field
from itertools import count
from typing import Literal, Optional

import numpy as np

from scorefuse.errors import CacheMismatch, DegenerateBatch, NonFiniteGradient, ScheduleOverrun, ShapeError

Activation = Literal["relu", "sigmoid", "identity"]
Mode = Literal["train", "eval"]

_net_ids = count()


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to keep exp() from overflowing.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, grad_a: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == "relu":
        return grad_a * (z > 0)
    if activation == "sigmoid":
        return grad_a * a * (1.0 - a)
    return grad_a


@dataclass
class DenseLayer:
    """y = act(x @ weight + bias); weight is (fan_in, fan_out)."""
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = "identity"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class ForwardCache:
    """Everything backward() needs, tagged with the network state it came from."""
    net_id: int
    version: int
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    outputs: list[np.ndarray]


class DenseNet:
    """A stack of affine layers, each followed by an activation."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ShapeError(f"layer widths {prev.fan_out} -> {nxt.fan_in} are incompatible")
        for layer in layers:
            if layer.bias.shape != (layer.fan_out,):
                raise ShapeError(f"bias shape {layer.bias.shape} != ({layer.fan_out},)")
        self.layers = layers
        self._id = next(_net_ids)
        self._version = 0

    @classmethod
    def build(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        hidden_activation: Activation = "relu",
        output_activation: Activation = "identity",
    ) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            activation = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer(
                weight=rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                bias=np.zeros(fan_out),
                activation=activation,
            ))
        return cls(layers)

    @property
    def in_features(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_features(self) -> int:
        return self.layers[-1].fan_out

    @property
    def version(self) -> int:
        return self._version

    def forward(self, x: np.ndarray, mode: Mode = "eval") -> tuple[np.ndarray, ForwardCache]:
        # DenseNet has no mode-dependent layers; ``mode`` keeps the call shape uniform.
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected input (batch, {self.in_features}), got {x.shape}")

        inputs, pre, outs = [], [], []
        a = x
        for layer in self.layers:
            inputs.append(a)
            z = a @ layer.weight + layer.bias
            a = _activate(z, layer.activation)
            pre.append(z)
            outs.append(a)
        return a, ForwardCache(self._id, self._version, inputs, pre, outs)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients in ``parameters()`` order, and dL/dx."""
        if cache.net_id != self._id or cache.version != self._version:
            raise CacheMismatch("forward cache does not belong to the current parameters")
        grad = np.asarray(grad_out, dtype=np.float64)
        if grad.shape != cache.outputs[-1].shape:
            raise ShapeError(f"grad_out shape {grad.shape} != output shape {cache.outputs[-1].shape}")

        grads: list[np.ndarray] = []
        for layer, inp, z, a in reversed(list(zip(self.layers, cache.inputs, cache.pre_activations, cache.outputs))):
            dz = _activation_grad(z, a, grad, layer.activation)
            grads.append(dz.sum(axis=0))       # bias
            grads.append(inp.T @ dz)           # weight
            grad = dz @ layer.weight.T
        grads.reverse()
        return grads, grad

    def parameters(self) -> list[np.ndarray]:
        """[W0, b0, W1, b1, ...]"""
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def set_parameters(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} parameter arrays, got {len(params)}")
        for i, layer in enumerate(self.layers):
            weight, bias = params[2 * i], params[2 * i + 1]
            if weight.shape != layer.weight.shape or bias.shape != layer.bias.shape:
                raise ShapeError("parameter shapes changed")
            layer.weight = np.array(weight, dtype=np.float64)
            layer.bias = np.array(bias, dtype=np.float64)
        self._version += 1

    def to_dict(self) -> list[dict]:
        return [
            {
                "shape": list(layer.weight.shape),
                "weights": layer.weight.ravel().tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
            }
            for layer in self.layers
        ]

    @classmethod
    def from_dict(cls, data: list[dict]) -> "DenseNet":
        layers = []
        for entry in data:
            rows, cols = entry["shape"]
            layers.append(DenseLayer(
                weight=np.array(entry["weights"], dtype=np.float64).reshape(rows, cols),
                bias=np.array(entry["bias"], dtype=np.float64),
                activation=entry.get("activation", "identity"),
            ))
        return cls(layers)


# ===== BATCH NORM =====

@dataclass
class BatchNormCache:
    mode: Mode
    x_hat: np.ndarray
    inv_std: np.ndarray


@dataclass
class BatchNormState:
    """Per-feature batch normalization with running statistics."""
    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)
    shift: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0 < self.momentum < 1:
            raise ValueError(f"momentum must be in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        f = self.num_features
        self.running_mean = np.zeros(f) if self.running_mean is None else np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.ones(f) if self.running_var is None else np.asarray(self.running_var, dtype=np.float64)
        self.scale = np.ones(f) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        self.shift = np.zeros(f) if self.shift is None else np.asarray(self.shift, dtype=np.float64)
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be >= 0")

    def apply(self, x: np.ndarray, mode: Mode = "eval") -> tuple[np.ndarray, BatchNormCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise ShapeError(f"expected (batch, {self.num_features}), got {x.shape}")

        if mode == "train":
            if x.shape[0] < 2:
                raise DegenerateBatch("batch norm needs at least 2 rows in train mode")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var

        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        return self.scale * x_hat + self.shift, BatchNormCache(mode, x_hat, inv_std)

    def backward(self, cache: BatchNormCache, grad_y: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """([d_scale, d_shift], dL/dx)."""
        grad_y = np.asarray(grad_y, dtype=np.float64)
        if grad_y.shape != cache.x_hat.shape:
            raise ShapeError(f"grad shape {grad_y.shape} != activation shape {cache.x_hat.shape}")
        d_scale = (grad_y * cache.x_hat).sum(axis=0)
        d_shift = grad_y.sum(axis=0)
        d_xhat = grad_y * self.scale

        if cache.mode == "eval":
            # Running stats are constants here.
            return [d_scale, d_shift], d_xhat * cache.inv_std

        n = grad_y.shape[0]
        d_x = (cache.inv_std / n) * (
            n * d_xhat
            - d_xhat.sum(axis=0)
            - cache.x_hat * (d_xhat * cache.x_hat).sum(axis=0)
        )
        return [d_scale, d_shift], d_x

    def parameters(self) -> list[np.ndarray]:
        return [self.scale, self.shift]

    def set_parameters(self, params: list[np.ndarray]) -> None:
        scale, shift = params
        self.scale = np.array(scale, dtype=np.float64)
        self.shift = np.array(shift, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "mean": self.running_mean.tolist(),
            "var": self.running_var.tolist(),
            "scale": self.scale.tolist(),
            "shift": self.shift.tolist(),
            "momentum": self.momentum,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BatchNormState":
        return cls(
            num_features=len(data["mean"]),
            momentum=data.get("momentum", 0.1),
            eps=data.get("eps", 1e-5),
            running_mean=np.array(data["mean"], dtype=np.float64),
            running_var=np.array(data["var"], dtype=np.float64),
            scale=np.array(data["scale"], dtype=np.float64),
            shift=np.array(data["shift"], dtype=np.float64),
        )


def batchnorm_apply(state: BatchNormState, x: np.ndarray, mode: Mode = "eval") -> np.ndarray:
    return state.apply(x, mode)[0]


# ===== SCHEDULE =====

@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up to ``peak_lr`` then cosine annealing to ``floor_lr``."""
    warmup_steps: int
    total_steps: int
    peak_lr: float
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})")
        if self.floor_lr > self.peak_lr:
            raise ValueError("floor_lr must not exceed peak_lr")

    @classmethod
    def with_warmup_fraction(cls, total_steps: int, peak_lr: float, warmup_fraction: float = 0.1,
                             floor_lr: float = 0.0) -> "LrSchedule":
        total_steps = max(total_steps, 1)
        warmup = min(int(round(warmup_fraction * total_steps)), total_steps - 1)
        return cls(warmup, total_steps, peak_lr, floor_lr)

    def lr_at(self, step: int) -> float:
        return lr_at(self, step)


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ScheduleOverrun(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.peak_lr * step / w
    progress = (step - w) / (schedule.total_steps - w)
    return schedule.floor_lr + (schedule.peak_lr - schedule.floor_lr) * (1 + math.cos(math.pi * progress)) / 2


# ===== ADAM =====

@dataclass
class AdamState:
    """Adam moments for a fixed list of parameter shapes."""
    shapes: list[tuple[int, ...]]
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    schedule: Optional[LrSchedule] = None
    decay_mask: Optional[list[bool]] = None
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.shapes = [tuple(s) for s in self.shapes]
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]
        if self.decay_mask is None:
            self.decay_mask = [True] * len(self.shapes)

    @classmethod
    def for_params(cls, params: list[np.ndarray], **kwargs) -> "AdamState":
        return cls(shapes=[p.shape for p in params], **kwargs)

    def current_lr(self) -> float:
        if self.schedule is None:
            return self.lr
        return lr_at(self.schedule, min(self.step, self.schedule.total_steps))


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """One Adam update with decoupled weight decay; returns new parameter arrays."""
    if len(params) != len(state.shapes) or len(grads) != len(state.shapes):
        raise ShapeError("parameter/gradient count does not match optimizer state")
    for p, g, shape in zip(params, grads, state.shapes):
        if p.shape != shape or g.shape != shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or inf")

    state.step += 1
    t = state.step
    lr = state.current_lr()
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t

    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        new = np.array(p, dtype=np.float64)
        if state.decay_mask[i] and state.weight_decay:
            new = new - lr * state.weight_decay * new
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new = new - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated.append(new)
    return updated


def forward(net: DenseNet, x: np.ndarray, mode: Mode = "eval") -> tuple[np.ndarray, ForwardCache]:
    return net.forward(x, mode)


def backward(net: DenseNet, cache: ForwardCache, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    return net.backward(cache, grad_out)
