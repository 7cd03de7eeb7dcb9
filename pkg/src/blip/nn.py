"""Dense ReLU network with one output head per task.

All parameters live in one flat float64 vector. Each dense layer owns a
contiguous slice (weights row-major ``[fan_in, fan_out]``, then biases) and a
range half-width ``scale = C / sqrt(fan_in)``. Hidden layers come first, then
the heads in task order, so "backbone" is always a prefix of the vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from blip import kernels
from blip.quant import layer_scale, quantize_array

RAW = "raw"
QUANTIZED = "quantized"


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    head_specs: tuple[tuple[int, int], ...]  # (task_id, num_classes)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "head_specs", tuple((int(t), int(k)) for t, k in self.head_specs))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("need at least one hidden layer of positive width")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        ids = [t for t, _ in self.head_specs]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"head task ids must be 1..T in order, got {ids}")
        if any(k < 2 for _, k in self.head_specs):
            raise ValueError("every head needs at least 2 classes")


@dataclass(frozen=True)
class Layer:
    name: str
    fan_in: int
    fan_out: int
    offset: int
    scale: float

    @property
    def size(self) -> int:
        return (self.fan_in + 1) * self.fan_out

    @property
    def span(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    task_id: int

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ValueError("empty batch")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")


@dataclass
class Network:
    spec: NetworkSpec
    layers: list[Layer]
    params: np.ndarray
    total_bits: int = 20
    _heads: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._heads = {t: len(self.spec.hidden_dims) + i for i, (t, _) in enumerate(self.spec.head_specs)}
        expected = sum(layer.size for layer in self.layers)
        if self.params.shape != (expected,):
            raise ValueError(f"params has shape {self.params.shape}, expected ({expected},)")

    @classmethod
    def build(cls, spec: NetworkSpec, range_constant: float = 6.0, total_bits: int = 20,
              rng: np.random.Generator | None = None) -> "Network":
        """Lay out the parameter vector and initialise it uniformly on ``+-scale/sqrt(3)``."""
        layers = []
        offset = 0
        fan_in = spec.input_dim
        for i, width in enumerate(spec.hidden_dims, start=1):
            layers.append(Layer(f"fc{i}", fan_in, width, offset, layer_scale(range_constant, fan_in)))
            offset += layers[-1].size
            fan_in = width
        for task_id, classes in spec.head_specs:
            layers.append(Layer(f"head{task_id}", fan_in, classes, offset, layer_scale(range_constant, fan_in)))
            offset += layers[-1].size
        params = np.zeros(offset)
        if rng is not None:
            for layer in layers:
                bound = layer.scale / math.sqrt(3.0)
                params[layer.span] = rng.uniform(-bound, bound, layer.size)
        return cls(spec, layers, params, total_bits)

    def copy(self) -> "Network":
        return Network(self.spec, list(self.layers), self.params.copy(), self.total_bits)

    @property
    def num_params(self) -> int:
        return self.params.size

    @property
    def backbone_size(self) -> int:
        return self.layers[len(self.spec.hidden_dims)].offset

    def head(self, task_id: int) -> Layer:
        try:
            return self.layers[self._heads[task_id]]
        except KeyError:
            raise KeyError(f"no such head: task {task_id}") from None

    def num_classes(self, task_id: int) -> int:
        return self.head(task_id).fan_out

    def path(self, task_id: int) -> list[Layer]:
        """Layers used to evaluate ``task_id``: the backbone then its head."""
        return self.layers[: len(self.spec.hidden_dims)] + [self.head(task_id)]

    def active_slices(self, task_id: int) -> list[slice]:
        return [slice(0, self.backbone_size), self.head(task_id).span]

    def scale_vector(self) -> np.ndarray:
        """Per-parameter range half-width."""
        return np.concatenate([np.full(layer.size, layer.scale) for layer in self.layers])

    def quantized_params(self, bits: int | None = None) -> np.ndarray:
        bits = self.total_bits if bits is None else bits
        out = np.empty_like(self.params)
        for layer in self.layers:
            quantize_array(self.params[layer.span], bits, layer.scale, out=out[layer.span])
        return out


def unpack(layer: Layer, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = params[layer.span]
    n_w = layer.fan_in * layer.fan_out
    return flat[:n_w].reshape(layer.fan_in, layer.fan_out), flat[n_w:]


def _params_for(net: Network, mode: str) -> np.ndarray:
    if mode == RAW:
        return net.params
    if mode == QUANTIZED:
        return net.quantized_params()
    raise ValueError(f"unknown mode {mode!r}")


def _check_inputs(net: Network, inputs: np.ndarray, task_id: int) -> None:
    net.head(task_id)
    if inputs.ndim != 2 or inputs.shape[1] != net.spec.input_dim:
        raise ValueError(f"inputs must have shape [batch, {net.spec.input_dim}], got {inputs.shape}")
    if not np.isfinite(inputs).all():
        raise ValueError("non-finite input")


def _trace(net: Network, params: np.ndarray, inputs: np.ndarray, task_id: int):
    """Forward pass keeping every layer input for backprop."""
    acts = [inputs]
    path = net.path(task_id)
    h = inputs
    for layer in path[:-1]:
        w, b = unpack(layer, params)
        h = h @ w
        h += b
        np.maximum(h, 0.0, out=h)
        acts.append(h)
    w, b = unpack(path[-1], params)
    logits = h @ w + b
    return acts, logits


def forward(net: Network, inputs, task_id: int, mode: str = RAW) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    _check_inputs(net, inputs, task_id)
    return _trace(net, _params_for(net, mode), inputs, task_id)[1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def backprop(net: Network, params: np.ndarray, acts, dlogits: np.ndarray, task_id: int,
             out: np.ndarray, squared: bool = False) -> np.ndarray:
    """Accumulate per-sample gradients (or their squares) into ``out``.

    ``dlogits`` holds d(objective)/d(logits) for every sample. With
    ``squared=True`` the result is the sum over samples of squared per-sample
    gradients, computed as ``(a**2).T @ delta**2`` per dense layer.
    Only the backbone and the head of ``task_id`` are written.
    """
    path = net.path(task_id)
    delta = dlogits
    for depth in range(len(path) - 1, -1, -1):
        layer = path[depth]
        a = acts[depth]
        flat = out[layer.span]
        n_w = layer.fan_in * layer.fan_out
        gw = flat[:n_w].reshape(layer.fan_in, layer.fan_out)
        if squared:
            np.matmul((a * a).T, delta * delta, out=gw)
            flat[n_w:] = (delta * delta).sum(axis=0)
        else:
            np.matmul(a.T, delta, out=gw)
            flat[n_w:] = delta.sum(axis=0)
        if depth > 0:
            w, _ = unpack(layer, params)
            delta = delta @ w.T
            delta *= acts[depth] > 0
    return out


def backward(net: Network, batch: Batch, mode: str = RAW, out: np.ndarray | None = None):
    """Mean softmax cross-entropy over ``batch`` and its gradient w.r.t. every parameter.

    In quantized mode the gradient is taken at the quantized parameters and
    returned unchanged for the raw ones (straight-through). Entries of other
    heads are zero; a caller-supplied ``out`` must already hold zeros there.
    """
    inputs = np.asarray(batch.inputs, dtype=np.float64)
    labels = np.asarray(batch.labels, dtype=np.int64)
    _check_inputs(net, inputs, batch.task_id)
    k = net.num_classes(batch.task_id)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k}) for task {batch.task_id}")
    params = _params_for(net, mode)
    acts, logits = _trace(net, params, inputs, batch.task_id)
    logp = log_softmax(logits)
    m = len(labels)
    rows = np.arange(m)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= m
    if out is None:
        out = np.zeros_like(net.params)
    backprop(net, params, acts, dlogits, batch.task_id, out)
    return float(loss), out


def loss_and_accuracy(net: Network, inputs: np.ndarray, labels: np.ndarray, task_id: int,
                      mode: str = RAW, chunk: int = 2048) -> tuple[float, float]:
    total_loss = 0.0
    correct = 0
    for start in range(0, len(labels), chunk):
        x = inputs[start:start + chunk]
        y = labels[start:start + chunk]
        logp = log_softmax(forward(net, x, task_id, mode))
        total_loss -= logp[np.arange(len(y)), y].sum()
        correct += int((logp.argmax(axis=1) == y).sum())
    return total_loss / len(labels), correct / len(labels)


def sgd_step(net: Network, grads: np.ndarray, lr: float) -> Network:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not np.isfinite(grads).all():
        raise FloatingPointError("diverged: non-finite gradient")
    net.params -= lr * grads
    return net


def bounded_sgd_step(net: Network, grads: np.ndarray, lr: float, lo: np.ndarray, hi: np.ndarray,
                     spans: list[slice] | None = None) -> Network:
    """SGD step fused with the per-parameter clip ``clip(theta, lo, hi)``.

    ``spans`` restricts the update to those parameter slices.
    """
    for span in spans or [slice(None)]:
        if not kernels.bounded_step(net.params[span], grads[span], lr, lo[span], hi[span]):
            raise FloatingPointError("diverged: non-finite gradient")
    return net


@dataclass
class ScheduleState:
    """Plateau schedule: divide the rate by ``decay`` after ``patience``
    epochs without a new best validation loss."""

    lr: float = 0.05
    decay: float = 3.0
    patience: int = 5
    lr_min: float = 1e-4
    max_epochs: int = 200
    best: float = math.inf
    bad_epochs: int = 0
    epoch: int = 0


def lr_schedule(state: ScheduleState, val_loss: float) -> tuple[float, bool]:
    """Record one epoch's validation loss; return the next rate and whether to stop."""
    state.epoch += 1
    if val_loss < state.best:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr /= state.decay
            state.bad_epochs = 0
    stop = state.lr < state.lr_min or state.epoch >= state.max_epochs
    return state.lr, stop
