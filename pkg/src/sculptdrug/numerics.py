"""Minimal reverse-mode kernel over dense float64 arrays.

Every operation on :class:`Tensor` records a tape node (parents + a
vector-Jacobian closure); the tape is dynamic and rebuilt on every forward
pass, since graph topology changes with the edge sets. ``backward`` walks the
tape once, accumulating into ``grad`` slots of the leaves it reaches.

Also hosts the training-side machinery: :class:`ParameterStore` (named
trainable tensors with Adam moments and an EMA shadow), ``adam_step``,
``ema_update``, MLP layers, and a finite-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GradientError, NondeterministicLossError, ValidationError


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Leaves (parameters, constants) have no parents. Interior nodes carry a
    closure mapping the upstream gradient to per-parent gradients.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; everything funnels into the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


as_tensor = _as_tensor


def constant(value) -> Tensor:
    return _as_tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return Tensor(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data**2), b.data.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects rank-2 tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return Tensor(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return Tensor(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a: Tensor) -> Tensor:
    return Tensor(a.data**2, (a,), lambda g: (g * 2.0 * a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return Tensor(out, (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))), np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    out = a.data * sig
    return Tensor(out, (a,), lambda g: (g * (sig + a.data * sig * (1.0 - sig)),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out**2),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def rms_norm(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Rows scaled to unit root-mean-square; parameter-free pre-norm."""
    scale = sqrt(add(mean(square(a), axis=1, keepdims=True), _as_tensor(eps)))
    return div(a, scale)


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor(out, (a,), vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / count))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor(out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    sizes = [arr.shape[axis] for arr in arrays]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(tensors), vjp)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a rank>=1 tensor; backward scatter-adds."""
    idx = np.asarray(index, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return Tensor(out, (a,), vjp)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segment_ids``."""
    idx = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((num_segments,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.data)
    return Tensor(out, (a,), lambda g: (g[idx],))


def edge_distances(coords: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
    """Per-edge Euclidean distance ||x_src - x_dst||.

    Zero-length edges (structural self-loops) get a zero gradient instead of
    the undefined norm derivative.
    """
    s = np.asarray(src, dtype=np.int64)
    d = np.asarray(dst, dtype=np.int64)
    diff = coords.data[s] - coords.data[d]
    dist = np.sqrt((diff**2).sum(axis=1))

    def vjp(g):
        safe = np.where(dist > 0.0, dist, 1.0)
        unit = diff / safe[:, None]
        unit[dist == 0.0] = 0.0
        contrib = g[:, None] * unit
        acc = np.zeros_like(coords.data)
        np.add.at(acc, s, contrib)
        np.subtract.at(acc, d, contrib)
        return (acc,)

    return Tensor(dist, (coords,), vjp)


def softmax_rows(logits: Tensor) -> Tensor:
    """Row softmax on the tape; shift by the detached row max for stability."""
    shift = logits.data.max(axis=-1, keepdims=True)
    e = exp(sub(logits, _as_tensor(shift)))
    return div(e, tensor_sum(e, axis=-1, keepdims=True))


def segment_softmax(logits: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax over rows sharing a segment id (per-head when rank 2)."""
    idx = np.asarray(segment_ids, dtype=np.int64)
    peak = np.full((num_segments,) + logits.data.shape[1:], -np.inf)
    np.maximum.at(peak, idx, logits.data)
    e = exp(sub(logits, _as_tensor(peak[idx])))
    denom = segment_sum(e, idx, num_segments)
    return div(e, gather_rows(denom, idx))


def softmax_stable(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array stable softmax; rejects non-finite input."""
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("softmax input must be finite")
    shifted = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into grad slots reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise GradientError("gradient requested for a value outside the recorded graph")
    if loss.data.size != 1:
        raise GradientError("backward expects a scalar loss")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.005
    beta1: float = 0.95
    beta2: float = 0.999
    epsilon: float = 1e-8
    ema_decay: float = 0.999
    batch_size: int = 32
    grad_clip: float | None = 10.0  # global-norm cap applied by the train loop

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValidationError("momentum coefficients must lie in (0, 1)")
        if self.learning_rate <= 0.0:
            raise ValidationError("learning rate must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0.0:
            raise ValidationError("gradient clip must be positive when set")


class ParameterStore:
    """Ordered name -> Tensor map with Adam moments and an EMA shadow."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.ema: dict[str, np.ndarray] = {}

    def create(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name '{name}'")
        tensor = Tensor(np.array(values, dtype=np.float64))
        self._params[name] = tensor
        self.adam_m[name] = np.zeros_like(tensor.data)
        self.adam_v[name] = np.zeros_like(tensor.data)
        self.ema[name] = tensor.data.copy()
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, params, ema=None, adam_m=None, adam_v=None) -> None:
        for name, arr in params.items():
            if name in self._params:
                if self._params[name].data.shape != arr.shape:
                    raise DimensionError(f"checkpoint shape mismatch for '{name}'")
                self._params[name].data = arr.copy()
            else:
                self.create(name, arr)
        for source, target in ((ema, self.ema), (adam_m, self.adam_m), (adam_v, self.adam_v)):
            if source:
                for name, arr in source.items():
                    target[name] = arr.copy()

    def ema_copy(self) -> "ParameterStore":
        """New store whose parameter values are the EMA shadows."""
        twin = ParameterStore()
        for name in self._params:
            twin.create(name, self.ema[name])
        return twin


def reverse_gradients(loss: Tensor, store: ParameterStore) -> None:
    """Backward pass; parameters not on the tape end with zero grad."""
    store.zero_grads()
    backward(loss)
    for _, t in store.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def adam_step(store: ParameterStore, config: OptimizerConfig, step_counter: int) -> None:
    """Bias-corrected Adam update; consumes and clears gradients."""
    if step_counter < 1:
        raise ValidationError("Adam step counter starts at 1")
    b1, b2 = config.beta1, config.beta2
    for name, t in store.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if np.any(np.isnan(g)):
            raise GradientError(f"NaN gradient in '{name}'; step refused")
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g**2
        m_hat = m / (1.0 - b1**step_counter)
        v_hat = v / (1.0 - b2**step_counter)
        t.data = t.data - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        t.grad = None


def ema_update(store: ParameterStore, decay: float) -> None:
    for name, t in store.items():
        shadow = store.ema[name]
        shadow *= decay
        shadow += (1.0 - decay) * t.data


def clip_gradients(store: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float((t.grad**2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, t in store.items():
            if t.grad is not None:
                t.grad *= scale
    return norm


# -- MLP layers ----------------------------------------------------------------

_ACTIVATIONS = {"silu": silu, "sigmoid": sigmoid, "tanh": tanh, "identity": lambda t: t}


@dataclass(frozen=True)
class MlpSpec:
    """Widths (in, hidden..., out); activation between layers.

    ``final_activation`` defaults to identity; coordinate-gate heads use tanh
    so per-edge position updates stay bounded. ``final_bias=False`` drops the
    last layer's bias; use it when the raw output feeds a softmax directly,
    where a uniform shift is a dead direction.
    """

    name: str
    widths: tuple[int, ...]
    activation: str = "silu"
    zero_init_last: bool = False
    final_bias: bool = True
    final_activation: str = "identity"
    final_init_gain: float = 1.0  # residual-message heads start small

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValidationError("MLP needs at least (in, out) widths")
        if self.activation not in _ACTIVATIONS or self.final_activation not in _ACTIVATIONS:
            raise ValidationError(f"unknown activation '{self.activation}'")

    @property
    def layer_count(self) -> int:
        return len(self.widths) - 1

    def has_bias(self, layer: int) -> bool:
        return self.final_bias or layer < self.layer_count - 1


def ensure_mlp_params(store: ParameterStore, spec: MlpSpec, rng: np.random.Generator) -> None:
    """Create the spec's weights if absent: Kaiming-uniform, zero biases."""
    for layer in range(spec.layer_count):
        w_name = f"{spec.name}/w{layer}"
        if w_name in store:
            continue
        fan_in, fan_out = spec.widths[layer], spec.widths[layer + 1]
        if spec.zero_init_last and layer == spec.layer_count - 1:
            weight = np.zeros((fan_in, fan_out))
        else:
            bound = math.sqrt(6.0 / fan_in)
            if layer == spec.layer_count - 1:
                bound *= spec.final_init_gain
            weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        store.create(w_name, weight)
        if spec.has_bias(layer):
            store.create(f"{spec.name}/b{layer}", np.zeros(fan_out))


def mlp_forward(store: ParameterStore, x: Tensor, spec: MlpSpec) -> Tensor:
    """Apply the MLP; accepts (batch, in) or a bare (in,) vector."""
    squeeze = x.data.ndim == 1
    h = reshape(x, (1, x.data.shape[0])) if squeeze else x
    act = _ACTIVATIONS[spec.activation]
    for layer in range(spec.layer_count):
        expected = spec.widths[layer]
        if h.data.shape[1] != expected:
            raise DimensionError(
                f"{spec.name}/w{layer}: expected input width {expected}, got {h.data.shape[1]}"
            )
        h = matmul(h, store[f"{spec.name}/w{layer}"])
        if spec.has_bias(layer):
            h = add(h, store[f"{spec.name}/b{layer}"])
        if layer < spec.layer_count - 1:
            h = act(h)
    h = _ACTIVATIONS[spec.final_activation](h)
    return reshape(h, (h.data.shape[1],)) if squeeze else h


# -- finite-difference checking --------------------------------------------------

@dataclass(frozen=True)
class FdReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def finite_diff_check(
    store: ParameterStore,
    loss_fn,
    h: float = 1e-6,
    tolerance: float = 1e-5,
    entries_per_tensor: int | None = None,
) -> FdReport:
    """Compare reverse-mode gradients against central differences.

    ``loss_fn`` must be deterministic (two evaluations are compared bitwise).
    When ``entries_per_tensor`` is set, only the entries with the largest
    reverse-mode gradients are probed per tensor, which keeps large models
    tractable while still exercising every tensor.
    """
    first = loss_fn()
    second = loss_fn()
    if not np.array_equal(first.data, second.data):
        raise NondeterministicLossError("loss differs between evaluations; freeze the RNG")
    reverse_gradients(first, store)
    analytic = {name: t.grad.copy() for name, t in store.items()}

    per_param: dict[str, float] = {}
    worst_name = ""
    worst_err = 0.0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        g_ad = analytic[name].reshape(-1)
        if entries_per_tensor is None or flat.size <= entries_per_tensor:
            entries = range(flat.size)
        else:
            entries = np.argsort(-np.abs(g_ad), kind="stable")[:entries_per_tensor]
        tensor_err = 0.0
        for idx in entries:
            original = flat[idx]
            flat[idx] = original + h
            plus = loss_fn().item()
            flat[idx] = original - h
            minus = loss_fn().item()
            flat[idx] = original
            g_fd = (plus - minus) / (2.0 * h)
            denom = max(abs(g_ad[idx]), abs(g_fd), 1e-8)
            tensor_err = max(tensor_err, abs(g_ad[idx] - g_fd) / denom)
        per_param[name] = tensor_err
        if tensor_err >= worst_err:
            worst_err = tensor_err
            worst_name = name
    store.zero_grads()
    return FdReport(max_rel_error=worst_err, worst_param=worst_name, per_param=per_param)
