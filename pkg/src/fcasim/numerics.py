"""Dense float64 tensor operators with reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` values in channels-last layout
(``B x H x W x C`` for feature maps). The operator set is closed: conv2d
(odd square kernels, zero "same" padding), per-position linear maps, ReLU,
global average pooling, softmax cross-entropy and sigmoid binary
cross-entropy, plus the handful of elementwise glue ops the surrogate model
needs. Differentiation goes through a :class:`Tape`, a flat Wengert list
recorded during the forward pass and replayed in reverse by
:meth:`Tape.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError, StateError, ValidationError

Array = np.ndarray


class Parameter:
    """A named, in-place updated tensor with a gradient buffer."""

    __slots__ = ("value", "grad", "grad_count", "trainable", "name")

    def __init__(self, value, name: str = "", trainable: bool = True):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.grad_count = 0
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)
        self.grad_count = 0

    def accumulate(self, g: Array) -> None:
        self.grad += g
        self.grad_count += 1

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> Array:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


# --------------------------------------------------------------------------
# Pure forward operators


def _as_batch(x: Array) -> tuple[Array, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ConfigError(f"expected H x W x C or B x H x W x C input, got shape {x.shape}")
    return x, False


def _check_kernel(x: Array, kernel: Array) -> int:
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ConfigError(f"kernel must be k x k x Cin x Cout, got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if kernel.shape[2] != x.shape[-1]:
        raise ConfigError(f"kernel expects {kernel.shape[2]} input channels, input has {x.shape[-1]}")
    return k


def _matmul_last(x: Array, w: Array) -> Array:
    """``x @ w`` over the last axis as a single 2-D GEMM."""
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))


def _channel_sum(g: Array) -> Array:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def _patches(xb: Array, k: int) -> Array:
    p = k // 2
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    # B x H x W x Cin x k x k
    return sliding_window_view(xp, (k, k), axis=(1, 2))


def conv2d(x: Array, kernel: Array, bias: Array | None = None) -> Array:
    """Cross-correlation with zero padding that preserves spatial size."""
    xb, squeeze = _as_batch(x)
    k = _check_kernel(xb, kernel)
    if k == 1:
        out = _matmul_last(xb, kernel[0, 0])
    else:
        out = np.tensordot(_patches(xb, k), kernel, axes=([4, 5, 3], [0, 1, 2]))
    if bias is not None:
        out = out + bias
    return out[0] if squeeze else out


def conv2d_input_grad(g: Array, kernel: Array) -> Array:
    k = kernel.shape[0]
    if k == 1:
        return _matmul_last(g, kernel[0, 0].T)
    flipped = np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2))
    return conv2d(g, flipped)


def conv2d_kernel_grad(x: Array, g: Array, k: int) -> Array:
    cin, cout = x.shape[-1], g.shape[-1]
    if k == 1:
        return (x.reshape(-1, cin).T @ g.reshape(-1, cout)).reshape(1, 1, cin, cout)
    gk = np.tensordot(_patches(x, k), g, axes=([0, 1, 2], [0, 1, 2]))  # Cin x k x k x Cout
    return np.ascontiguousarray(gk.transpose(1, 2, 0, 3))


def linear(x: Array, weight: Array, bias: Array | None = None) -> Array:
    """Fully connected map on the last axis: ``x @ weight + bias``."""
    if weight.ndim != 2 or weight.shape[0] != x.shape[-1]:
        raise ConfigError(f"weight shape {weight.shape} incompatible with input {x.shape}")
    out = _matmul_last(x, weight)
    return out + bias if bias is not None else out


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def global_average_pool(x: Array) -> Array:
    """Mean over the two spatial axes of a (B x) H x W x C tensor."""
    if x.ndim not in (3, 4) or x.shape[-2] < 1 or x.shape[-3] < 1:
        raise ConfigError(f"cannot pool tensor of shape {x.shape}")
    return x.mean(axis=(-3, -2))


def softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x: Array) -> Array:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_cross_entropy(logits: Array, true_index) -> tuple[float, Array]:
    """Return ``(loss, probs)``; batched logits take an index array and give the mean loss."""
    logits = np.asarray(logits, dtype=np.float64)
    idx = np.asarray(true_index)
    k = logits.shape[-1]
    if np.any(idx < 0) or np.any(idx >= k):
        raise ValidationError(f"true index {true_index} out of range for {k} classes")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    if logits.ndim == 1:
        return float(-logp[int(idx)]), probs
    picked = np.take_along_axis(logp, idx.reshape(-1, 1), axis=-1)[:, 0]
    return float(-picked.mean()), probs


def _check_binary(target: Array) -> None:
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValidationError("binary cross-entropy targets must be 0 or 1")


def binary_cross_entropy(pred_logits: Array, target_mask: Array) -> float:
    """Mean sigmoid BCE in the stable ``max(x,0) - x t + log1p(exp(-|x|))`` form."""
    x = np.asarray(pred_logits, dtype=np.float64)
    t = np.asarray(target_mask, dtype=np.float64)
    if x.shape != t.shape:
        raise ValidationError(f"logits {x.shape} and targets {t.shape} differ in shape")
    _check_binary(t)
    return float(np.mean(np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))))


# --------------------------------------------------------------------------
# Reverse-mode tape


Backward = Callable[[Array], Sequence["Array | None"]]


class Tape:
    """Records differentiable ops in forward order and replays them backwards.

    Only ops with at least one input that requires a gradient are recorded,
    so frozen prefixes of a network cost nothing at backward time. Gradients
    of trainable :class:`Parameter` leaves are accumulated into ``.grad``.
    """

    def __init__(self):
        self._ops: list[tuple[int, list[int], list[bool], Backward]] = []
        self._requires: set[int] = set()
        self._params: dict[int, Parameter] = {}
        self._alive: list[Array] = []
        self._consumed = False

    def _leaf(self, x) -> Array:
        if isinstance(x, Parameter):
            arr = x.value
            if x.trainable:
                self._params[id(arr)] = x
                self._requires.add(id(arr))
                self._alive.append(arr)
            return arr
        return np.asarray(x, dtype=np.float64)

    def requires_grad(self, x: Array) -> bool:
        return id(x) in self._requires

    def _record(self, out: Array, inputs: Sequence[Array], backward: Backward) -> Array:
        needs = [id(a) in self._requires for a in inputs]
        if any(needs):
            self._requires.add(id(out))
            self._alive.append(out)
            self._alive.extend(inputs)
            self._ops.append((id(out), [id(a) for a in inputs], needs, backward))
        return out

    def watch(self, x: Array) -> Array:
        """Mark a plain array as requiring a gradient (used by gradient checks)."""
        x = np.asarray(x, dtype=np.float64)
        self._requires.add(id(x))
        self._alive.append(x)
        return x

    # -- ops -------------------------------------------------------------

    def conv2d(self, x, kernel, bias=None) -> Array:
        xa, ka = self._leaf(x), self._leaf(kernel)
        ba = self._leaf(bias) if bias is not None else None
        xb, squeeze = _as_batch(xa)
        k = _check_kernel(xb, ka)
        out = conv2d(xa, ka, ba)
        inputs = [xa, ka] + ([ba] if ba is not None else [])
        need_x, need_k = id(xa) in self._requires, id(ka) in self._requires

        def backward(g):
            gb = g[None] if squeeze else g
            gx = conv2d_input_grad(gb, ka) if need_x else None
            if gx is not None and squeeze:
                gx = gx[0]
            gk = conv2d_kernel_grad(xb, gb, k) if need_k else None
            grads = [gx, gk]
            if ba is not None:
                grads.append(_channel_sum(gb) if id(ba) in self._requires else None)
            return grads

        return self._record(out, inputs, backward)

    def linear(self, x, weight, bias=None) -> Array:
        xa, wa = self._leaf(x), self._leaf(weight)
        ba = self._leaf(bias) if bias is not None else None
        out = linear(xa, wa, ba)
        inputs = [xa, wa] + ([ba] if ba is not None else [])
        cin, cout = wa.shape

        def backward(g):
            grads = [_matmul_last(g, wa.T), xa.reshape(-1, cin).T @ g.reshape(-1, cout)]
            if ba is not None:
                grads.append(g.reshape(-1, cout).sum(axis=0))
            return grads

        return self._record(out, inputs, backward)

    def relu(self, x) -> Array:
        xa = self._leaf(x)
        out = relu(xa)
        return self._record(out, [xa], lambda g: [g * (xa > 0.0)])

    def add(self, a, b) -> Array:
        aa, ba = self._leaf(a), self._leaf(b)
        if aa.shape != ba.shape:
            raise ConfigError(f"cannot add shapes {aa.shape} and {ba.shape}")
        return self._record(aa + ba, [aa, ba], lambda g: [g, g])

    def global_average_pool(self, x) -> Array:
        xa = self._leaf(x)
        out = global_average_pool(xa)
        h, w = xa.shape[-3], xa.shape[-2]

        def backward(g):
            gx = np.broadcast_to(g[..., None, None, :] / (h * w), xa.shape)
            return [np.array(gx)]

        return self._record(out, [xa], backward)

    def stop_gradient(self, x) -> Array:
        """Forward identity whose output never carries gradient back to ``x``."""
        return self._leaf(x).view()

    def grad_reverse(self, x, scale: float = 1.0) -> Array:
        """Forward identity whose backward multiplies the gradient by ``-scale``."""
        xa = self._leaf(x)
        return self._record(xa.view(), [xa], lambda g: [-scale * g])

    def sum(self, x) -> Array:
        xa = self._leaf(x)
        out = np.asarray(xa.sum())
        return self._record(out, [xa], lambda g: [np.full(xa.shape, float(g))])

    def square(self, x) -> Array:
        xa = self._leaf(x)
        return self._record(xa * xa, [xa], lambda g: [2.0 * xa * g])

    def scale(self, x, c: float) -> Array:
        xa = self._leaf(x)
        return self._record(xa * c, [xa], lambda g: [g * c])

    def mean(self, xs: Sequence) -> Array:
        """Mean of a list of scalar nodes."""
        arrs = [self._leaf(x) for x in xs]
        n = len(arrs)
        out = np.asarray(sum(float(a) for a in arrs) / n)
        return self._record(out, arrs, lambda g: [g / n] * n)

    def softmax_cross_entropy(self, logits, true_index) -> tuple[Array, Array]:
        la = self._leaf(logits)
        loss, probs = softmax_cross_entropy(la, true_index)
        idx = np.asarray(true_index)
        out = np.asarray(loss)

        def backward(g):
            d = probs.copy()
            if la.ndim == 1:
                d[int(idx)] -= 1.0
            else:
                np.subtract.at(d, (np.arange(d.shape[0]), idx.reshape(-1)), 1.0)
                d /= d.shape[0]
            return [d * g]

        return self._record(out, [la], backward), probs

    def binary_cross_entropy(self, pred_logits, target_mask) -> Array:
        xa = self._leaf(pred_logits)
        t = np.asarray(target_mask, dtype=np.float64)
        out = np.asarray(binary_cross_entropy(xa, t))
        return self._record(out, [xa], lambda g: [(sigmoid(xa) - t) * (g / xa.size)])

    def proximal(self, params: Sequence, anchors: Sequence[Array], mu: float) -> Array:
        """``(mu / 2) * sum ||w - w_anchor||^2`` over paired parameters."""
        arrs = [self._leaf(p) for p in params]
        diffs = [a - np.asarray(w0) for a, w0 in zip(arrs, anchors)]
        out = np.asarray(0.5 * mu * sum(float(np.sum(d * d)) for d in diffs))
        return self._record(out, arrs, lambda g: [mu * d * g for d in diffs])

    # -- reverse pass ----------------------------------------------------

    def backward(self, loss: Array) -> dict[Parameter, Array]:
        """Accumulate d(loss)/d(param) into every reachable trainable parameter."""
        if self._consumed:
            raise StateError("tape already consumed by a previous backward()")
        if id(loss) not in self._requires or not self._ops:
            raise StateError("backward() called without a recorded forward pass")
        self._consumed = True
        grads: dict[int, Array] = {id(loss): np.ones_like(loss, dtype=np.float64)}
        for out_id, in_ids, needs, fn in reversed(self._ops):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for in_id, need, gi in zip(in_ids, needs, fn(g)):
                if not need or gi is None:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + gi
                else:
                    grads[in_id] = gi
        result = {}
        for pid, p in self._params.items():
            g = grads.get(pid)
            if g is not None:
                p.accumulate(g)
                result[p] = g
        self._watched_grads = grads
        return result

    def grad_of(self, x: Array) -> Array | None:
        """Gradient reached by a :meth:`watch`-ed array in the last backward pass."""
        return getattr(self, "_watched_grads", {}).get(id(x))


# --------------------------------------------------------------------------
# Optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}", "kind")
        if not self.lr >= 0:
            raise ConfigError("learning rate must be nonnegative", "lr")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative", "weight_decay")


def optimizer_step(state: OptimizerState, params: Sequence[Parameter]) -> None:
    """One in-place SGD or Adam update with decoupled weight decay.

    Decay is applied first as ``w <- w - lr * wd * w``; then the gradient step.
    Gradients are reset to zero afterwards.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {p.name!r} at step {state.step + 1}")
    if state.kind == "adam" and not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step += 1
    lr, wd = state.lr, state.weight_decay
    if state.kind == "adam":
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1**state.step
        c2 = 1.0 - b2**state.step
    for i, p in enumerate(params):
        if wd:
            p.value -= lr * wd * p.value
        if state.kind == "sgd":
            p.value -= lr * p.grad
        else:
            m, v = state.m[i], state.v[i]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


class Optimizer:
    """Binds an :class:`OptimizerState` to a fixed parameter list."""

    def __init__(self, params: Iterable[Parameter], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def step(self) -> None:
        optimizer_step(self.state, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
