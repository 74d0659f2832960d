"""Central finite-difference gradient checks for every differentiable layer."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from fcasim import numerics as nx
from fcasim.config import ModelConfig
from fcasim.model import SurrogateModel
from fcasim.numerics import Parameter, Tape

H = 1e-5
# elementwise |a - n| / max(|a|, |n|, FLOOR); the floor keeps exact zeros from dividing by zero
FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_arrays(fn: Callable[[Tape, list[np.ndarray]], np.ndarray], arrays: Sequence[np.ndarray]) -> float:
    """Max relative error of d fn / d arrays, tape backward vs central differences."""
    tape = Tape()
    watched = [tape.watch(a.copy()) for a in arrays]
    tape.backward(fn(tape, watched))
    worst = 0.0
    for i, a in enumerate(arrays):
        g = tape.grad_of(watched[i])
        analytic = np.zeros_like(a) if g is None else np.asarray(g)
        numeric = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = [x.copy() for x in arrays]
                pert[i][j] += sign * H
                vals.append(float(fn(Tape(), pert)))
            numeric[j] = (vals[0] - vals[1]) / (2 * H)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def check_parameters(
    loss_fn: Callable[[Tape], np.ndarray],
    params: Sequence[Parameter],
    numeric_fn: Callable[[Tape], np.ndarray] | None = None,
) -> float:
    """Backward of ``loss_fn`` vs central differences of ``numeric_fn`` (default: the same loss)."""
    numeric_fn = numeric_fn or loss_fn
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.value)
        for j in np.ndindex(p.shape):
            orig = p.value[j]
            vals = []
            for sign in (1.0, -1.0):
                p.value[j] = orig + sign * H
                vals.append(float(numeric_fn(Tape())))
            p.value[j] = orig
            numeric[j] = (vals[0] - vals[1]) / (2 * H)
        worst = max(worst, rel_error(analytic, numeric))
        p.zero_grad()
    return worst


def _readout(tape: Tape, y, offset) -> np.ndarray:
    """Generic scalar head: sum((y + offset)^2)."""
    return tape.sum(tape.square(tape.add(y, offset)))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def layer_errors(seed: int) -> dict[str, float]:
    """Max relative gradient error per layer type for one random draw."""
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}

    x = rng.normal(size=(2, 4, 4, 3))
    k3 = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    off = rng.normal(size=(2, 4, 4, 2))
    out["conv2d_3x3"] = check_arrays(lambda t, a: _readout(t, t.conv2d(a[0], a[1], a[2]), off), [x, k3, b])

    k1 = rng.normal(size=(1, 1, 3, 2))
    out["conv2d_1x1"] = check_arrays(lambda t, a: _readout(t, t.conv2d(a[0], a[1], a[2]), off), [x, k1, b])

    w = rng.normal(size=(3, 2))
    out["linear"] = check_arrays(lambda t, a: _readout(t, t.linear(a[0], a[1], a[2]), off), [x, w, b])

    xr = _away_from_zero(rng, (2, 4, 4, 3))
    off3 = rng.normal(size=(2, 4, 4, 3))
    out["relu"] = check_arrays(lambda t, a: _readout(t, t.relu(a[0]), off3), [xr])

    offg = rng.normal(size=(2, 3))
    out["global_average_pool"] = check_arrays(lambda t, a: _readout(t, t.global_average_pool(a[0]), offg), [x])

    y = rng.normal(size=x.shape)
    out["add"] = check_arrays(lambda t, a: _readout(t, t.add(a[0], a[1]), off3), [x, y])

    logits = rng.normal(size=(5, 3))
    idx = rng.integers(0, 3, size=5)
    out["softmax_cross_entropy"] = check_arrays(lambda t, a: t.softmax_cross_entropy(a[0], idx)[0], [logits])

    z = rng.normal(scale=2.0, size=(2, 4, 4, 2))
    target = (rng.random(z.shape) < 0.5).astype(np.float64)
    out["binary_cross_entropy"] = check_arrays(lambda t, a: t.binary_cross_entropy(a[0], target), [z])

    anchor = rng.normal(size=(3, 2))
    out["proximal"] = check_arrays(lambda t, a: t.proximal([a[0]], [anchor], 0.3), [w])

    out["surrogate_model"] = model_error(seed)
    return out


KINK_MARGIN = 1e-3


def relu_margin(m: SurrogateModel, images: np.ndarray) -> float:
    """Smallest |pre-activation| over all frozen-block ReLUs."""
    worst = np.inf
    h = images
    for layer, ad in enumerate(m.adapters):
        w, b = m.backbone[layer]
        z = nx.conv2d(h, w.value, b.value)
        worst = min(worst, float(np.abs(z).min()))
        r = nx.relu(z)
        h = r + ad.apply(r, None)
    return worst


def tiny_model(seed: int, num_layers: int = 2, channels: int = 3, size: int = 6, classes: int = 2, clients: int = 2):
    cfg = ModelConfig(num_layers=num_layers, channels=channels)
    m = SurrogateModel(cfg, clients, classes, size, seed)
    rng = np.random.default_rng(seed + 10_000)
    for ad in m.adapters:
        ad.bias.value[...] = rng.normal(scale=0.1, size=ad.bias.shape)
        ad.gld.weight.value[...] = rng.normal(size=ad.gld.weight.shape)
    return m


def model_error(seed: int) -> float:
    """Whole network trained on BCE segmentation + pretext loss.

    The side branch is gradient-isolated, so the backward pass of the joint
    loss must match finite differences of the segmentation loss alone for
    adapters and decoder, and of the pretext loss alone for discriminators.
    """
    m = tiny_model(seed)
    rng = np.random.default_rng(seed + 20_000)
    # central differences are only valid where every ReLU is smooth within +-H
    for _ in range(100):
        images = rng.random((2, 6, 6, 1))
        if relu_margin(m, images) > KINK_MARGIN:
            break
    masks = (rng.random((2, 6, 6, 2)) < 0.3).astype(np.float64)
    client = int(rng.integers(0, 2))

    def loss(tape):
        fr = m.forward(images, tape=tape)
        seg = tape.binary_cross_entropy(fr.logits, masks)
        pre, _, _ = m.pretext_loss(fr.adapter_outputs, client, tape)
        return tape.add(seg, pre)

    def seg_only(tape):
        return tape.binary_cross_entropy(m.forward(images, tape=tape).logits, masks)

    def pretext_only(tape):
        return m.pretext_loss(m.forward(images, tape=tape).adapter_outputs, client, tape)[0]

    return max(
        check_parameters(loss, m.main_parameters(), seg_only),
        check_parameters(loss, m.discriminator_parameters(), pretext_only),
    )
