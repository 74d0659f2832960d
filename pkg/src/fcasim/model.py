"""Frozen-backbone segmentation surrogate with residual adapters and GLD side branches.

Layout for ``num_layers = L``::

    r_0 = relu(conv_kxk(image))                 frozen block 0
    h_l = r_l + adapter_l(r_l)                  trainable, one unit per output channel
    r_{l+1} = relu(conv_kxk(h_l))               frozen block l+1
    logits = conv_1x1(h_{L-1})                  trainable mask decoder

Each adapter output ``a_l = adapter_l(r_l)`` also feeds a global-local
decomposer: GAP followed by a bias-free linear client classifier ``W_d``
(``U x K``). The branch input is gradient-isolated, so the pretext loss only
ever trains ``W_d``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .errors import ConfigError, ValidationError
from .numerics import Parameter, Tape

ROLES = ("adapter", "decoder", "discriminator", "frozen")


class ParamKey(NamedTuple):
    role: str
    layer: int
    unit: int
    name: str

    def __str__(self) -> str:
        return f"{self.role}/{self.layer}/{self.unit}/{self.name}"

    @classmethod
    def parse(cls, s: str) -> "ParamKey":
        role, layer, unit, name = s.split("/")
        return cls(role, int(layer), int(unit), name)


class ParameterRegistry:
    """Addressable views into a model's parameter arrays.

    Adapter parameters are registered per unit, so a key such as
    ``adapter/2/5/weight`` is a writable view of one output-channel slice.
    Every other parameter is registered whole with ``unit = -1``.
    """

    def __init__(self):
        self._views: dict[ParamKey, np.ndarray] = {}

    def register(self, key: ParamKey, view: np.ndarray) -> None:
        if key.role not in ROLES:
            raise ConfigError(f"unknown role {key.role!r}")
        if key in self._views:
            raise ConfigError(f"duplicate registry key {key}")
        self._views[key] = view

    def keys(self, role: str | None = None) -> list[ParamKey]:
        return [k for k in self._views if role is None or k.role == role]

    def __getitem__(self, key: ParamKey) -> np.ndarray:
        return self._views[key]

    def __contains__(self, key) -> bool:
        return key in self._views

    def __len__(self) -> int:
        return len(self._views)

    def assign(self, key: ParamKey, value: np.ndarray) -> None:
        view = self._views[key]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != view.shape:
            raise ValidationError(f"{key}: shape {value.shape} != {view.shape}")
        view[...] = value

    def snapshot(self, role: str | None = None) -> dict[ParamKey, np.ndarray]:
        return {k: v.copy() for k, v in self._views.items() if role is None or k.role == role}

    def load(self, values: dict[ParamKey, np.ndarray]) -> None:
        for k, v in values.items():
            self.assign(k, v)


class GLD:
    """Client discriminator attached to one adapter layer."""

    def __init__(self, layer_id: int, units: int, num_clients: int):
        self.layer_id = layer_id
        self.weight = Parameter(np.zeros((units, num_clients)), f"gld{layer_id}.weight")

    @property
    def num_clients(self) -> int:
        return self.weight.shape[1]


class AdapterLayer:
    """Residual adapter whose output channels are the aggregation units.

    ``kind == "conv"`` uses a ``k x k`` kernel; ``kind == "fc"`` is a
    per-position dense map (the 1x1-kernel special case, stored as a matrix).
    """

    def __init__(self, layer_id: int, kind: str, channels: int, kernel: int, num_clients: int, rng):
        if channels < 2:
            raise ConfigError("adapter layers need at least 2 units", "model.channels")
        self.layer_id = layer_id
        self.kind = kind
        c = channels
        if kind == "conv":
            shape = (kernel, kernel, c, c)
            fan = kernel * kernel * c
            w = nx.glorot_uniform(rng, shape, fan, fan)
        elif kind == "fc":
            shape = (c, c)
            w = nx.glorot_uniform(rng, shape, c, c)
        else:
            raise ConfigError(f"unknown adapter kind {kind!r}", "model.adapter_kinds")
        self.weight = Parameter(w, f"adapter{layer_id}.weight")
        self.bias = Parameter(np.zeros(c), f"adapter{layer_id}.bias")
        self.gld = GLD(layer_id, c, num_clients)

    @property
    def units(self) -> int:
        return self.bias.shape[0]

    def unit_views(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        return self.weight.value[..., u], self.bias.value[u : u + 1]

    def unit_shapes(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return self.weight.shape[:-1], (1,)

    def apply(self, x, tape: Tape | None):
        if tape is None:
            if self.kind == "conv":
                return nx.conv2d(x, self.weight.value, self.bias.value)
            return nx.linear(x, self.weight.value, self.bias.value)
        if self.kind == "conv":
            return tape.conv2d(x, self.weight, self.bias)
        return tape.linear(x, self.weight, self.bias)


@dataclass
class ForwardResult:
    logits: np.ndarray
    adapter_outputs: list[np.ndarray]


class SurrogateModel:
    def __init__(
        self,
        cfg: ModelConfig,
        num_clients: int,
        num_classes: int,
        image_size: int,
        seed: int,
        in_channels: int = 1,
    ):
        self.cfg = cfg
        self.num_clients = num_clients
        self.num_classes = num_classes
        self.image_size = image_size
        self.in_channels = in_channels
        rng = np.random.default_rng(seed)
        c, kb = cfg.channels, cfg.backbone_kernel

        self.backbone: list[tuple[Parameter, Parameter]] = []
        for layer in range(cfg.num_layers):
            cin = in_channels if layer == 0 else c
            w = nx.glorot_uniform(rng, (kb, kb, cin, c), kb * kb * cin, kb * kb * c)
            self.backbone.append(
                (
                    Parameter(w, f"block{layer}.kernel", trainable=False),
                    Parameter(rng.uniform(-0.25, 0.25, size=c), f"block{layer}.bias", trainable=False),
                )
            )
        kinds = cfg.adapter_kinds
        self.adapters = [
            AdapterLayer(layer, kinds[layer % len(kinds)], c, cfg.adapter_kernel, num_clients, rng)
            for layer in range(cfg.num_layers)
        ]
        self.decoder_weight = Parameter(
            nx.glorot_uniform(rng, (1, 1, c, num_classes), c, num_classes), "decoder.weight"
        )
        self.decoder_bias = Parameter(np.zeros(num_classes), "decoder.bias")
        self.registry = self._build_registry()

    # -- parameter bookkeeping -------------------------------------------

    def _build_registry(self) -> ParameterRegistry:
        reg = ParameterRegistry()
        for layer, (w, b) in enumerate(self.backbone):
            reg.register(ParamKey("frozen", layer, -1, "kernel"), w.value)
            reg.register(ParamKey("frozen", layer, -1, "bias"), b.value)
        for ad in self.adapters:
            for u in range(ad.units):
                wv, bv = ad.unit_views(u)
                reg.register(ParamKey("adapter", ad.layer_id, u, "weight"), wv)
                reg.register(ParamKey("adapter", ad.layer_id, u, "bias"), bv)
            reg.register(ParamKey("discriminator", ad.layer_id, -1, "weight"), ad.gld.weight.value)
        reg.register(ParamKey("decoder", -1, -1, "weight"), self.decoder_weight.value)
        reg.register(ParamKey("decoder", -1, -1, "bias"), self.decoder_bias.value)
        return reg

    def main_parameters(self) -> list[Parameter]:
        """Adapters and decoder: the parameters trained by the segmentation loss."""
        out = []
        for ad in self.adapters:
            out += [ad.weight, ad.bias]
        return out + [self.decoder_weight, self.decoder_bias]

    def discriminator_parameters(self) -> list[Parameter]:
        return [ad.gld.weight for ad in self.adapters]

    def frozen_parameters(self) -> list[Parameter]:
        return [p for pair in self.backbone for p in pair]

    def enumerate_units(self) -> list[tuple[int, int, tuple[tuple[int, ...], tuple[int, ...]]]]:
        """``(layer id, unit id, (weight slice shape, bias shape))`` in stable order."""
        return [(ad.layer_id, u, ad.unit_shapes()) for ad in self.adapters for u in range(ad.units)]

    def unit_vector(self, layer: int, unit: int) -> np.ndarray:
        """Flattened parameter group of one adapter unit (weight slice then bias)."""
        wv, bv = self.adapters[layer].unit_views(unit)
        return np.concatenate([wv.ravel(), bv])

    def set_unit_vector(self, layer: int, unit: int, vec: np.ndarray) -> None:
        wv, bv = self.adapters[layer].unit_views(unit)
        n = wv.size
        if vec.shape != (n + 1,):
            raise ValidationError(f"unit ({layer},{unit}) expects {n + 1} values, got {vec.shape}")
        wv[...] = vec[:n].reshape(wv.shape)
        bv[...] = vec[n:]

    # -- forward ---------------------------------------------------------

    def _check_images(self, images: np.ndarray) -> None:
        expect = (self.image_size, self.image_size, self.in_channels)
        if images.ndim != 4 or images.shape[1:] != expect:
            raise ConfigError(f"expected B x {expect[0]} x {expect[1]} x {expect[2]} images, got {images.shape}")

    def stem(self, images: np.ndarray) -> np.ndarray:
        """Output of frozen block 0; constant for a fixed input, so callers may cache it."""
        self._check_images(images)
        w, b = self.backbone[0]
        return nx.relu(nx.conv2d(images, w.value, b.value))

    def forward(self, images: np.ndarray | None = None, tape: Tape | None = None, stem_out: np.ndarray | None = None) -> ForwardResult:
        if stem_out is None:
            if images is None:
                raise ValidationError("forward needs images or a precomputed stem output")
            images = np.asarray(images, dtype=np.float64)
            squeeze = images.ndim == 3
            r = self.stem(images[None] if squeeze else images)
        else:
            squeeze = False
            r = stem_out
        outputs = []
        for layer, ad in enumerate(self.adapters):
            if layer > 0:
                w, b = self.backbone[layer]
                if tape is None:
                    r = nx.relu(nx.conv2d(h, w.value, b.value))
                else:
                    r = tape.relu(tape.conv2d(h, w, b))
            a = ad.apply(r, tape)
            outputs.append(a)
            h = r + a if tape is None else tape.add(r, a)
        if tape is None:
            logits = nx.conv2d(h, self.decoder_weight.value, self.decoder_bias.value)
        else:
            logits = tape.conv2d(h, self.decoder_weight, self.decoder_bias)
        if squeeze:
            return ForwardResult(logits[0], [a[0] for a in outputs])
        return ForwardResult(logits, outputs)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images).logits

    # -- global-local decomposer branch ------------------------------------

    def gld_forward(self, layer_id: int, f_in: np.ndarray, tape: Tape | None = None):
        """Return ``(probs, f_d)`` for one adapter layer's GLD.

        ``f_in`` is ``H x W x C`` or batched. With a tape, the logits are
        recorded so the discriminator can be trained, while the input side is
        cut (or sign-reversed in ``grl_mode="reverse"``).
        """
        gld = self.adapters[layer_id].gld
        if tape is None:
            f_d = nx.global_average_pool(f_in)
            return nx.softmax(nx.linear(f_d, gld.weight.value)), f_d
        logits, f_d = self._gld_logits(gld, f_in, tape)
        return nx.softmax(logits), f_d

    def _gld_logits(self, gld: GLD, f_in, tape: Tape):
        if self.cfg.grl_mode == "reverse":
            side = tape.grad_reverse(f_in, self.cfg.grl_scale)
        else:
            side = tape.stop_gradient(f_in)
        f_d = tape.global_average_pool(side)
        return tape.linear(f_d, gld.weight), f_d

    def pretext_loss(self, adapter_outputs: list[np.ndarray], client_index: int, tape: Tape | None = None):
        """Mean over layers of the batch-mean client-discrimination cross-entropy.

        Returns ``(loss, probs per layer, pooled features per layer)``; with a
        tape ``loss`` is a differentiable 0-d node.
        """
        if not 0 <= client_index < self.num_clients:
            raise ValidationError(f"client index {client_index} out of range for {self.num_clients} clients")
        if len(adapter_outputs) == 0 or adapter_outputs[0].shape[0] == 0:
            raise ValidationError("pretext loss needs a nonempty batch")
        losses, probs, feats = [], [], []
        for ad, a in zip(self.adapters, adapter_outputs):
            batched = a.ndim == 4
            target = np.full(a.shape[0], client_index) if batched else client_index
            if tape is None:
                f_d = nx.global_average_pool(a)
                loss, p = nx.softmax_cross_entropy(nx.linear(f_d, ad.gld.weight.value), target)
            else:
                logits, f_d = self._gld_logits(ad.gld, a, tape)
                loss, p = tape.softmax_cross_entropy(logits, target)
            losses.append(loss)
            probs.append(p)
            feats.append(f_d)
        total = tape.mean(losses) if tape is not None else float(np.mean(losses))
        return total, probs, feats


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers little-endian):
#   magic  b"FCACKPT\0"  (8 bytes)
#   u32    format version (1)
#   32 B   config hash (raw SHA-256 digest)
#   u32    entry count
#   per entry:  u16 key length, key bytes (utf-8),
#               u8 ndim, ndim x u32 shape, prod(shape) x f64 payload

CKPT_MAGIC = b"FCACKPT\x00"
CKPT_VERSION = 1


def _digest(config_hash: str | bytes) -> bytes:
    if isinstance(config_hash, bytes) and len(config_hash) == 32:
        return config_hash
    if isinstance(config_hash, str) and len(config_hash) == 64:
        return bytes.fromhex(config_hash)
    return hashlib.sha256(config_hash if isinstance(config_hash, bytes) else config_hash.encode()).digest()


def save_checkpoint(path: str | Path, registry: ParameterRegistry, config_hash: str | bytes) -> None:
    keys = registry.keys()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _digest(config_hash), struct.pack("<I", len(keys))]
    for key in keys:
        arr = registry[key]
        kb = str(key).encode("utf-8")
        parts.append(struct.pack("<H", len(kb)) + kb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[str, dict[ParamKey, np.ndarray]]:
    """Return ``(config hash hex, {key: array})``."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValidationError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    digest = buf[12:44].hex()
    (count,) = struct.unpack_from("<I", buf, 44)
    pos = 48
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        key = ParamKey.parse(buf[pos : pos + klen].decode("utf-8"))
        pos += klen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[key] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return digest, out
