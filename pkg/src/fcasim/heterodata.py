"""Synthetic multi-class shape segmentation split into heterogeneous clients.

Each image holds one to three non-overlapping shapes on a noisy background.
Every class is a distinct shape type drawn at its own intensity; the first
(largest) shape is the sample's primary class, which drives the Dirichlet
label-skew partition. Client-specific transforms then shift the image
distribution while the masks stay untouched.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "ring", "diamond", "cross")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class Shape:
    cls: int
    cx: float
    cy: float
    r: float


def inside(kind: str, x: np.ndarray, y: np.ndarray, s: Shape) -> np.ndarray:
    """Point-in-shape test at pixel coordinates (pixel ``i`` spans ``[i, i+1)``)."""
    dx, dy = x - s.cx, y - s.cy
    if kind == "disk":
        return dx * dx + dy * dy <= s.r * s.r
    if kind == "square":
        a = s.r * 0.8862269254527580  # same area as the disk: side = r * sqrt(pi)
        return (np.abs(dx) <= a) & (np.abs(dy) <= a)
    if kind == "triangle":
        # upward isosceles triangle with base 2r at y = cy + r/2, apex at y = cy - r
        top, base = s.cy - s.r, s.cy + 0.5 * s.r
        half = s.r * (y - top) / (base - top)
        return (y >= top) & (y <= base) & (np.abs(dx) <= half)
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= s.r * s.r) & (d2 >= (0.5 * s.r) ** 2)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= s.r
    if kind == "cross":
        w = 0.35 * s.r
        return ((np.abs(dx) <= s.r) & (np.abs(dy) <= w)) | ((np.abs(dy) <= s.r) & (np.abs(dx) <= w))
    raise ValidationError(f"unknown shape {kind!r}")


def shape_area(kind: str, r: float) -> float:
    """Analytic interior area, used to sanity-check rasterization."""
    return {
        "disk": np.pi * r * r,
        "square": np.pi * r * r,
        "triangle": 1.5 * r * r,
        "ring": 0.75 * np.pi * r * r,
        "diamond": 2.0 * r * r,
        "cross": 2 * (2 * r) * (0.7 * r) - (0.7 * r) ** 2,
    }[kind]


def class_intensity(c: int, num_classes: int) -> float:
    return 0.45 + 0.5 * c / (num_classes - 1)


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x 1 in [0, 1]
    masks: np.ndarray  # N x H x W x C in {0, 1}
    labels: np.ndarray  # N primary classes
    shapes: list[list[Shape]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return self.masks.shape[-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        shapes = [self.shapes[i] for i in idx] if self.shapes else []
        return Dataset(self.images[idx], self.masks[idx], self.labels[idx], shapes)


def rasterize(kind: str, s: Shape, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(coverage in [0,1], binary mask at pixel centres)`` for one shape."""
    centres = np.arange(size) + 0.5
    yc, xc = np.meshgrid(centres, centres, indexing="ij")
    mask = inside(kind, xc, yc, s)
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    fine = (np.arange(size)[:, None] + sub[None, :]).ravel()
    yf, xf = np.meshgrid(fine, fine, indexing="ij")
    cov = inside(kind, xf, yf, s).reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    return cov, mask


def generate_task(seed: int, n_samples: int, image_size: int = 32, num_classes: int = 4) -> Dataset:
    if num_classes < 2 or num_classes > len(SHAPES):
        raise ValidationError(f"num_classes must be in [2, {len(SHAPES)}]")
    if image_size < 16:
        raise ValidationError("image_size must be >= 16")
    rng = np.random.default_rng(seed)
    n, h = n_samples, image_size
    images = np.empty((n, h, h, 1))
    masks = np.zeros((n, h, h, num_classes), dtype=np.float64)
    labels = rng.integers(0, num_classes, size=n)
    all_shapes: list[list[Shape]] = []
    for i in range(n):
        n_shapes = 1 + int(rng.integers(0, 3))
        classes = [int(labels[i])] + [int(c) for c in rng.integers(0, num_classes, size=n_shapes - 1)]
        placed: list[Shape] = []
        for j, c in enumerate(classes):
            lo, hi = (0.16, 0.24) if j == 0 else (0.09, 0.15)
            for _ in range(30):
                r = float(rng.uniform(lo, hi) * h)
                cx, cy = (float(v) for v in rng.uniform(r + 1.0, h - r - 1.0, size=2))
                if all((cx - p.cx) ** 2 + (cy - p.cy) ** 2 > (r + p.r + 1.0) ** 2 for p in placed):
                    placed.append(Shape(c, cx, cy, r))
                    break
        img = np.clip(rng.normal(0.15, 0.06, size=(h, h)), 0.0, 1.0)
        for s in placed:
            cov, m = rasterize(SHAPES[s.cls], s, h)
            img = img * (1.0 - cov) + class_intensity(s.cls, num_classes) * cov
            masks[i, :, :, s.cls] = np.maximum(masks[i, :, :, s.cls], m)
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
        all_shapes.append(placed)
    return Dataset(images, masks, labels, all_shapes)


# --------------------------------------------------------------------------
# Partitioning


@dataclass
class PartitionPlan:
    indices: list[np.ndarray]
    proportions: dict[int, np.ndarray]
    alpha: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.indices)


def largest_remainder(n: int, p: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``n`` that best match ``n * p`` (ties to the lower index)."""
    raw = n * np.asarray(p, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels: np.ndarray, num_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Split sample indices by per-class ``Dirichlet(alpha * 1_K)`` proportions.

    For each class in ascending order the generator first draws the
    proportion vector, then permutes that class's indices; counts come from
    largest-remainder rounding.
    """
    if num_clients < 1:
        raise ValidationError("num_clients must be >= 1")
    if not alpha > 0:
        raise ValidationError("alpha must be > 0")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    props: dict[int, np.ndarray] = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        p = rng.dirichlet(np.full(num_clients, alpha))
        props[int(c)] = p
        idx = rng.permutation(idx)
        bounds = np.concatenate([[0], np.cumsum(largest_remainder(len(idx), p))])
        for k in range(num_clients):
            buckets[k].append(idx[bounds[k] : bounds[k + 1]])
    indices = [np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64) for b in buckets]
    for k, ix in enumerate(indices):
        if len(ix) == 0:
            log.warning("client %d received no samples (alpha=%g, seed=%d)", k, alpha, seed)
    return PartitionPlan(indices, props, float(alpha), int(seed))


def train_eval_split(indices: np.ndarray, eval_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(indices)
    n_eval = int(round(eval_fraction * len(perm)))
    if len(perm) >= 2:
        n_eval = min(max(n_eval, 1), len(perm) - 1)
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


# --------------------------------------------------------------------------
# Transforms


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"


def mean_blur_3x3(img: np.ndarray) -> np.ndarray:
    """3x3 box filter over the two leading spatial axes with edge replication."""
    h, w = img.shape[:2]
    pad = [(1, 1), (1, 1)] + [(0, 0)] * (img.ndim - 2)
    p = np.pad(img, pad, mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy : dy + h, dx : dx + w]
    return acc / 9.0


def half_downsample_restore(img: np.ndarray) -> np.ndarray:
    """2x2 area downsample then nearest-neighbour upsample back to the input size."""
    h, w = img.shape[:2]
    ph, pw = h % 2, w % 2
    if ph or pw:
        img_p = np.pad(img, [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2), mode="edge")
    else:
        img_p = img
    H, W = img_p.shape[:2]
    small = img_p.reshape(H // 2, 2, W // 2, 2, *img.shape[2:]).mean(axis=(1, 3))
    up = np.repeat(np.repeat(small, 2, axis=0), 2, axis=1)
    return up[:h, :w]


def apply_transform(image: np.ndarray, spec: TransformSpec | str) -> np.ndarray:
    kind = spec.kind if isinstance(spec, TransformSpec) else spec
    if kind == "identity":
        return image.copy()
    if kind == "mean_blur_3x3":
        out = mean_blur_3x3(image)
    elif kind == "half_downsample_restore":
        out = half_downsample_restore(image)
    else:
        raise ValidationError(f"unknown transform {kind!r}")
    return np.clip(out, 0.0, 1.0)


def transform_images(images: np.ndarray, spec: TransformSpec | str) -> np.ndarray:
    """Apply a transform to every image of an ``N x H x W x C`` stack."""
    return np.stack([apply_transform(im, spec) for im in images]) if len(images) else images.copy()


# --------------------------------------------------------------------------
# Container format
#
#   magic b"FCADATA\0", u32 version (1), u32 N, u32 H, u32 W, u32 num_classes
#   per sample: u8 label, u8 shape count, per shape (u8 class, 3 x f64 cx cy r),
#               H*W f64 image, H*W*num_classes u8 mask

DATA_MAGIC = b"FCADATA\x00"


def save_dataset(path: str | Path, ds: Dataset) -> None:
    n, h, w, _ = ds.images.shape
    c = ds.num_classes
    parts = [DATA_MAGIC, struct.pack("<5I", 1, n, h, w, c)]
    for i in range(n):
        shapes = ds.shapes[i] if ds.shapes else []
        parts.append(struct.pack("<BB", int(ds.labels[i]), len(shapes)))
        for s in shapes:
            parts.append(struct.pack("<B3d", s.cls, s.cx, s.cy, s.r))
        parts.append(np.ascontiguousarray(ds.images[i, :, :, 0], dtype="<f8").tobytes())
        parts.append(ds.masks[i].astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path: str | Path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != DATA_MAGIC:
        raise ValidationError(f"{path} is not a dataset container")
    version, n, h, w, c = struct.unpack_from("<5I", buf, 8)
    if version != 1:
        raise ValidationError(f"unsupported dataset version {version}")
    pos = 28
    images = np.empty((n, h, w, 1))
    masks = np.empty((n, h, w, c))
    labels = np.empty(n, dtype=np.int64)
    shapes = []
    for i in range(n):
        labels[i], ns = struct.unpack_from("<BB", buf, pos)
        pos += 2
        row = []
        for _ in range(ns):
            cls, cx, cy, r = struct.unpack_from("<B3d", buf, pos)
            pos += struct.calcsize("<B3d")
            row.append(Shape(cls, cx, cy, r))
        shapes.append(row)
        images[i, :, :, 0] = np.frombuffer(buf, "<f8", h * w, pos).reshape(h, w)
        pos += 8 * h * w
        masks[i] = np.frombuffer(buf, np.uint8, h * w * c, pos).reshape(h, w, c)
        pos += h * w * c
    return Dataset(images, masks, labels, shapes)
