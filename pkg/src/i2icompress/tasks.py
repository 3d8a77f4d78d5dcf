"""Procedural paired data for two toy image-to-image tasks, plus PSNR.

* ``restore``: the condition is a 4x box-downsampled, nearest-upsampled and
  noised copy of the target.
* ``structgen``: the condition is a binary Sobel edge map of the target.

Scenes are a linear background gradient plus axis-aligned rectangles and
filled discs drawn from a fixed 8-colour palette, without anti-aliasing.
Images are generated in [0, 1]; :func:`to_model` maps them to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import stream

RESTORE = "restore"
STRUCTGEN = "structgen"
TASKS = (RESTORE, STRUCTGEN)

PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],
        [1.0, 1.0, 1.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
    ]
)
LUMA = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 99.0
VALIDATION_OFFSET = 1_000_000


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    image_size: int = 32
    channels: int = 3
    min_shapes: int = 3
    max_shapes: int = 6


def gradient_background(size: int, c0: np.ndarray, c1: np.ndarray, angle: float) -> np.ndarray:
    """Linear blend from ``c0`` to ``c1`` along direction ``angle``; returns (3, S, S)."""
    centers = (np.arange(size) + 0.5) / size - 0.5
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx * ca + yy * sa) / (abs(ca) + abs(sa)) + 0.5
    return c0[:, None, None] + (c1 - c0)[:, None, None] * u[None]


def gen_scene(spec: SceneSpec, num_shapes: int | None = None) -> np.ndarray:
    """Render one scene as (channels, S, S) in [0, 1]."""
    rng = stream(spec.seed, "scene")
    s = spec.image_size
    c0, c1 = rng.random(3), rng.random(3)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    img = gradient_background(s, c0, c1, angle)
    count = rng.integers(spec.min_shapes, spec.max_shapes + 1) if num_shapes is None else num_shapes
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(count):
        color = PALETTE[rng.integers(len(PALETTE))]
        if rng.random() < 0.5:
            w, h = rng.integers(max(1, s // 8), s // 2 + 1, size=2)
            x0, y0 = rng.integers(0, s - w + 1), rng.integers(0, s - h + 1)
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        else:
            r = rng.uniform(max(1.0, s / 16), s / 4)
            cx, cy = rng.uniform(0, s, size=2)
            mask = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
        img[:, mask] = color[:, None]
    if spec.channels == 1:
        img = np.tensordot(LUMA, img, axes=1)[None]
    elif spec.channels != 3:
        raise ValueError(f"channels must be 1 or 3, got {spec.channels}")
    return np.clip(img, 0.0, 1.0)


def box_down_up(x0: np.ndarray, factor: int = 4) -> np.ndarray:
    c, h, w = x0.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by {factor}")
    small = x0.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return small.repeat(factor, axis=1).repeat(factor, axis=2)


def degrade_restore(x0: np.ndarray, seed: int, sigma: float = 0.05, factor: int = 4) -> np.ndarray:
    out = box_down_up(x0, factor)
    if sigma > 0:
        out = out + sigma * stream(seed, "degrade").standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


def luminance(x0: np.ndarray) -> np.ndarray:
    return x0[0] if x0.shape[0] == 1 else np.tensordot(LUMA, x0, axes=1)


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel_magnitude(lum: np.ndarray) -> np.ndarray:
    """Unnormalised Sobel gradient magnitude with edge-replicated borders."""
    p = np.pad(lum, 1, mode="edge")
    h, w = lum.shape
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    for i in range(3):
        for j in range(3):
            win = p[i : i + h, j : j + w]
            gx += SOBEL_X[i, j] * win
            gy += SOBEL_X[j, i] * win
    return np.sqrt(gx * gx + gy * gy)


def edge_condition(x0: np.ndarray, threshold: float = 0.25) -> np.ndarray:
    """Binary single-channel edge map (1, S, S)."""
    return (sobel_magnitude(luminance(x0)) > threshold).astype(np.float64)[None]


@dataclass
class TaskPair:
    cond: np.ndarray
    target: np.ndarray
    task: str
    seed: int


def make_pair(task: str, seed: int, image_size: int = 32, channels: int = 3) -> TaskPair:
    x0 = gen_scene(SceneSpec(seed, image_size, channels))
    if task == RESTORE:
        cond = degrade_restore(x0, seed)
    elif task == STRUCTGEN:
        cond = edge_condition(x0)
    else:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return TaskPair(cond, x0, task, seed)


def cond_channels(task: str, channels: int) -> int:
    return channels if task == RESTORE else 1


def to_model(img: np.ndarray) -> np.ndarray:
    return img * 2.0 - 1.0


def to_unit(img: np.ndarray) -> np.ndarray:
    return np.clip((img + 1.0) * 0.5, 0.0, 1.0)


def make_batch(task: str, seeds: Sequence[int], image_size: int, channels: int,
               dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (cond, target) in model space [-1, 1]."""
    pairs = [make_pair(task, int(s), image_size, channels) for s in seeds]
    cond = np.stack([to_model(p.cond) for p in pairs]).astype(dtype)
    target = np.stack([to_model(p.target) for p in pairs]).astype(dtype)
    return cond, target


def train_seeds(count: int) -> range:
    return range(count)


def validation_seeds(count: int) -> range:
    return range(VALIDATION_OFFSET, VALIDATION_OFFSET + count)


# ------------------------------------------------------------------- metrics


@dataclass
class QualityResult:
    mse: np.ndarray
    psnr: np.ndarray
    mean_psnr: float = field(init=False)
    std_psnr: float = field(init=False)
    mean_mse: float = field(init=False)

    def __post_init__(self) -> None:
        self.mean_psnr = float(np.mean(self.psnr))
        self.std_psnr = float(np.std(self.psnr))
        self.mean_mse = float(np.mean(self.mse))


def mse_to_psnr(mse) -> np.ndarray:
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(1.0 / mse)
    return np.minimum(out, PSNR_CAP)


def psnr(a: np.ndarray, b: np.ndarray) -> QualityResult:
    """Per-image MSE/PSNR for batches in [0, 1] (leading axis = image)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2:
        a, b = a[None], b[None]
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    return QualityResult(mse, mse_to_psnr(mse))


def batch_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared error over all pixels of two model-space batches, measured in [0, 1]."""
    return float(np.mean((to_unit(a).astype(np.float64) - to_unit(b).astype(np.float64)) ** 2))
