"""Dataset container, synthetic data, normalization stats, and augmentation.

The on-disk container is a single little-endian binary file:

    magic "MGDS" | version u32 = 1 | N u32 | H u32 | W u32 | C u32 |
    class_count u32 | N*C*H*W image bytes (sample-major, channel-major) |
    N labels u16

Augmentation is random-resized-crop + horizontal flip, with bilinear
interpolation at half-pixel centers computed in f64 so results are
bit-reproducible. Every random decision comes from a stream keyed by
(seed, epoch, sample index), which makes results independent of batch
order and worker count.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple, Optional, Tuple

import numpy as np

from . import rng as rng_mod
from .errors import ConfigError, DataError

MAGIC = b"MGDS"
VERSION = 1
ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
STD_FLOOR = 1e-6


@dataclass
class DatasetContainer:
    images: np.ndarray  # N x C x H x W, uint8
    labels: np.ndarray  # N, uint16
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.images.ndim != 4:
            raise DataError(f"images must be N x C x H x W, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"label count {self.labels.shape} does not match "
                            f"{self.images.shape[0]} images")
        if self.class_count < 1 or np.any(self.labels >= self.class_count):
            raise DataError(f"labels must be < class_count ({self.class_count})")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    def write(self, path) -> None:
        n, c, h, w = self.images.shape
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<6I", VERSION, n, h, w, c, self.class_count))
            f.write(np.ascontiguousarray(self.images).tobytes())
            f.write(self.labels.astype("<u2").tobytes())

    @classmethod
    def read(cls, path) -> "DatasetContainer":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != MAGIC:
            raise DataError(f"{path}: bad magic {blob[:4]!r}")
        version, n, h, w, c, class_count = struct.unpack_from("<6I", blob, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        want = 28 + n * c * h * w + 2 * n
        if len(blob) != want:
            raise DataError(f"{path}: payload is {len(blob)} bytes, expected {want}")
        images = np.frombuffer(blob, dtype=np.uint8, count=n * c * h * w,
                               offset=28).reshape(n, c, h, w)
        labels = np.frombuffer(blob, dtype="<u2", count=n, offset=28 + n * c * h * w)
        return cls(images=images.copy(), labels=labels.astype(np.uint16),
                   class_count=class_count)


@dataclass(frozen=True)
class AugmentConfig:
    output_size: int
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    crop_scale_min: float = 0.08
    crop_scale_max: float = 1.0
    hflip_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ConfigError(
                f"crop scale range ({self.crop_scale_min}, {self.crop_scale_max}) invalid")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if len(self.mean) != len(self.std):
            raise ConfigError("mean and std must have one entry per channel")


def _class_palette(class_count: int) -> np.ndarray:
    """Well-separated base colors, one RGB row per class."""
    hues = np.arange(class_count, dtype=np.float64) / class_count
    r = 0.5 + 0.45 * np.cos(2 * np.pi * hues)
    g = 0.5 + 0.45 * np.cos(2 * np.pi * (hues + 1.0 / 3.0))
    b = 0.5 + 0.45 * np.cos(2 * np.pi * (hues + 2.0 / 3.0))
    return np.stack([r, g, b], axis=1)


def generate_synthetic(class_count: int, per_class: int, image_size: int,
                       seed: int, noise: float = 0.06) -> DatasetContainer:
    """Procedural dataset: each class is a base color plus a class-specific
    oriented sine texture, with Gaussian pixel noise on top."""
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if class_count < 1:
        raise ConfigError(f"class_count must be >= 1, got {class_count}")
    gen = rng_mod.stream(seed, rng_mod.SYNTH)
    palette = _class_palette(class_count)
    ys, xs = np.meshgrid(np.arange(image_size, dtype=np.float64),
                         np.arange(image_size, dtype=np.float64), indexing="ij")
    n = class_count * per_class
    images = np.zeros((n, 3, image_size, image_size), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.uint16)
    amp = 0.18
    for c in range(class_count):
        freq = 1.0 + 2.0 * c
        theta = np.pi * c / max(class_count, 1)
        wave_coord = (xs * np.cos(theta) + ys * np.sin(theta)) / image_size
        for k in range(per_class):
            i = c * per_class + k
            phase = gen.uniform(0.0, 2.0 * np.pi)
            pattern = amp * np.sin(2.0 * np.pi * freq * wave_coord + phase)
            pix = palette[c][:, None, None] + pattern[None]
            if noise > 0:
                pix = pix + gen.normal(0.0, noise, size=pix.shape)
            images[i] = np.clip(np.floor(pix * 255.0 + 0.5), 0, 255).astype(np.uint8)
            labels[i] = c
    return DatasetContainer(images=images, labels=labels, class_count=class_count)


def compute_norm_stats(ds: DatasetContainer) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel population mean/std of the [0, 1]-scaled pixels, f64."""
    if ds.n < 1:
        raise DataError("empty dataset")
    scaled = ds.images.astype(np.float64) / 255.0
    mean = scaled.mean(axis=(0, 2, 3))
    std = np.maximum(scaled.std(axis=(0, 2, 3)), STD_FLOOR)
    return mean, std


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping, f64.

    Same-size resizes are exact identities (weights collapse to 0/1).
    """
    c, h, w = img.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y_f = np.floor(ys)
    x_f = np.floor(xs)
    wy = ys - y_f
    wx = xs - x_f
    y0 = np.clip(y_f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y_f.astype(np.int64) + 1, 0, h - 1)
    x0 = np.clip(x_f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x_f.astype(np.int64) + 1, 0, w - 1)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy[None, :, None]) + bot * wy[None, :, None]


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, :, ::-1])


def _sample_crop(rng: np.random.Generator, h: int, w: int,
                 cfg: AugmentConfig) -> Tuple[int, int, int, int]:
    area = float(h * w)
    log_lo, log_hi = math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])
    for _ in range(10):
        target_area = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)  # documented fallback: center crop
    return (h - side) // 2, (w - side) // 2, side, side


def augment(image: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Random resized crop + horizontal flip + normalization, C x S x S f64."""
    img = image.astype(np.float64) / 255.0
    _, h, w = img.shape
    top, left, ch, cw = _sample_crop(rng, h, w, cfg)
    crop = img[:, top:top + ch, left:left + cw]
    out = resize_bilinear(crop, cfg.output_size, cfg.output_size)
    if rng.random() < cfg.hflip_prob:
        out = hflip(out)
    return normalize(out, cfg.mean, cfg.std)


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)[:, None, None]
    std = np.asarray(std, dtype=np.float64)[:, None, None]
    return (img - mean) / std


def eval_transform(image: np.ndarray, output_size: int, mean, std) -> np.ndarray:
    """Deterministic evaluation path: resize + normalize only."""
    img = image.astype(np.float64) / 255.0
    if img.shape[1] != output_size or img.shape[2] != output_size:
        img = resize_bilinear(img, output_size, output_size)
    return normalize(img, mean, std)


class Batch(NamedTuple):
    images: np.ndarray   # B x C x S x S, f64
    labels: np.ndarray   # B, int64
    indices: np.ndarray  # B, int64 (positions in the container)


def batch_iter(ds: DatasetContainer, batch_size: int, seed: int, epoch: int,
               drop_last: bool = True,
               transform: Optional[Callable[[np.ndarray, int], np.ndarray]] = None,
               ) -> Iterator[Batch]:
    """Epoch-shuffled minibatches; order depends only on (seed, epoch).

    ``transform(image_u8, sample_index)`` maps each sample to its f64 tensor;
    by default images are just scaled to [0, 1].
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if batch_size > ds.n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {ds.n}")
    order = rng_mod.stream(seed, rng_mod.SHUFFLE, epoch).permutation(ds.n)
    stop = ds.n - (ds.n % batch_size) if drop_last else ds.n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        if transform is None:
            images = ds.images[idx].astype(np.float64) / 255.0
        else:
            images = np.stack([transform(ds.images[i], int(i)) for i in idx])
        yield Batch(images=images, labels=ds.labels[idx].astype(np.int64),
                    indices=idx.astype(np.int64))


def split_indices(n: int, holdout_fraction: float, seed: int
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, holdout) index split for the online probe."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {holdout_fraction}")
    order = rng_mod.stream(seed, rng_mod.SPLIT).permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n)))
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])
