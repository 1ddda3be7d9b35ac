"""Feature visualization: leading-component heatmaps of per-patch key vectors
and class-token attention maps, written as plain-text matrices plus PGM
renderings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import tensor as T
from .data import resize_bilinear
from .errors import ConfigError, ContractError
from .vit import VitMaeModel, encode

POWER_TOL = 1e-9
POWER_MAX_ITERS = 1000


@dataclass
class PowerResult:
    eigenvalue: float
    vector: np.ndarray
    residual: float
    converged: bool
    iterations: int


def power_iteration(mat: np.ndarray, tol: float = POWER_TOL,
                    max_iters: int = POWER_MAX_ITERS) -> PowerResult:
    """Dominant eigenpair of a symmetric matrix.

    The start vector comes from a fixed internal stream, and the returned
    vector's largest-magnitude component is made positive, so results are
    byte-stable across runs. Non-convergence is reported, not raised.
    """
    d = mat.shape[0]
    if mat.shape != (d, d):
        raise ContractError(f"power iteration needs a square matrix, got {mat.shape}")
    v = np.random.default_rng(np.random.SeedSequence((d, 0x9e3779b9))).standard_normal(d)
    v /= np.linalg.norm(v)
    eigenvalue = 0.0
    residual = float("inf")
    for it in range(1, max_iters + 1):
        w = mat @ v
        eigenvalue = float(v @ w)
        residual = float(np.linalg.norm(w - eigenvalue * v))
        if residual <= tol * max(abs(eigenvalue), 1e-30):
            v = _canonical_sign(v)
            return PowerResult(eigenvalue, v, residual, True, it)
        norm = np.linalg.norm(w)
        if norm == 0.0:  # zero matrix: any unit vector is an eigenvector
            return PowerResult(0.0, _canonical_sign(v), 0.0, True, it)
        v = w / norm
    return PowerResult(eigenvalue, _canonical_sign(v), residual, False, max_iters)


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    pivot = int(np.argmax(np.abs(v)))
    return -v if v[pivot] < 0 else v


def pca_layer_maps(model: VitMaeModel, images: np.ndarray
                   ) -> Tuple[Dict[int, np.ndarray], Dict[int, PowerResult]]:
    """Leading-component heatmaps of each layer's per-patch key vectors.

    Keys are collected across the whole image set and centered; each patch's
    projection onto the leading component is reshaped to the patch grid and
    bilinearly upsampled to image resolution. Returns per-layer stacks of
    N x image_size x image_size maps plus the power-iteration diagnostics.
    """
    cfg = model.cfg
    n = images.shape[0]
    with T.no_grad():
        out = encode(images, None, model, record_attention=True)
    maps: Dict[int, np.ndarray] = {}
    diags: Dict[int, PowerResult] = {}
    n_cls = 1 if cfg.use_class_token else 0
    for layer, keys in out.keys.items():
        patch_keys = keys[:, n_cls:, :].reshape(n * cfg.num_patches, cfg.enc_dim)
        centered = patch_keys - patch_keys.mean(axis=0)
        cov = centered.T @ centered / centered.shape[0]
        result = power_iteration(cov)
        diags[layer] = result
        proj = (centered @ result.vector).reshape(n, cfg.grid, cfg.grid)
        upsampled = np.stack([
            resize_bilinear(grid[None], cfg.image_size, cfg.image_size)[0]
            for grid in proj])
        maps[layer] = upsampled
    return maps, diags


def attention_maps(model: VitMaeModel, image: np.ndarray) -> np.ndarray:
    """Class-token attention over patches, last block, one map per head."""
    cfg = model.cfg
    if not cfg.use_class_token:
        raise ConfigError("attention maps need the class token enabled")
    if image.ndim != 3:
        raise ContractError(f"expected a single C x H x W image, got {image.shape}")
    with T.no_grad():
        out = encode(image[None], None, model, record_attention=True)
    attn = out.attention[cfg.enc_depth]  # 1 x H x T x T
    cls_row = attn[0, :, 0, 1:]          # attention from class token to patches
    return cls_row.reshape(cfg.enc_heads, cfg.grid, cfg.grid)


def write_matrix(path, mat: np.ndarray) -> None:
    """Plain text: one "rows cols" header line, then rows of f64 values."""
    mat = np.asarray(mat, dtype=np.float64)
    with open(path, "w") as f:
        f.write(f"{mat.shape[0]} {mat.shape[1]}\n")
        for row in mat:
            f.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def read_matrix(path) -> np.ndarray:
    with open(path) as f:
        rows, cols = map(int, f.readline().split())
        out = np.array([[float(x) for x in f.readline().split()] for _ in range(rows)])
    if out.shape != (rows, cols):
        raise ContractError(f"{path}: matrix body does not match header")
    return out


def write_pgm(path, mat: np.ndarray) -> None:
    """8-bit grayscale rendering, min-max scaled; constant maps render black."""
    mat = np.asarray(mat, dtype=np.float64)
    lo, hi = float(mat.min()), float(mat.max())
    if hi > lo:
        scaled = (mat - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(mat)
    pixels = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{mat.shape[1]} {mat.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
