"""Batch-wide, layer-wise manifold regularization.

Per-sample pooled representations from a reference layer define an RBF
affinity over the batch; its graph Laplacian then penalizes pairs that are
similar under the reference layer but spread apart in the target layer.
Two equivalent formulations are provided: the explicit double sum over
sample pairs and the trace form Tr(Z' L Z) used in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError
from .tensor import Tensor

LAPLACIAN_MODES = ("unnormalized", "symmetric_normalized", "normalized_adjacency")
KERNEL_GRAD_MODES = ("flow", "detach")
PAIR_MODES = ("single_directed_pair", "all_ordered_pairs")


@dataclass
class PooledLayer:
    """Per-sample pooled representations of one encoder layer (rows = batch order)."""

    layer_index: int
    values: Tensor  # B x D

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionError(f"pooled layer must be B x D, got {self.values.shape}")

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]


@dataclass
class KernelMatrix:
    """Symmetric similarity matrix with unit diagonal, plus the bandwidth used.

    Entries are exp(-d2 / 2 sigma), so mathematically in (0, 1]; exact zeros
    can still appear in f64 when the exponent underflows (e.g. a collapsed
    batch forces the bandwidth onto its floor), and validation accepts them.
    """

    weights: Tensor  # B x B
    sigma: float

    def validate(self) -> None:
        w = self.weights.data
        if not np.allclose(w, w.T, rtol=0, atol=1e-12):
            raise ContractError("kernel matrix is not symmetric")
        if not np.all(np.diag(w) == 1.0):
            raise ContractError("kernel diagonal must be exactly 1")
        if not (np.all(w >= 0.0) and np.all(w <= 1.0)):
            raise ContractError("kernel entries must lie in [0, 1]")


@dataclass(frozen=True)
class RegConfig:
    """Regularizer knobs: which layer pair, which Laplacian, how gradients flow.

    ``sigma_override`` pins the bandwidth to a constant; by default it adapts
    to the batch via the variance of pairwise squared distances.
    """

    ref_layer: int
    target_layer: int
    laplacian_mode: str = "symmetric_normalized"
    kernel_grad: str = "flow"
    pair_mode: str = "single_directed_pair"
    sigma_floor: float = 1e-8
    sigma_override: Optional[float] = None

    def __post_init__(self):
        if self.ref_layer == self.target_layer:
            raise ConfigError(
                f"reference and target layer must differ, both are {self.ref_layer}")
        if self.ref_layer < 1 or self.target_layer < 1:
            raise ConfigError("layer indices are 1-based and must be >= 1")
        if self.laplacian_mode not in LAPLACIAN_MODES:
            raise ConfigError(f"unknown laplacian_mode {self.laplacian_mode!r}")
        if self.kernel_grad not in KERNEL_GRAD_MODES:
            raise ConfigError(f"unknown kernel_grad {self.kernel_grad!r}")
        if self.pair_mode not in PAIR_MODES:
            raise ConfigError(f"unknown pair_mode {self.pair_mode!r}")
        if self.sigma_floor <= 0:
            raise ConfigError(f"sigma_floor must be positive, got {self.sigma_floor}")


def pool_patches(tokens: Tensor, exclude_class_token: bool) -> Tensor:
    """Mean over the token axis: B x P x D -> B x D.

    The mean (rather than the sum) keeps the pooled scale independent of the
    patch count, so the adaptive bandwidth behaves the same across grids.
    """
    if tokens.ndim != 3:
        raise DimensionError(f"pool_patches expects B x P x D, got {tokens.shape}")
    if exclude_class_token:
        if tokens.shape[1] < 2:
            raise DegenerateInputError("no patch tokens left after class-token exclusion")
        tokens = T.narrow(tokens, 1, 1, tokens.shape[1] - 1)
    if tokens.shape[1] == 0:
        raise DegenerateInputError("cannot pool zero tokens")
    return T.mean(tokens, axes=1)


def pairwise_sq_dists(z: Tensor) -> Tensor:
    """All-pairs squared Euclidean distances of the rows of a B x D matrix.

    Computed from explicit row differences, never the expanded dot-product
    form, so entries are exactly symmetric, nonnegative, and zero on the
    diagonal.
    """
    if z.ndim != 2:
        raise DimensionError(f"pairwise_sq_dists expects B x D, got {z.shape}")
    if z.shape[0] < 2:
        raise ContractError(f"need at least 2 rows, got {z.shape[0]}")
    zd = z.data
    diff = zd[:, None, :] - zd[None, :, :]
    d2 = np.einsum("ijd,ijd->ij", diff, diff)

    def rule(g):
        rows = g.sum(axis=1)
        cols = g.sum(axis=0)
        gz = 2.0 * ((rows + cols)[:, None] * zd - (g + g.T) @ zd)
        return (gz,)

    return T._record("pairwise_sq_dists", d2, (z,), rule)


def adaptive_sigma(d2, sigma_floor: float = 1e-8) -> float:
    """Bandwidth from the spread of the batch: sqrt of the population variance
    of the off-diagonal squared distances, floored for collapsed batches.

    The result is a plain float, i.e. a constant with respect to the tape.
    """
    arr = d2.data if isinstance(d2, Tensor) else np.asarray(d2, dtype=np.float64)
    b = arr.shape[0]
    off = arr[~np.eye(b, dtype=bool)]
    var = float(np.mean((off - off.mean()) ** 2))
    return float(np.sqrt(max(var, sigma_floor)))


def rbf_kernel(d2: Tensor, sigma: float) -> KernelMatrix:
    """W_ij = exp(-d2_ij / (2 sigma)); the bandwidth enters linearly, unsquared."""
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    w = T.exp(T.scale(d2, -1.0 / (2.0 * sigma)))
    kernel = KernelMatrix(weights=w, sigma=float(sigma))
    if T.debug_checks_enabled():
        kernel.validate()
    return kernel


def laplacian(kernel: KernelMatrix, mode: str) -> Tensor:
    """Graph Laplacian of the similarity matrix.

    unnormalized          D - W
    symmetric_normalized  I - D^{-1/2} W D^{-1/2}
    normalized_adjacency  D^{-1/2} W D^{-1/2} (no identity term; not PSD, and
                          nonzero even on identical rows -- kept for
                          comparison experiments only)
    """
    w = kernel.weights
    b = w.shape[0]
    degrees = T.sum_(w, axes=1)
    # W_ii = 1 guarantees degrees >= 1, so the inverse sqrt is always defined
    assert np.all(degrees.data >= 1.0 - 1e-12), "degree row below 1 is impossible"
    if mode == "unnormalized":
        return T.sub(T.diag_embed(degrees), w)
    s = T.pow_const(degrees, -0.5)
    outer = T.matmul(T.reshape(s, (b, 1)), T.reshape(s, (1, b)))
    adjacency = T.mul(w, outer)
    if mode == "normalized_adjacency":
        return adjacency
    if mode == "symmetric_normalized":
        return T.sub(T.eye(b), adjacency)
    raise ConfigError(f"unknown laplacian_mode {mode!r}")


def _reference_kernel(z_ref: PooledLayer, cfg: RegConfig) -> KernelMatrix:
    values = z_ref.values
    if cfg.kernel_grad == "detach":
        values = values.detach()
    d2 = pairwise_sq_dists(values)
    sigma = cfg.sigma_override
    if sigma is None:
        sigma = adaptive_sigma(d2, cfg.sigma_floor)
    return rbf_kernel(d2, sigma)


def _check_pair(z_ref: PooledLayer, z_tgt: PooledLayer) -> int:
    if z_ref.batch_size != z_tgt.batch_size:
        raise ContractError(
            f"batch sizes differ: {z_ref.batch_size} vs {z_tgt.batch_size}")
    if z_ref.batch_size < 2:
        raise ContractError("regularizer needs a batch of at least 2 samples")
    return z_ref.batch_size


def reg_loss_double_sum(z_ref: PooledLayer, z_tgt: PooledLayer, cfg: RegConfig) -> Tensor:
    """Explicit pair form: (1/B^2) sum_ij W_ij(ref) * ||tgt_i - tgt_j||^2."""
    b = _check_pair(z_ref, z_tgt)
    kernel = _reference_kernel(z_ref, cfg)
    d2_tgt = pairwise_sq_dists(z_tgt.values)
    return T.scale(T.sum_(T.mul(kernel.weights, d2_tgt)), 1.0 / (b * b))


def reg_loss_trace(z_ref: PooledLayer, z_tgt: PooledLayer, cfg: RegConfig) -> Tensor:
    """Trace form: (1/B^2) Tr(Z' L Z) with L built from the reference kernel.

    With the unnormalized Laplacian this equals exactly half the double sum;
    the symmetric-normalized mode is the production default.
    """
    b = _check_pair(z_ref, z_tgt)
    kernel = _reference_kernel(z_ref, cfg)
    lap = laplacian(kernel, cfg.laplacian_mode)
    z = z_tgt.values
    return T.scale(T.sum_(T.mul(z, T.matmul(lap, z))), 1.0 / (b * b))


def reg_loss(activations: Mapping[int, PooledLayer], cfg: RegConfig) -> Tensor:
    """Dispatch the trace loss over the configured layer pair(s)."""
    for layer in (cfg.ref_layer, cfg.target_layer):
        if layer not in activations:
            raise ConfigError(f"layer {layer} missing from recorded activations")
    if cfg.pair_mode == "single_directed_pair":
        return reg_loss_trace(activations[cfg.ref_layer],
                              activations[cfg.target_layer], cfg)
    total = None
    for a, b in ((cfg.ref_layer, cfg.target_layer),
                 (cfg.target_layer, cfg.ref_layer)):
        term = reg_loss_trace(activations[a], activations[b], cfg)
        total = term if total is None else T.add(total, term)
    return total
