"""Total-loss assembly: masked reconstruction + optional uniformity term +
epoch-gated manifold regularizer.

All four training methods (mae, m_mae, u_mae, mu_mae) are the same code path
under different Schedule weights; the regularizer is always *evaluated* for
logging, but only enters the gradient inside its active epoch window.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateInputError
from .regularizer import PooledLayer, RegConfig, pairwise_sq_dists, reg_loss
from .tensor import Tensor
from .vit import MaskPlan

METHODS = ("mae", "m_mae", "u_mae", "mu_mae")
UNIFORMITY_WEIGHT = 0.01
UNIFORMITY_T = 2.0


@dataclass(frozen=True)
class Schedule:
    """Regularizer weight and epoch window, plus the uniformity weight."""

    lambda_weight: float = 1.0
    e_st: int = 10
    e_dur: int = 100
    uniformity_weight: float = 0.0

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ConfigError(f"lambda_weight must be >= 0, got {self.lambda_weight}")
        if self.e_st < 0:
            raise ConfigError(f"e_st must be >= 0, got {self.e_st}")
        if self.e_dur < 1:
            raise ConfigError(f"e_dur must be >= 1, got {self.e_dur}")
        if self.uniformity_weight < 0:
            raise ConfigError(f"uniformity_weight must be >= 0, got {self.uniformity_weight}")


def build_schedule(method: str, lambda_weight: float = 1.0, e_st: int = 10,
                   e_dur: int = 100,
                   uniformity_weight: float = UNIFORMITY_WEIGHT) -> Schedule:
    """Method presets are pure configuration: the regularized variants keep
    lambda, the uniformity variants keep the uniformity weight, and the rest
    are zeroed."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}, expected one of {METHODS}")
    use_reg = method in ("m_mae", "mu_mae")
    use_unif = method in ("u_mae", "mu_mae")
    return Schedule(lambda_weight=lambda_weight if use_reg else 0.0,
                    e_st=e_st, e_dur=e_dur,
                    uniformity_weight=uniformity_weight if use_unif else 0.0)


@dataclass
class LossBreakdown:
    total: float
    reconstruction: float
    regularizer: float
    uniformity: float
    effective_lambda: float


@dataclass
class ReconOutputs:
    """Decoder predictions paired with their targets and mask plan."""

    pred: Tensor            # B x P x patch_dim
    target_patches: Tensor  # constant, same shape
    plan: MaskPlan
    normalize_targets: bool = True


def effective_lambda(epoch: int, sched: Schedule) -> float:
    """Hard on/off gate: lambda inside [e_st, e_st + e_dur), zero outside."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    if sched.e_st <= epoch < sched.e_st + sched.e_dur:
        return float(sched.lambda_weight)
    return 0.0


def reconstruction_loss(pred: Tensor, target_patches: Tensor, plan: MaskPlan,
                        normalize_targets: bool) -> Tensor:
    """Mean squared error over masked patches only.

    With ``normalize_targets`` each target patch is standardized by its own
    mean/std (eps 1e-6) before comparison, so the loss scores local structure
    rather than absolute intensity.
    """
    if pred.shape != target_patches.shape:
        raise ContractError(
            f"prediction {pred.shape} does not match targets {target_patches.shape}")
    n_masked = int(plan.mask.sum())
    if n_masked == 0:
        raise ContractError("reconstruction loss needs at least one masked patch")
    tgt = target_patches.data
    if normalize_targets:
        mu = tgt.mean(axis=-1, keepdims=True)
        var = tgt.var(axis=-1, keepdims=True)
        tgt = (tgt - mu) / np.sqrt(var + 1e-6)
    mask = np.broadcast_to(plan.mask[:, :, None], pred.shape).astype(np.float64)
    diff = T.sub(pred, Tensor(tgt))
    masked_sq = T.mul(T.mul(diff, diff), Tensor(mask))
    return T.scale(T.sum_(masked_sq), 1.0 / (n_masked * pred.shape[-1]))


def uniformity_loss(pooled: Tensor, t: float = UNIFORMITY_T) -> Tensor:
    """log mean over ordered pairs i != j of exp(-t ||zhat_i - zhat_j||^2),
    rows L2-normalized first. Maximal (0) when all rows coincide."""
    if pooled.ndim != 2:
        raise ContractError(f"uniformity expects B x D features, got {pooled.shape}")
    b = pooled.shape[0]
    if b < 2:
        raise ContractError(f"uniformity needs at least 2 samples, got {b}")
    sq_norms = T.sum_(T.mul(pooled, pooled), axes=1)
    if np.any(sq_norms.data == 0.0):
        raise DegenerateInputError("uniformity: zero-norm feature row")
    zhat = T.matmul(T.diag_embed(T.pow_const(sq_norms, -0.5)), pooled)
    d2 = pairwise_sq_dists(zhat)
    total = T.sum_(T.exp(T.scale(d2, -float(t))))
    off_diag_mean = T.scale(T.sub(total, float(b)), 1.0 / (b * (b - 1)))
    return T.log(off_diag_mean)


def total_loss(outputs: ReconOutputs, activations: Mapping[int, PooledLayer],
               cfg: RegConfig, sched: Schedule,
               epoch: int) -> Tuple[Tensor, LossBreakdown]:
    """Weighted sum of the enabled terms.

    Outside the regularizer's window the regularizer is still computed (off
    the tape) so its value can be logged, reproducing the evaluate-but-don't-
    backpropagate trace.
    """
    rec = reconstruction_loss(outputs.pred, outputs.target_patches,
                              outputs.plan, outputs.normalize_targets)
    total = rec
    unif_value = 0.0
    if sched.uniformity_weight > 0:
        deepest = max(activations)
        unif = uniformity_loss(activations[deepest].values)
        unif_value = unif.item()
        total = T.add(total, T.scale(unif, sched.uniformity_weight))
    lam = effective_lambda(epoch, sched)
    if lam > 0:
        reg = reg_loss(activations, cfg)
        reg_value = reg.item()
        total = T.add(total, T.scale(reg, lam))
    else:
        with T.no_grad():
            reg_value = reg_loss(activations, cfg).item()
    breakdown = LossBreakdown(total=total.item(),
                              reconstruction=rec.item(),
                              regularizer=reg_value,
                              uniformity=unif_value,
                              effective_lambda=lam)
    return total, breakdown
