"""AdamW with decoupled weight decay, and the warmup-cosine learning rate."""

from __future__ import annotations

import math
from typing import Dict, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_peak: float,
          lr_floor: float = 0.0) -> float:
    """Linear ramp from lr_floor to lr_peak over the warmup, then a half
    cosine decaying to zero at total_steps."""
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    if warmup_steps >= total_steps:
        raise ContractError(f"warmup {warmup_steps} must be < total {total_steps}")
    if step < warmup_steps:
        return lr_floor + (lr_peak - lr_floor) * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    # biases, norm gains, and the learned tokens are exempt from decay
    return name.endswith(".weight")


class AdamW:
    """Standard bias-corrected AdamW; decay multiplies the parameter directly
    (decoupled), never the gradient."""

    def __init__(self, params: Dict[str, Tensor], betas: Tuple[float, float] = (0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros(p.shape)
            elif T.debug_checks_enabled() and not np.all(np.isfinite(g)):
                raise ContractError(f"non-finite gradient for {name} at step {t}")
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.data - lr * update
            if self.weight_decay and decays(name):
                new = new - lr * self.weight_decay * p.data
            p.assign(new)
