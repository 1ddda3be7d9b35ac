"""Small vision transformer with masked-autoencoder pretraining heads.

Pre-norm blocks, fixed 2-D sinusoidal positions, visible-patch-only encoder,
lightweight decoder with a learned mask token. Every encoder block's output
(post-residual, pre final-norm) is recorded so pooled per-layer activations
can feed the manifold regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, DimensionError
from .tensor import Tensor

MLP_RATIO = 4


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    enc_depth: int = 4
    enc_dim: int = 32
    enc_heads: int = 4
    dec_depth: int = 2
    dec_dim: int = 16
    dec_heads: int = 2
    mask_ratio: float = 0.75
    use_class_token: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.enc_dim % self.enc_heads != 0:
            raise ConfigError(f"enc_dim {self.enc_dim} not divisible by enc_heads {self.enc_heads}")
        if self.dec_dim % self.dec_heads != 0:
            raise ConfigError(f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}")
        # the sinusoidal position table splits each embedding into y/x sin/cos quarters
        if self.enc_dim % 4 != 0 or self.dec_dim % 4 != 0:
            raise ConfigError("enc_dim and dec_dim must be divisible by 4")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


@dataclass
class MaskPlan:
    """Per-sample patch shuffle: the first ``n_visible`` ranks stay visible."""

    perm: np.ndarray         # B x P, perm[b, j] = patch index at shuffle rank j
    n_visible: int
    mask: np.ndarray         # B x P bool, True = masked
    ids_restore: np.ndarray  # B x P, inverse permutation

    @property
    def batch_size(self) -> int:
        return self.perm.shape[0]

    @property
    def num_patches(self) -> int:
        return self.perm.shape[1]

    @property
    def visible_indices(self) -> np.ndarray:
        return self.perm[:, : self.n_visible]


def make_mask(rng: np.random.Generator, batch_size: int, num_patches: int,
              mask_ratio: float) -> MaskPlan:
    """Uniform random per-sample masking with exactly round(ratio*P) patches hidden."""
    n_masked = int(math.floor(mask_ratio * num_patches + 0.5))
    if not 1 <= n_masked <= num_patches - 1:
        raise ConfigError(
            f"mask_ratio {mask_ratio} with {num_patches} patches masks {n_masked}; "
            "need between 1 and P-1")
    n_visible = num_patches - n_masked
    perm = np.stack([rng.permutation(num_patches) for _ in range(batch_size)])
    mask = np.zeros((batch_size, num_patches), dtype=bool)
    rows = np.arange(batch_size)[:, None]
    mask[rows, perm[:, n_visible:]] = True
    return MaskPlan(perm=perm, n_visible=n_visible, mask=mask,
                    ids_restore=np.argsort(perm, axis=1))


def patchify(images, cfg: VitConfig):
    """B x C x H x W -> B x P x (C*patch^2), patches in row-major grid order."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    b, c, h, w = arr.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.channels:
        raise DimensionError(f"expected {cfg.channels} x {cfg.image_size} x {cfg.image_size} "
                             f"images, got {arr.shape}")
    g, ps = cfg.grid, cfg.patch_size
    out = arr.reshape(b, c, g, ps, g, ps)
    out = out.transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * ps * ps)
    out = np.ascontiguousarray(out)
    return Tensor(out) if isinstance(images, Tensor) else out


def unpatchify(patches, cfg: VitConfig):
    """Exact inverse of patchify."""
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
    b, p, d = arr.shape
    g, ps, c = cfg.grid, cfg.patch_size, cfg.channels
    if p != cfg.num_patches or d != cfg.patch_dim:
        raise DimensionError(f"expected {cfg.num_patches} x {cfg.patch_dim} patches, got {arr.shape}")
    out = arr.reshape(b, g, g, c, ps, ps)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(b, c, g * ps, g * ps)
    out = np.ascontiguousarray(out)
    return Tensor(out) if isinstance(patches, Tensor) else out


def sincos_positions(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table, (grid*grid) x dim; y takes the first half."""

    def along(d, pos):
        omega = 1.0 / 10000.0 ** (np.arange(d // 2, dtype=np.float64) / (d // 2))
        angles = pos[:, None] * omega[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64),
                         np.arange(grid, dtype=np.float64), indexing="ij")
    return np.concatenate([along(dim // 2, ys.reshape(-1)),
                           along(dim // 2, xs.reshape(-1))], axis=1)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class VitMaeModel:
    """Parameter container; forward passes live in encode/decode_reconstruct."""

    def __init__(self, cfg: VitConfig, seed: int = 0):
        from . import rng as rng_mod

        self.cfg = cfg
        self.params: Dict[str, Tensor] = {}
        gen = rng_mod.stream(seed, rng_mod.INIT)

        def lin(name, fan_in, fan_out):
            self._add(f"{name}.weight", _trunc_normal(gen, (fan_in, fan_out), 0.02))
            self._add(f"{name}.bias", np.zeros(fan_out))

        def norm(name, dim):
            self._add(f"{name}.gain", np.ones(dim))
            self._add(f"{name}.bias", np.zeros(dim))

        def blocks(prefix, depth, dim):
            for i in range(depth):
                norm(f"{prefix}.block{i}.norm1", dim)
                lin(f"{prefix}.block{i}.attn.qkv", dim, 3 * dim)
                lin(f"{prefix}.block{i}.attn.proj", dim, dim)
                norm(f"{prefix}.block{i}.norm2", dim)
                lin(f"{prefix}.block{i}.mlp.fc1", dim, MLP_RATIO * dim)
                lin(f"{prefix}.block{i}.mlp.fc2", MLP_RATIO * dim, dim)

        lin("patch_embed", cfg.patch_dim, cfg.enc_dim)
        if cfg.use_class_token:
            self._add("cls_token", gen.standard_normal((1, cfg.enc_dim)) * 0.02)
        blocks("enc", cfg.enc_depth, cfg.enc_dim)
        norm("enc.norm", cfg.enc_dim)
        lin("dec.embed", cfg.enc_dim, cfg.dec_dim)
        self._add("dec.mask_token", gen.standard_normal((1, cfg.dec_dim)) * 0.02)
        blocks("dec", cfg.dec_depth, cfg.dec_dim)
        norm("dec.norm", cfg.dec_dim)
        lin("dec.head", cfg.dec_dim, cfg.patch_dim)

        self.enc_pos = sincos_positions(cfg.enc_dim, cfg.grid)
        self.dec_pos = sincos_positions(cfg.dec_dim, cfg.grid)

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        if missing or extra:
            raise CheckpointError(f"parameter names do not match model: "
                                  f"missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in state.items():
            if arr.shape != self.params[name].shape:
                raise CheckpointError(
                    f"{name}: checkpoint shape {arr.shape} != model shape "
                    f"{self.params[name].shape}")
            self.params[name].assign(arr)


@dataclass
class EncodeResult:
    layer_tokens: Dict[int, Tensor]          # 1-based block index -> B x T x D
    final: Tensor                            # after the final encoder norm
    attention: Dict[int, np.ndarray] = field(default_factory=dict)  # B x H x T x T
    keys: Dict[int, np.ndarray] = field(default_factory=dict)       # B x T x D


def _transformer_block(x: Tensor, params: Dict[str, Tensor], prefix: str,
                       heads: int) -> tuple:
    b, t, d = x.shape
    dh = d // heads
    h = T.layer_norm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])
    qkv = T.linear(h, params[f"{prefix}.attn.qkv.weight"], params[f"{prefix}.attn.qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q = T.reshape(T.narrow(qkv, 0, 0, 1), (b, heads, t, dh))
    k = T.reshape(T.narrow(qkv, 0, 1, 1), (b, heads, t, dh))
    v = T.reshape(T.narrow(qkv, 0, 2, 1), (b, heads, t, dh))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    x = T.add(x, T.linear(ctx, params[f"{prefix}.attn.proj.weight"],
                          params[f"{prefix}.attn.proj.bias"]))
    h2 = T.layer_norm(x, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"])
    m = T.linear(T.gelu(T.linear(h2, params[f"{prefix}.mlp.fc1.weight"],
                                 params[f"{prefix}.mlp.fc1.bias"])),
                 params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    # per-token key vectors (heads re-concatenated) for feature visualization
    keys = k.data.transpose(0, 2, 1, 3).reshape(b, t, d)
    return T.add(x, m), attn, keys


def _positions_tensor(table: np.ndarray, batch_size: int) -> Tensor:
    return Tensor(np.ascontiguousarray(
        np.broadcast_to(table[None], (batch_size,) + table.shape)))


def encode(images, plan: Optional[MaskPlan], model: VitMaeModel,
           record_attention: bool = True) -> EncodeResult:
    """Embed visible patches and run the encoder, recording per-block outputs.

    ``plan=None`` disables masking (evaluation mode: every patch is a token).
    """
    cfg = model.cfg
    p = model.params
    patches = patchify(images, cfg)
    if not isinstance(patches, Tensor):
        patches = Tensor(patches)
    b = patches.shape[0]
    if plan is not None and (plan.batch_size != b or plan.num_patches != cfg.num_patches):
        raise ContractError(f"mask plan ({plan.perm.shape}) does not match batch "
                            f"({b} x {cfg.num_patches})")

    tok = T.linear(patches, p["patch_embed.weight"], p["patch_embed.bias"])
    tok = T.add(tok, _positions_tensor(model.enc_pos, b))
    if plan is not None:
        tok = T.take_tokens(tok, plan.visible_indices)
    if cfg.use_class_token:
        cls = T.reshape(T.matmul(T.ones((b, 1)), p["cls_token"]), (b, 1, cfg.enc_dim))
        tok = T.concat([cls, tok], axis=1)

    layer_tokens: Dict[int, Tensor] = {}
    attention: Dict[int, np.ndarray] = {}
    keys: Dict[int, np.ndarray] = {}
    x = tok
    for i in range(cfg.enc_depth):
        x, attn, k = _transformer_block(x, p, f"enc.block{i}", cfg.enc_heads)
        layer_tokens[i + 1] = x
        if record_attention:
            attention[i + 1] = attn.data
            keys[i + 1] = k
    final = T.layer_norm(x, p["enc.norm.gain"], p["enc.norm.bias"])
    return EncodeResult(layer_tokens=layer_tokens, final=final, attention=attention,
                        keys=keys)


def decode_reconstruct(encoded: Tensor, plan: MaskPlan, model: VitMaeModel) -> Tensor:
    """Rebuild the full patch sequence with mask tokens and predict pixels."""
    cfg = model.cfg
    p = model.params
    if plan is None:
        raise ContractError("decoding requires the mask plan used for encoding")
    b, t, _ = encoded.shape
    n_cls = 1 if cfg.use_class_token else 0
    if t - n_cls != plan.n_visible or plan.batch_size != b:
        raise ContractError(f"encoded tokens ({t - n_cls} visible) do not match "
                            f"plan ({plan.n_visible} visible)")

    y = T.linear(encoded, p["dec.embed.weight"], p["dec.embed.bias"])
    if n_cls:
        cls_y = T.narrow(y, 1, 0, 1)
        y = T.narrow(y, 1, 1, plan.n_visible)
    n_masked = cfg.num_patches - plan.n_visible
    mask_tok = T.reshape(T.matmul(T.ones((b * n_masked, 1)), p["dec.mask_token"]),
                         (b, n_masked, cfg.dec_dim))
    full = T.take_tokens(T.concat([y, mask_tok], axis=1), plan.ids_restore)
    full = T.add(full, _positions_tensor(model.dec_pos, b))
    if n_cls:
        full = T.concat([cls_y, full], axis=1)

    x = full
    for i in range(cfg.dec_depth):
        x, _, _ = _transformer_block(x, p, f"dec.block{i}", cfg.dec_heads)
    x = T.layer_norm(x, p["dec.norm.gain"], p["dec.norm.bias"])
    pred = T.linear(x, p["dec.head.weight"], p["dec.head.bias"])
    if n_cls:
        pred = T.narrow(pred, 1, 1, cfg.num_patches)
    return pred
