"""Flat key=value run configuration.

One key per line, ``#`` starts a comment, unknown keys are rejected. A
"resolved" config has the auto layer pair and dataset normalization stats
filled in, so rerunning it reproduces a run bit-for-bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Tuple

from .data import AugmentConfig, DatasetContainer, compute_norm_stats
from .errors import ConfigError
from .objectives import METHODS, Schedule, build_schedule
from .regularizer import RegConfig
from .vit import VitConfig


@dataclass
class RunConfig:
    # method and schedule
    method: str = "m_mae"
    lambda_weight: float = 1.0
    e_st: int = 10
    e_dur: int = 100
    uniformity_weight: float = 0.01
    # run
    seed: int = 0
    epochs: int = 60
    batch_size: int = 32
    train_data: str = ""
    # model
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
    # regularizer (0 layers = auto: penultimate -> last)
    ref_layer: int = 0
    target_layer: int = 0
    laplacian_mode: str = "symmetric_normalized"
    kernel_grad: str = "flow"
    pair_mode: str = "single_directed_pair"
    sigma_floor: float = 1e-8
    exclude_class_token: bool = True
    # optimizer
    lr_peak: float = 1.5e-3
    lr_floor: float = 0.0
    warmup_epochs: int = 10
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    # loss
    normalize_targets: bool = True
    # augmentation
    crop_scale_min: float = 0.08
    crop_scale_max: float = 1.0
    hflip_prob: float = 0.5
    # evaluation and logging
    probe_interval: int = 10
    probe_split: float = 0.1
    probe_knn_k: int = 10
    ckpt_interval: int = 0
    # resolved dataset statistics (empty until resolve_config)
    norm_mean: Tuple[float, ...] = ()
    norm_std: Tuple[float, ...] = ()

    # -- derived module configs ------------------------------------------

    def vit_config(self) -> VitConfig:
        return VitConfig(image_size=self.image_size, patch_size=self.patch_size,
                         channels=self.channels, enc_depth=self.enc_depth,
                         enc_dim=self.enc_dim, enc_heads=self.enc_heads,
                         dec_depth=self.dec_depth, dec_dim=self.dec_dim,
                         dec_heads=self.dec_heads, mask_ratio=self.mask_ratio,
                         use_class_token=self.use_class_token)

    def reg_config(self) -> RegConfig:
        ref = self.ref_layer or self.enc_depth - 1
        tgt = self.target_layer or self.enc_depth
        return RegConfig(ref_layer=ref, target_layer=tgt,
                         laplacian_mode=self.laplacian_mode,
                         kernel_grad=self.kernel_grad, pair_mode=self.pair_mode,
                         sigma_floor=self.sigma_floor)

    def schedule(self) -> Schedule:
        return build_schedule(self.method, self.lambda_weight, self.e_st,
                              self.e_dur, self.uniformity_weight)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(output_size=self.image_size, mean=self.norm_mean,
                             std=self.norm_std, crop_scale_min=self.crop_scale_min,
                             crop_scale_max=self.crop_scale_max,
                             hflip_prob=self.hflip_prob)

    def validate(self) -> None:
        """Check every field against module preconditions; raise on the first
        violation with a field-level message."""
        if self.method not in METHODS:
            raise ConfigError(f"method: {self.method!r} not in {METHODS}")
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size: must be >= 2, got {self.batch_size}")
        if self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs: {self.warmup_epochs} must be < "
                              f"epochs {self.epochs}")
        if self.enc_depth < 2:
            raise ConfigError("enc_depth: need >= 2 layers for the layer-pair regularizer")
        if self.lr_peak <= 0:
            raise ConfigError(f"lr_peak: must be positive, got {self.lr_peak}")
        if not 0.0 <= self.probe_split < 1.0:
            raise ConfigError(f"probe_split: must be in [0, 1), got {self.probe_split}")
        if self.probe_interval < 0 or self.ckpt_interval < 0:
            raise ConfigError("probe_interval/ckpt_interval: must be >= 0")
        if self.probe_knn_k < 1:
            raise ConfigError(f"probe_knn_k: must be >= 1, got {self.probe_knn_k}")
        ref = self.ref_layer or self.enc_depth - 1
        tgt = self.target_layer or self.enc_depth
        if not (1 <= ref <= self.enc_depth and 1 <= tgt <= self.enc_depth):
            raise ConfigError(f"ref_layer/target_layer: ({ref}, {tgt}) outside "
                              f"[1, {self.enc_depth}]")
        # these constructors enforce the rest of their own invariants
        self.vit_config()
        self.reg_config()
        self.schedule()
        if self.norm_mean or self.norm_std:
            if len(self.norm_mean) != self.channels or len(self.norm_std) != self.channels:
                raise ConfigError("norm_mean/norm_std: need one value per channel")
            self.augment_config()


_TUPLE_FIELDS = {"norm_mean", "norm_std"}


def _parse_value(name: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if name in _TUPLE_FIELDS:
            return tuple(float(x) for x in raw.split(",")) if raw else ()
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{name}: cannot parse {raw!r} ({e})") from e


def _field_kinds() -> dict:
    return {f.name: f.type for f in dataclasses.fields(RunConfig)}


def parse_config_text(text: str) -> dict:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in items:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        items[key] = value.strip()
    return items


def config_from_items(items: dict, base: RunConfig | None = None) -> RunConfig:
    kinds = _field_kinds()
    unknown = sorted(set(items) - set(kinds))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dataclasses.replace(base) if base else RunConfig()
    for key, raw in items.items():
        setattr(cfg, key, _parse_value(key, kinds[key], raw))
    return cfg


def load_config_file(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as f:
        return config_from_items(parse_config_text(f.read()), base)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    items = {}
    for entry in overrides:
        if "=" not in entry:
            raise ConfigError(f"override {entry!r} is not key=value")
        key, value = entry.split("=", 1)
        items[key.strip()] = value.strip()
    return config_from_items(items, base=cfg)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            value = ",".join(f"{x:.17g}" for x in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = f"{value:.17g}"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def resolve_config(cfg: RunConfig, ds: DatasetContainer) -> RunConfig:
    """Materialize auto layer indices and dataset normalization stats."""
    cfg = dataclasses.replace(cfg)
    cfg.ref_layer = cfg.ref_layer or cfg.enc_depth - 1
    cfg.target_layer = cfg.target_layer or cfg.enc_depth
    if not cfg.norm_mean:
        mean, std = compute_norm_stats(ds)
        cfg.norm_mean = tuple(float(x) for x in mean)
        cfg.norm_std = tuple(float(x) for x in std)
    if ds.channels != cfg.channels or ds.height != cfg.image_size:
        raise ConfigError(f"dataset is {ds.channels} x {ds.height} x {ds.width}, "
                          f"config wants {cfg.channels} x {cfg.image_size}")
    if cfg.batch_size > ds.n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {ds.n}")
    cfg.validate()
    return cfg
