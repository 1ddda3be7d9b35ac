"""Pretraining loop: augmented batches, masked forward, loss assembly,
AdamW updates, JSONL metrics, checkpoints, and a periodic online kNN probe.

Everything that consumes randomness draws from streams keyed by (seed,
purpose, epoch, step), so two runs of the same resolved config produce
bit-identical weights and metrics. Wall-clock throughput (imgs_per_sec) is
the one metrics field that cannot be reproducible.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .checkpoint import save_weights
from .config import RunConfig
from .data import DatasetContainer, augment, batch_iter, split_indices
from .errors import TrainingAborted
from .evaluate import extract_features, knn_classify
from .objectives import ReconOutputs, effective_lambda, total_loss
from .optim import AdamW, lr_at
from .regularizer import PooledLayer, pool_patches
from .tensor import Tensor
from .vit import VitMaeModel, decode_reconstruct, encode, make_mask, patchify

METRIC_KEYS = ("epoch", "loss_total", "loss_rec", "loss_reg", "loss_unif",
               "lambda_eff", "lr", "imgs_per_sec", "online_knn")


def metrics_line(values: dict) -> str:
    return json.dumps({k: values[k] for k in METRIC_KEYS})


def pretrain(model: VitMaeModel, ds: DatasetContainer, run_cfg: RunConfig,
             out_dir: Optional[Path] = None,
             log: Optional[Callable[[str], None]] = None) -> List[dict]:
    """Train ``model`` on ``ds`` per the resolved run config.

    Returns the per-epoch metric dicts; when ``out_dir`` is given they are
    also streamed to metrics.jsonl next to the checkpoints.
    """
    cfg = run_cfg.vit_config()
    reg_cfg = run_cfg.reg_config()
    sched = run_cfg.schedule()
    aug_cfg = run_cfg.augment_config()
    seed = run_cfg.seed

    steps_per_epoch = ds.n // run_cfg.batch_size
    total_steps = run_cfg.epochs * steps_per_epoch
    warmup_steps = run_cfg.warmup_epochs * steps_per_epoch
    opt = AdamW(model.params, betas=(run_cfg.beta1, run_cfg.beta2),
                eps=run_cfg.adam_eps, weight_decay=run_cfg.weight_decay)

    needed_layers = {reg_cfg.ref_layer, reg_cfg.target_layer}
    if sched.uniformity_weight > 0:
        needed_layers.add(cfg.enc_depth)

    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")

    def transform(image_u8, sample_index):
        return augment(image_u8, aug_cfg,
                       rng_mod.stream(seed, rng_mod.AUGMENT, epoch, sample_index))

    last_good = {k: v.data.copy() for k, v in model.params.items()}
    all_metrics: List[dict] = []
    global_step = 0
    for epoch in range(run_cfg.epochs):
        t0 = time.perf_counter()
        sums = {"total": 0.0, "rec": 0.0, "reg": 0.0, "unif": 0.0}
        n_images = 0
        lr = 0.0
        for step, batch in enumerate(batch_iter(ds, run_cfg.batch_size, seed,
                                                epoch, drop_last=True,
                                                transform=transform)):
            plan = make_mask(rng_mod.stream(seed, rng_mod.MASK, epoch, step),
                             batch.images.shape[0], cfg.num_patches, cfg.mask_ratio)
            with T.Tape():
                enc = encode(batch.images, plan, model, record_attention=False)
                pooled = {
                    layer: PooledLayer(layer, pool_patches(
                        enc.layer_tokens[layer],
                        exclude_class_token=cfg.use_class_token and run_cfg.exclude_class_token))
                    for layer in needed_layers}
                pred = decode_reconstruct(enc.final, plan, model)
                outputs = ReconOutputs(pred=pred,
                                       target_patches=Tensor(patchify(batch.images, cfg)),
                                       plan=plan,
                                       normalize_targets=run_cfg.normalize_targets)
                total, bd = total_loss(outputs, pooled, reg_cfg, sched, epoch)
                if not math.isfinite(bd.total):
                    if out_dir is not None:
                        save_weights(out_dir / "checkpoint_lastgood.mgwt",
                                     {k: Tensor(v) for k, v in last_good.items()})
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} step {step}")
                T.backward(total)
            lr = lr_at(global_step, total_steps, warmup_steps,
                       run_cfg.lr_peak, run_cfg.lr_floor)
            opt.step(lr)
            global_step += 1
            n_images += batch.images.shape[0]
            sums["total"] += bd.total
            sums["rec"] += bd.reconstruction
            sums["reg"] += bd.regularizer
            sums["unif"] += bd.uniformity
        elapsed = time.perf_counter() - t0
        last_good = {k: v.data.copy() for k, v in model.params.items()}

        online = None
        if run_cfg.probe_interval > 0 and (epoch + 1) % run_cfg.probe_interval == 0:
            online = _online_knn(model, ds, run_cfg)
        line = {
            "epoch": epoch,
            "loss_total": sums["total"] / steps_per_epoch,
            "loss_rec": sums["rec"] / steps_per_epoch,
            "loss_reg": sums["reg"] / steps_per_epoch,
            "loss_unif": sums["unif"] / steps_per_epoch,
            "lambda_eff": effective_lambda(epoch, sched),
            "lr": lr,
            "imgs_per_sec": n_images / elapsed if elapsed > 0 else None,
            "online_knn": online,
        }
        all_metrics.append(line)
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write(metrics_line(line) + "\n")
        if log is not None:
            log(metrics_line(line))
        if (out_dir is not None and run_cfg.ckpt_interval > 0
                and (epoch + 1) % run_cfg.ckpt_interval == 0):
            save_weights(out_dir / f"checkpoint_epoch{epoch + 1}.mgwt", model.params)

    if out_dir is not None:
        save_weights(out_dir / "checkpoint_final.mgwt", model.params)
    return all_metrics


def _online_knn(model: VitMaeModel, ds: DatasetContainer, run_cfg: RunConfig) -> float:
    """kNN trend diagnostic on frozen current weights: reference features from
    one split of the container, queries from the held-out split."""
    feats, labels = extract_features(model, ds, run_cfg.norm_mean, run_cfg.norm_std,
                                     batch_size=run_cfg.batch_size)
    train_idx, hold_idx = split_indices(ds.n, run_cfg.probe_split, run_cfg.seed)
    k = min(run_cfg.probe_knn_k, len(train_idx))
    return knn_classify(feats[train_idx], labels[train_idx],
                        feats[hold_idx], labels[hold_idx], k=k)
