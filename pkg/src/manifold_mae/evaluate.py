"""Frozen-encoder evaluation: feature extraction, linear probe, kNN, and the
Davies-Bouldin cluster-separation index."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .data import DatasetContainer, eval_transform
from .errors import ContractError, DataError
from .regularizer import pool_patches
from .tensor import Tensor
from .vit import VitMaeModel, encode

@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    milestones: Tuple[int, ...] = (60, 80)
    lr_decay: float = 0.1
    batch_size: int = 256

    def __post_init__(self):
        if any(m >= self.epochs for m in self.milestones):
            raise ContractError(f"milestones {self.milestones} must precede "
                                f"epochs {self.epochs}")


def probe_lr_at(epoch: int, pcfg: ProbeConfig) -> float:
    """Step schedule: the decay applies from the milestone epoch onward."""
    passed = sum(1 for m in pcfg.milestones if m <= epoch)
    return pcfg.lr * pcfg.lr_decay ** passed


def extract_features(model: VitMaeModel, ds: DatasetContainer, mean, std,
                     batch_size: int = 64, feature: str = "pooled",
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic encoder features with masking disabled.

    ``pooled`` averages the last block's patch tokens (class token excluded),
    mirroring what the regularizer acts on; ``cls`` takes the class token.
    """
    if feature not in ("pooled", "cls"):
        raise ContractError(f"unknown feature kind {feature!r}")
    cfg = model.cfg
    feats = np.zeros((ds.n, cfg.enc_dim))
    with T.no_grad():
        for start in range(0, ds.n, batch_size):
            idx = np.arange(start, min(start + batch_size, ds.n))
            images = np.stack([eval_transform(ds.images[i], cfg.image_size, mean, std)
                               for i in idx])
            out = encode(images, None, model, record_attention=False)
            tokens = out.layer_tokens[cfg.enc_depth]
            if feature == "pooled":
                block = pool_patches(tokens, exclude_class_token=cfg.use_class_token)
                feats[idx] = block.data
            else:
                if not cfg.use_class_token:
                    raise ContractError("cls features need use_class_token")
                feats[idx] = tokens.data[:, 0]
    return feats, ds.labels.astype(np.int64)


def train_linear_classifier(train_feats: np.ndarray, train_labels: np.ndarray,
                            test_feats: np.ndarray, test_labels: np.ndarray,
                            num_classes: int, pcfg: ProbeConfig = ProbeConfig(),
                            seed: int = 0) -> float:
    """Single linear layer + softmax cross-entropy, plain SGD with milestone
    decays. Returns top-1 accuracy on the test features."""
    if np.any(train_labels >= num_classes) or np.any(test_labels >= num_classes):
        raise DataError(f"label out of range for {num_classes} classes")
    n, d = train_feats.shape
    w = Tensor(np.zeros((d, num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    batch = min(pcfg.batch_size, n)
    for epoch in range(pcfg.epochs):
        lr = probe_lr_at(epoch, pcfg)
        order = rng_mod.stream(seed, rng_mod.PROBE, epoch).permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            with T.Tape():
                loss = _cross_entropy(T.linear(Tensor(train_feats[idx]), w, b),
                                      train_labels[idx], num_classes)
                T.backward(loss)
            w.assign(w.data - lr * w.grad)
            b.assign(b.data - lr * b.grad)
    logits = test_feats @ w.data + b.data
    return float(np.mean(logits.argmax(axis=1) == test_labels))


def _cross_entropy(logits: Tensor, labels: np.ndarray, num_classes: int) -> Tensor:
    b = logits.shape[0]
    shift = logits.data.max(axis=1, keepdims=True)
    shifted = T.sub(logits, Tensor(np.broadcast_to(shift, logits.shape).copy()))
    lse = T.add(T.log(T.sum_(T.exp(shifted), axes=1)), Tensor(shift[:, 0]))
    onehot = np.zeros((b, num_classes))
    onehot[np.arange(b), labels] = 1.0
    picked = T.sum_(T.mul(logits, Tensor(onehot)), axes=1)
    return T.mean(T.sub(lse, picked))


def linear_probe(model: VitMaeModel, train_ds: DatasetContainer,
                 test_ds: DatasetContainer, mean, std,
                 pcfg: ProbeConfig = ProbeConfig(), seed: int = 0,
                 feature: str = "pooled") -> float:
    """Freeze the encoder, extract features once, train the probe on them."""
    train_feats, train_labels = extract_features(model, train_ds, mean, std,
                                                 feature=feature)
    test_feats, test_labels = extract_features(model, test_ds, mean, std,
                                               feature=feature)
    classes = max(train_ds.class_count, test_ds.class_count)
    return train_linear_classifier(train_feats, train_labels, test_feats,
                                   test_labels, classes, pcfg, seed)


def knn_predict(train_feats: np.ndarray, train_labels: np.ndarray,
                test_feats: np.ndarray, k: int = 10) -> np.ndarray:
    """Majority vote among the k nearest by Euclidean distance.

    Vote ties break toward the class with the smallest summed distance within
    the k neighbors, then toward the lowest class index. Equal-distance
    neighbors at the cutoff resolve by train index (stable sort).
    """
    n = train_feats.shape[0]
    if n == 0:
        raise ContractError("kNN needs a nonempty train set")
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must be in [1, {n}]")
    d2 = ((test_feats[:, None, :] - train_feats[None]) ** 2).sum(axis=-1)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    preds = np.zeros(test_feats.shape[0], dtype=np.int64)
    for i, row in enumerate(nearest):
        votes: dict[int, int] = {}
        dist_sum: dict[int, float] = {}
        for j in row:
            c = int(train_labels[j])
            votes[c] = votes.get(c, 0) + 1
            dist_sum[c] = dist_sum.get(c, 0.0) + math.sqrt(d2[i, j])
        preds[i] = min(votes, key=lambda c: (-votes[c], dist_sum[c], c))
    return preds


def knn_classify(train_feats: np.ndarray, train_labels: np.ndarray,
                 test_feats: np.ndarray, test_labels: np.ndarray,
                 k: int = 10) -> float:
    preds = knn_predict(train_feats, train_labels, test_feats, k)
    return float(np.mean(preds == test_labels))


def davies_bouldin(feats: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes of the worst (S_i + S_j) / M_ij ratio, where S is
    the mean distance to the class centroid and M the centroid separation.
    Returns +inf when two class centroids coincide."""
    classes = np.unique(labels)
    if classes.size < 2:
        raise ContractError("Davies-Bouldin needs at least two classes")
    centroids = np.stack([feats[labels == c].mean(axis=0) for c in classes])
    scatter = np.array([
        np.mean(np.linalg.norm(feats[labels == c] - centroids[i], axis=1))
        for i, c in enumerate(classes)])
    m = np.linalg.norm(centroids[:, None, :] - centroids[None], axis=-1)
    total = 0.0
    for i in range(classes.size):
        ratios = []
        for j in range(classes.size):
            if i == j:
                continue
            if m[i, j] == 0.0:
                return float("inf")
            ratios.append((scatter[i] + scatter[j]) / m[i, j])
        total += max(ratios)
    return total / classes.size


@dataclass
class EvalReport:
    linear_acc: Optional[float] = None
    knn_acc: Optional[float] = None
    dbi: Optional[float] = None
    images_per_sec: Optional[float] = None

    def as_dict(self) -> dict:
        return {"linear_acc": self.linear_acc, "knn_acc": self.knn_acc,
                "dbi": self.dbi, "images_per_sec": self.images_per_sec}
