"""Frozen-feature evaluation: linear probe, top-k accuracy and a 2-D random
projection of [CLS] features."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tensor as T
from . import vit
from .dataio import Checkpoint
from .errors import ConfigError, ParameterError, ShapeError, StratificationError
from .trainer import backbone_from_checkpoint

PROBE_LR = 0.01
PROBE_MOMENTUM = 0.9
PROBE_EPOCHS = 100


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be M x dim, got shape {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise ShapeError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if not np.isfinite(self.features).all():
            raise ParameterError("features contain non-finite values")
        if len(self.labels) and self.labels.min() < 0:
            raise ParameterError("labels must be non-negative class ids")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, index) -> FeatureSet:
        return FeatureSet(self.features[index], self.labels[index])


@dataclass(frozen=True)
class ProbeResult:
    loss: float
    acc1: float
    acc5: float

    def __post_init__(self):
        if not 0 <= self.acc1 <= self.acc5 <= 1:
            raise ParameterError(f"accuracies must satisfy 0 <= acc1 <= acc5 <= 1, got {self.acc1}, {self.acc5}")


@dataclass
class LinearProbe:
    """Softmax classifier over standardized features."""

    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    final_loss: float

    def logits(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float32) - self.mean) / self.scale
        return x @ self.weight + self.bias


# ----------------------------------------------------------------- features
def extract_features(ckpt: Checkpoint, images, which: str = "student", batch_size: int = 64,
                     labels=None) -> FeatureSet:
    """[CLS] features of ``images`` (N, 3, H, W) from a frozen backbone."""
    params, cfg = backbone_from_checkpoint(ckpt, which)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ConfigError(f"expected images shaped (N, 3, H, W), got {images.shape}")
    rows = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            cls, _ = vit.forward(params, cfg, images[start:start + batch_size], prefix="backbone.")
            rows.append(cls.data)
    feats = np.concatenate(rows) if rows else np.zeros((0, cfg.dim), dtype=np.float32)
    if labels is None:
        labels = np.zeros(len(feats), dtype=np.int64)
    return FeatureSet(feats, labels)


# --------------------------------------------------------------- subsampling
def stratified_subsample(labels, fraction: float, seed: int = 0) -> np.ndarray:
    """Sorted indices of ceil(fraction * M) examples, split across classes in
    proportion to their counts (largest remainder, ties to the lower class)."""
    if not 0 < fraction <= 1:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    labels = np.asarray(labels, dtype=np.int64)
    m = len(labels)
    if m == 0:
        raise StratificationError("cannot subsample an empty label set")
    classes, counts = np.unique(labels, return_counts=True)
    total = min(m, math.ceil(fraction * m - 1e-9))  # 0.1 * 70 is 7.000000000000001
    exact = counts * total / m
    quota = np.floor(exact).astype(np.int64)
    remainder = exact - quota
    for i in sorted(range(len(classes)), key=lambda i: (-remainder[i], classes[i]))[:total - quota.sum()]:
        quota[i] += 1
    empty = classes[quota == 0]
    if len(empty):
        raise StratificationError(f"classes {empty.tolist()} receive no examples at fraction {fraction}")
    chosen = []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(labels == cls)
        gen = rngmod.stream(seed, rngmod.PROBE, int(cls))
        chosen.append(members[gen.permutation(len(members))[:q]])
    return np.sort(np.concatenate(chosen))


def train_test_split(labels, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Class-stratified held-out split; returns (train, test) index arrays."""
    test = stratified_subsample(labels, test_fraction, seed)
    train = np.setdiff1d(np.arange(len(labels)), test)
    if len(train) == 0:
        raise StratificationError("held-out split leaves no training examples")
    return train, test


# --------------------------------------------------------------------- probe
def _cross_entropy(logits: T.Tensor, onehot: np.ndarray) -> T.Tensor:
    probs = T.softmax_temp(logits, 1.0)
    return -(T.log(probs, floor=1e-12) * onehot).sum(axis=1).mean()


def train_probe(train: FeatureSet, fraction: float = 1.0, epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR,
                seed: int = 0, num_classes: int | None = None, momentum: float = PROBE_MOMENTUM) -> LinearProbe:
    """Full-batch gradient descent with heavy-ball momentum on a zero-initialized
    linear layer.  Features are standardized with training-set statistics."""
    if epochs < 1 or lr <= 0:
        raise ParameterError(f"need epochs >= 1 and lr > 0, got {epochs}, {lr}")
    data = train.subset(stratified_subsample(train.labels, fraction, seed))
    k = num_classes or train.num_classes
    if k < 2:
        raise StratificationError("a probe needs at least two classes")
    mean = data.features.mean(axis=0)
    scale = data.features.std(axis=0)
    scale = np.where(scale > 1e-6, scale, 1.0).astype(np.float32)
    x = T.tensor((data.features - mean) / scale)
    onehot = np.eye(k, dtype=np.float32)[data.labels]
    w = T.parameter(np.zeros((x.shape[1], k)))
    b = T.parameter(np.zeros(k))
    vel = [np.zeros_like(w.data), np.zeros_like(b.data)]
    for _ in range(epochs):
        w.grad = b.grad = None
        loss = _cross_entropy(T.matmul(x, w) + b, onehot)
        loss.backward()
        for p, v in zip((w, b), vel):
            v *= np.float32(momentum)
            v += p.grad
            p.data = p.data - np.float32(lr) * v
    with T.no_grad():
        final = float(_cross_entropy(T.matmul(x, w) + b, onehot).data)
    return LinearProbe(w.data, b.data, mean.astype(np.float32), scale, final)


def topk_accuracy(logits, labels, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` largest logits; ties go
    to the lower class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be M x C, got {logits.shape}")
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= logits.shape[1]:
        raise ParameterError(f"k must be an integer in [1, {logits.shape[1]}], got {k}")
    if len(logits) == 0:
        raise ParameterError("no rows to score")
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((order == labels[:, None]).any(axis=1).mean())


def evaluate_probe(probe: LinearProbe, data: FeatureSet) -> ProbeResult:
    """Cross-entropy, acc@1 and acc@5 (acc@min(5, C)) on ``data``."""
    logits = probe.logits(data.features)
    k = logits.shape[1]
    with T.no_grad():
        loss = float(_cross_entropy(T.tensor(logits), np.eye(k, dtype=np.float32)[data.labels]).data)
    return ProbeResult(loss, topk_accuracy(logits, data.labels, 1), topk_accuracy(logits, data.labels, min(5, k)))


# ---------------------------------------------------------------- projection
def random_projection_2d(features, seed: int = 0) -> np.ndarray:
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] < 2:
        raise ShapeError(f"projection needs M x dim features with dim >= 2, got {features.shape}")
    dim = features.shape[1]
    matrix = rngmod.stream(seed, rngmod.PROJECTION, dim).standard_normal((dim, 2)) / math.sqrt(dim)
    return features @ matrix.astype(np.float32)


# ---------------------------------------------------------------------- csv
def write_probe_result(path, method: str, result: ProbeResult) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "loss", "acc1", "acc5"])
        writer.writerow([method, repr(result.loss), repr(result.acc1), repr(result.acc5)])


def write_projection(path, points, labels) -> None:
    points = np.asarray(points)
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "label"])
        for (x, y), label in zip(points, labels):
            writer.writerow([repr(float(x)), repr(float(y)), int(label)])
