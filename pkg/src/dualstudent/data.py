"""Desk-scale datasets and supervised target training."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses
from . import ndgrad as nd
from .nets import Mlp, SgdState, init_mlp, sgd_step
from .oracle import one_hot
from .seeding import subseed, substream

SOURCES = ("synthetic_blobs", "synthetic_spirals", "csv")


class DataError(ValueError):
    pass


class TargetAccuracyError(RuntimeError):
    def __init__(self, accuracy: float, floor: float):
        self.accuracy = accuracy
        self.floor = floor
        super().__init__(f"target test accuracy {accuracy:.4f} is below the floor {floor:.4f}")


@dataclass
class DatasetSpec:
    source: str = "synthetic_blobs"
    n_classes: int = 4
    dim: int = 8
    n_train: int = 4000
    n_test: int = 2000
    noise: float = 0.3
    separation: float = 1.0
    clusters_per_class: int = 6
    csv_path: Optional[str] = None

    def validate(self) -> None:
        if self.source not in SOURCES:
            raise DataError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.clusters_per_class < 1:
            raise DataError("clusters_per_class must be >= 1")
        if self.n_classes < 2:
            raise DataError("need at least two classes")
        if self.dim < 2:
            raise DataError("need at least two input dimensions")
        if self.source == "csv" and not self.csv_path:
            raise DataError("csv source needs csv_path")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    test: Split
    n_classes: int
    lo: np.ndarray  # per-feature affine map applied to raw features: (raw - lo) / (hi - lo)
    hi: np.ndarray
    centers: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.train.x.shape[1]


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n) % n_classes


def _rescale(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (raw - lo) / span, lo, lo + span


def make_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Build train/test splits with features rescaled into [0, 1].

    Blobs: ``clusters_per_class`` Gaussian clusters per class, centres spread
    with std ``separation``. Spirals: interleaved 2-D arms embedded in ``dim``
    dimensions by a random orthonormal map. Synthetic sets draw train and
    test points independently, so the splits are disjoint by construction.
    """
    spec.validate()
    if spec.source == "csv":
        return load_csv(spec)
    rng = substream(seed, "dataset")
    n = spec.n_train + spec.n_test
    y = np.concatenate([_balanced_labels(spec.n_train, spec.n_classes),
                        _balanced_labels(spec.n_test, spec.n_classes)])
    centers = None
    if spec.source == "synthetic_blobs":
        k = spec.clusters_per_class
        centers = rng.normal(0.0, spec.separation, size=(spec.n_classes * k, spec.dim))
        cluster = y * k + rng.integers(0, k, size=n)
        raw = centers[cluster] + rng.normal(0.0, spec.noise, size=(n, spec.dim))
    else:
        t = rng.uniform(0.0, 1.0, size=n)
        angle = 3.0 * np.pi * t + 2.0 * np.pi * y / spec.n_classes
        radius = spec.separation * (0.2 + t)
        plane = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, 2)))
        raw = plane @ basis.T + rng.normal(0.0, spec.noise, size=(n, spec.dim))
    x, lo, hi = _rescale(raw)
    if centers is not None:
        centers = (centers - lo) / (hi - lo)
    k = spec.n_train
    return Dataset(Split(x[:k], y[:k]), Split(x[k:], y[k:]), spec.n_classes, lo, hi, centers)


def load_csv(spec: DatasetSpec) -> Dataset:
    """Rows of ``dim`` floats then an integer label. The first
    ``n_train`` rows train, the next ``n_test`` rows test."""
    rows, labels = [], []
    path = Path(spec.csv_path)
    with path.open(newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or rec[0].startswith("#"):
                continue
            if len(rec) != spec.dim + 1:
                raise DataError(f"{path}:{lineno}: expected {spec.dim + 1} fields, got {len(rec)}")
            try:
                feats = [float(v) for v in rec[:-1]]
                label = int(rec[-1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= label < spec.n_classes:
                raise DataError(f"{path}:{lineno}: label {label} outside [0, {spec.n_classes})")
            rows.append(feats)
            labels.append(label)
    need = spec.n_train + spec.n_test
    if len(rows) < need:
        raise DataError(f"{path}: {len(rows)} rows, need {need}")
    raw = np.array(rows[:need])
    y = np.array(labels[:need])
    x, lo, hi = _rescale(raw)
    k = spec.n_train
    return Dataset(Split(x[:k], y[:k]), Split(x[k:], y[k:]), spec.n_classes, lo, hi)


def accuracy(net: Mlp, split: Split) -> float:
    return float(np.mean(np.argmax(net.predict(split.x), axis=1) == split.y))


@dataclass
class TargetReport:
    train_accuracy: float
    test_accuracy: float
    epochs: int


def train_classifier(split: Split, n_classes: int, hidden=(64, 64), epochs: int = 30, seed: int = 0,
                     lr: float = 0.05, batch: int = 64, stream: str = "target") -> Mlp:
    """Plain minibatch cross-entropy training with SGD + momentum."""
    net = init_mlp([split.x.shape[1], *hidden, n_classes], "relu", seed=subseed(seed, stream))
    opt = SgdState(lr, 0.9, 5e-4)
    rng = substream(seed, stream + "_batches")
    targets = one_hot(split.y, n_classes)
    for _ in range(epochs):
        order = rng.permutation(len(split))
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            nd.backward(losses.ce_loss(net(split.x[idx]), targets[idx]))
            sgd_step(net, opt)
    return net


def train_target(data: Dataset, hidden=(64, 64), epochs: int = 30, seed: int = 0,
                 floor: float | None = 0.9) -> tuple[Mlp, TargetReport]:
    net = train_classifier(data.train, data.n_classes, hidden, epochs, seed)
    report = TargetReport(accuracy(net, data.train), accuracy(net, data.test), epochs)
    if floor is not None and report.test_accuracy < floor:
        raise TargetAccuracyError(report.test_accuracy, floor)
    return net, report
