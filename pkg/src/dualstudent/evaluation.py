"""Measurements: gradient fidelity, generator class balance, agreement
curves and queries-to-accuracy tables."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses
from . import ndgrad as nd
from .extraction import ClassMap, TrainState, ensemble_predict, fd_gradient
from .nets import Mlp, clone
from .ndgrad import ContractError
from .oracle import EXCLUDED, Oracle, argmax_rows, eval_agreement
from .seeding import substream

ZERO_GRAD = 1e-12
NORMALIZATIONS = ("gradient", "loss")


@dataclass
class MetricsRow:
    epoch: int
    queries: int
    agreement_s1: float
    agreement_s2: float
    agreement_ensemble: float
    grad_fidelity_ds: float
    grad_fidelity_fd: float
    class_histogram: list
    tv_from_uniform: float

    @staticmethod
    def header(n_classes: int) -> list[str]:
        return (["epoch", "queries", "agreement_s1", "agreement_s2", "agreement_ensemble",
                 "grad_fidelity_ds", "grad_fidelity_fd"]
                + [f"class_hist_{i}" for i in range(n_classes)] + ["tv_from_uniform"])

    def values(self) -> list:
        return [self.epoch, self.queries, self.agreement_s1, self.agreement_s2, self.agreement_ensemble,
                self.grad_fidelity_ds, self.grad_fidelity_fd, *self.class_histogram, self.tv_from_uniform]

    @classmethod
    def from_record(cls, rec: dict) -> "MetricsRow":
        n = sum(1 for k in rec if k.startswith("class_hist_"))
        return cls(
            epoch=int(rec["epoch"]),
            queries=int(rec["queries"]),
            agreement_s1=float(rec["agreement_s1"]),
            agreement_s2=float(rec["agreement_s2"]),
            agreement_ensemble=float(rec["agreement_ensemble"]),
            grad_fidelity_ds=float(rec["grad_fidelity_ds"]),
            grad_fidelity_fd=float(rec["grad_fidelity_fd"]),
            class_histogram=[float(rec[f"class_hist_{i}"]) for i in range(n)],
            tv_from_uniform=float(rec["tv_from_uniform"]),
        )


@dataclass
class GradFidelityReport:
    distances: np.ndarray
    n_excluded: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.distances)) if len(self.distances) else math.nan

    @property
    def median(self) -> float:
        return float(np.median(self.distances)) if len(self.distances) else math.nan


@dataclass
class FdEstimator:
    """Black-box side of the fidelity comparison: central differences along
    ``directions`` random unit vectors per sample."""

    student: Mlp
    step: float = 1e-3
    directions: int = 1
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def pair_loss(kind: str, a_logits, b_logits) -> nd.Node:
    """Per-sample L_G between two classifiers' logits, shape (b, 1).

    ``l1`` compares probabilities and differentiates through both sides. The
    label-style losses take the argmax of ``b`` as the label, which carries
    no gradient.
    """
    if kind == "l1":
        return losses.l1_per_sample(nd.softmax(a_logits), nd.softmax(b_logits))
    b = b_logits.value if isinstance(b_logits, nd.Node) else np.asarray(b_logits)
    if kind == "kl":
        return losses.kl_per_sample(a_logits, nd.softmax_array(b))
    return losses.per_sample_loss(kind, a_logits, b)


def _input_grads(kind: str, a: Mlp, b: Mlp, xs: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    # samples do not interact, so the gradient of the summed loss holds every
    # per-sample input gradient at once; clones keep parameter grads off the
    # caller's networks
    a, b = clone(a), clone(b)
    x = nd.param(xs)
    per = nd.mul(pair_loss(kind, a(x), b(x)), scale)
    nd.backward(nd.sum_(per))
    return per.value[:, 0].copy(), x.grad.copy()


def fidelity_distances(g_true: np.ndarray, g_est: np.ndarray, normalize: str = "gradient",
                       loss_true: np.ndarray | None = None, loss_est: np.ndarray | None = None
                       ) -> GradFidelityReport:
    """Per-row ||n(g_true) - n(g_est)||_2.

    ``gradient`` divides each gradient by its own norm; ``loss`` divides by
    the magnitude of the loss value it came from. Rows whose divisor falls
    below 1e-12 on either side are dropped and counted.
    """
    if normalize == "gradient":
        d_true = np.linalg.norm(g_true, axis=1)
        d_est = np.linalg.norm(g_est, axis=1)
    elif normalize == "loss":
        d_true = np.abs(loss_true)
        d_est = np.abs(loss_est)
    else:
        raise ValueError(f"normalize must be one of {NORMALIZATIONS}")
    ok = (d_true >= ZERO_GRAD) & (d_est >= ZERO_GRAD)
    if normalize == "loss":
        ok &= (np.linalg.norm(g_true, axis=1) >= ZERO_GRAD) & (np.linalg.norm(g_est, axis=1) >= ZERO_GRAD)
    diff = g_true[ok] / d_true[ok, None] - g_est[ok] / d_est[ok, None]
    return GradFidelityReport(np.linalg.norm(diff, axis=1), int(np.sum(~ok)))


def grad_fidelity(whitebox_target: Mlp, surrogate, xs: np.ndarray, loss: str = "l1", *,
                  normalize: str = "gradient", scale: float = 1.0) -> GradFidelityReport:
    """Distance between the white-box input gradient of L_G(S1, T) and a
    black-box estimate of it.

    ``surrogate`` is either a pair ``(s1, s2)`` (estimate: the gradient of
    L_G(S1, S2)) or an :class:`FdEstimator` (estimate: central differences
    of L_G(S, T) using only target outputs).
    """
    xs = np.asarray(xs, dtype=np.float64)
    if isinstance(surrogate, FdEstimator):
        s1 = surrogate.student
        loss_true, g_true = _input_grads(loss, s1, whitebox_target, xs, scale)

        def black_box(x):
            t_logits = whitebox_target.predict(x)
            return scale * pair_loss(loss, nd.const(s1.predict(x)), nd.const(t_logits)).value[:, 0]

        g_est = fd_gradient(black_box, xs, surrogate.step, surrogate.directions, surrogate.rng)
        loss_est = loss_true
    else:
        s1, s2 = surrogate
        loss_true, g_true = _input_grads(loss, s1, whitebox_target, xs, scale)
        loss_est, g_est = _input_grads(loss, s1, s2, xs, scale)
    return fidelity_distances(g_true, g_est, normalize, loss_true, loss_est)


@dataclass
class ClassDistribution:
    histogram: np.ndarray
    max_share: float
    min_share: float
    tv_from_uniform: float


def histogram_stats(labels: np.ndarray, n_classes: int) -> ClassDistribution:
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(np.float64)
    hist = counts / counts.sum()
    tv = 0.5 * float(np.abs(hist - 1.0 / n_classes).sum())
    return ClassDistribution(hist, float(hist.max()), float(hist.min()), tv)


def class_distribution(generator: Mlp, oracle: Oracle, n: int, rng: np.random.Generator | None = None,
                       n_classes: int | None = None) -> ClassDistribution:
    """Target's class frequencies over ``n`` generated samples (not budgeted)."""
    if n < 1:
        raise ContractError("need at least one sample")
    rng = np.random.default_rng(0) if rng is None else rng
    z = rng.uniform(0.0, 1.0, size=(n, generator.in_dim))
    labels = oracle.query_labels(generator.predict(z), phase=EXCLUDED)
    n_classes = n_classes or oracle.n_classes
    return histogram_stats(labels, n_classes)


def queries_to_accuracy(history: Sequence[MetricsRow], thresholds: Sequence[float],
                        key: str = "agreement_ensemble") -> list[tuple[float, Optional[int]]]:
    """First logged query count at which ``key`` reaches each threshold (None if never)."""
    if not history:
        raise ContractError("empty metrics history")
    qs = [row.queries for row in history]
    if any(b < a for a, b in zip(qs, qs[1:])):
        raise ContractError("metrics history is not sorted by queries")
    table = []
    for th in thresholds:
        hit = next((row.queries for row in history if getattr(row, key) >= th), None)
        table.append((th, hit))
    return table


def _agreement_with(oracle: Oracle, probs: np.ndarray, xs: np.ndarray, class_map: ClassMap | None) -> float:
    target = oracle.query_labels(xs, phase=EXCLUDED)
    pred = argmax_rows(probs)
    if class_map is not None:
        pred = class_map.to_raw(pred)
    return float(np.mean(pred == target))


@dataclass
class Evaluator:
    """Metrics monitor for extraction runs. Holds the white-box target, so
    it sits outside the extraction code path and only observes it."""

    target: Mlp
    oracle: Oracle
    test_x: np.ndarray
    loss: str = "l1"
    n_generated: int = 10_000
    n_grad: int = 256
    fd_step: float = 1e-3
    normalize: str = "gradient"
    seed: int = 0
    log: Optional[Callable[[MetricsRow], None]] = None

    def __post_init__(self):
        self.rng = substream(self.seed, "eval")

    def __call__(self, state: TrainState) -> MetricsRow:
        cm = state.class_map
        s = state.students
        a1 = eval_agreement(self.oracle, s[0], self.test_x, cm)
        if len(s) > 1:
            a2 = eval_agreement(self.oracle, s[1], self.test_x, cm)
            ens = _agreement_with(self.oracle, ensemble_predict(s[0], s[1], self.test_x), self.test_x, cm)
        else:
            a2, ens = math.nan, a1

        g_ds = g_fd = math.nan
        z = self.rng.uniform(0.0, 1.0, size=(self.n_grad, state.generator.in_dim))
        xs = state.generator.predict(z)
        if cm is None:
            live = state.live_students
            fd = FdEstimator(live[0], self.fd_step, 1, self.rng)
            g_fd = grad_fidelity(self.target, fd, xs, self.loss, normalize=self.normalize).mean
            if len(live) > 1:
                g_ds = grad_fidelity(self.target, (live[0], live[1]), xs, self.loss,
                                     normalize=self.normalize).mean

        dist = class_distribution(state.generator, self.oracle, self.n_generated, self.rng,
                                  n_classes=self.target.out_dim)
        row = MetricsRow(state.epoch, state.queries, a1, a2, ens, g_ds, g_fd,
                         dist.histogram.tolist(), dist.tv_from_uniform)
        if self.log is not None:
            self.log(row)
        return row
