"""Black-box access to a target classifier, with exact per-sample query accounting."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ndgrad import ContractError, softmax_array

PHASES = ("student_train", "generator_grad_est", "eval_excluded")
EXCLUDED = "eval_excluded"
LABEL_MODES = ("soft", "hard")


class BudgetExhausted(RuntimeError):
    def __init__(self, requested: int, snapshot: dict):
        self.requested = requested
        self.snapshot = snapshot
        super().__init__(
            f"query of {requested} samples refused: {snapshot['total_samples']} of "
            f"{snapshot['budget']} budgeted samples already used"
        )


@dataclass
class QueryLedger:
    total_samples: int = 0
    by_phase: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    budget: int | None = None

    def __post_init__(self):
        self._lock = threading.Lock()

    def charge(self, n: int, phase: str) -> None:
        if phase not in PHASES:
            raise ContractError(f"unknown query phase {phase!r}")
        with self._lock:
            if phase != EXCLUDED:
                if self.budget is not None and self.total_samples + n > self.budget:
                    raise BudgetExhausted(n, self._snapshot())
                self.total_samples += n
            self.by_phase[phase] += n

    def remaining(self) -> int | None:
        return None if self.budget is None else self.budget - self.total_samples

    def _snapshot(self) -> dict:
        return {"total_samples": self.total_samples, "by_phase": dict(self.by_phase), "budget": self.budget}

    def snapshot(self) -> dict:
        with self._lock:
            return self._snapshot()


def argmax_rows(a: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(a, axis=1)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class Oracle:
    """Query interface to a target model.

    The target is held only as a callable mapping inputs to logits; nothing
    here returns its parameters or gradients. Returned arrays are fresh copies.
    """

    def __init__(self, logits_fn: Callable[[np.ndarray], np.ndarray], mode: str = "soft",
                 budget: int | None = None, n_classes: int | None = None):
        if mode not in LABEL_MODES:
            raise ContractError(f"label mode must be one of {LABEL_MODES}, got {mode!r}")
        self._logits_fn = logits_fn
        self.mode = mode
        self.ledger = QueryLedger(budget=budget)
        self.n_classes = n_classes

    @classmethod
    def from_mlp(cls, net, mode: str = "soft", budget: int | None = None) -> "Oracle":
        predict = net.predict
        return cls(lambda x: predict(x), mode=mode, budget=budget, n_classes=net.out_dim)

    def _probs(self, x: np.ndarray) -> np.ndarray:
        p = softmax_array(np.asarray(self._logits_fn(np.asarray(x, dtype=np.float64)), dtype=np.float64))
        if self.n_classes is None:
            self.n_classes = p.shape[1]
        return p

    def query(self, x: np.ndarray, phase: str = "student_train") -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ContractError(f"queries are batches of shape (b, d), got {x.shape}")
        self.ledger.charge(len(x), phase)
        p = self._probs(x)
        if self.mode == "hard":
            return one_hot(argmax_rows(p), p.shape[1])
        return p

    def query_labels(self, x: np.ndarray, phase: str = "student_train") -> np.ndarray:
        """Class ids only; what an attacker sees when the class count is unknown."""
        return argmax_rows(self.query(x, phase))


def eval_agreement(oracle: Oracle, net, xs: np.ndarray, class_map=None) -> float:
    """Fraction of ``xs`` where the network's argmax equals the target's.

    ``class_map`` translates student output indices to raw target class ids
    when the student head was grown on the fly.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) == 0:
        raise ContractError("agreement over an empty sample set")
    target = oracle.query_labels(xs, phase=EXCLUDED)
    pred = argmax_rows(net.predict(xs))
    if class_map is not None:
        pred = class_map.to_raw(pred)
    return float(np.mean(pred == target))
