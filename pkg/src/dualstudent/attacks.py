"""l-infinity transfer attacks crafted on a proxy and scored on the target."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import ndgrad as nd
from .extraction import Box
from .nets import Mlp, clone
from .ndgrad import ContractError
from .oracle import EXCLUDED, Oracle, one_hot

KINDS = ("fgsm", "bim", "pgd")
SOURCES = ("whitebox_target", "data_proxy", "extracted_student")


@dataclass
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.01
    steps: int = 10
    step_size: float | None = None  # None: epsilon / 4
    targeted: bool = False
    random_start: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is None:
            self.step_size = self.epsilon / 4
        if self.kind != "fgsm" and self.step_size <= 0 and self.epsilon > 0:
            raise ValueError("iterative attacks need a positive step size")

    @property
    def label(self) -> str:
        return f"{self.kind}-{'targeted' if self.targeted else 'untargeted'}"


def _ce_input_grad(proxy: Mlp, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    xn = nd.param(x)
    loss = losses.ce_loss(proxy(xn), one_hot(labels, proxy.out_dim))
    nd.backward(loss)
    return xn.grad


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float, domain: Box) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), domain.lo, domain.hi)


def _signed_step(proxy, x_cur, labels, size, targeted):
    g = np.sign(_ce_input_grad(proxy, x_cur, labels))
    return x_cur - size * g if targeted else x_cur + size * g


def fgsm(proxy: Mlp, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, domain: Box) -> np.ndarray:
    """One signed-gradient step of size epsilon. ``y`` is the true class, or the
    goal class when ``cfg.targeted``."""
    x = np.asarray(x, dtype=np.float64)
    return _project(_signed_step(proxy, x, y, cfg.epsilon, cfg.targeted), x, cfg.epsilon, domain)


def bim(proxy: Mlp, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, domain: Box) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    for _ in range(cfg.steps):
        x_adv = _project(_signed_step(proxy, x_adv, y, cfg.step_size, cfg.targeted), x, cfg.epsilon, domain)
    return x_adv


def pgd(proxy: Mlp, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, domain: Box,
        rng: np.random.Generator | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    if cfg.random_start:
        rng = np.random.default_rng(0) if rng is None else rng
        x_adv = _project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon, domain)
    for _ in range(cfg.steps):
        x_adv = _project(_signed_step(proxy, x_adv, y, cfg.step_size, cfg.targeted), x, cfg.epsilon, domain)
    return x_adv


def run_attack(proxy: Mlp, x, y, cfg: AttackConfig, domain: Box, rng=None) -> np.ndarray:
    proxy = clone(proxy)
    if cfg.kind == "fgsm":
        out = fgsm(proxy, x, y, cfg, domain)
    elif cfg.kind == "bim":
        out = bim(proxy, x, y, cfg, domain)
    else:
        out = pgd(proxy, x, y, cfg, domain, rng)
    assert np.all(np.abs(out - x) <= cfg.epsilon + 1e-12), "attack left the epsilon ball"
    assert np.all((out >= domain.lo) & (out <= domain.hi)), "attack left the data domain"
    return out


@dataclass
class FoolingReport:
    source: str
    attack: str
    epsilon: float
    n_evaluated: int
    n_success: int
    success: np.ndarray = field(repr=False, default=None)

    @property
    def success_rate(self) -> float:
        return self.n_success / self.n_evaluated


def draw_goal_classes(y: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform goal class per sample, never the sample's own class."""
    shift = rng.integers(1, n_classes, size=len(y))
    return (np.asarray(y) + shift) % n_classes


def transfer_eval(target_oracle: Oracle, proxy: Mlp, attack: AttackConfig, test_x: np.ndarray,
                  test_y: np.ndarray, domain: Box, *, source: str = "extracted_student",
                  seed: int = 0) -> FoolingReport:
    """Craft adversarial inputs on ``proxy``; count how often the target falls for them.

    Untargeted: eligible samples are those the target gets right; success is
    any prediction other than the true class. Targeted: a goal class != true
    class is drawn per sample; eligible samples are those the target does
    not already assign to the goal; success is hitting the goal.
    """
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}")
    rng = np.random.default_rng(seed)
    test_x = np.asarray(test_x, dtype=np.float64)
    test_y = np.asarray(test_y)
    clean = target_oracle.query_labels(test_x, EXCLUDED)
    n_classes = target_oracle.n_classes
    if attack.targeted:
        goal = draw_goal_classes(test_y, n_classes, rng)
        eligible = clean != goal
        labels = goal
    else:
        eligible = clean == test_y
        labels = test_y
    if not np.any(eligible):
        raise ContractError("no eligible samples for this attack")
    x, lab = test_x[eligible], labels[eligible]
    x_adv = run_attack(proxy, x, lab, attack, domain, rng)
    after = target_oracle.query_labels(x_adv, EXCLUDED)
    success = after == lab if attack.targeted else after != lab
    return FoolingReport(source, attack.label, attack.epsilon, int(eligible.sum()), int(success.sum()), success)
