"""Data-free extraction loops: dual students, forward-difference baseline,
unknown class count, and fine-tuning from a pretrained student."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import losses
from . import ndgrad as nd
from .nets import EmaState, Mlp, SgdState, clone, ema_apply, ema_update, grow_head, init_mlp, sgd_step
from .ndgrad import ContractError, softmax_array
from .oracle import BudgetExhausted, Oracle, QueryLedger, eval_agreement, one_hot
from .seeding import subseed, substream

METHODS = ("dual_students", "dfme_fd")
# resuming from trained weights: the from-scratch soft-label rate knocks a
# matching student off the target, a third of it does not
FINETUNE_LR = {"soft": 0.1, "hard": 0.05}
BOUND_TOL = 1e-9


class ConfigError(ValueError):
    pass


class BoundViolation(AssertionError):
    pass


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def unit(cls, dim: int) -> "Box":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def span(self) -> np.ndarray:
        return self.hi - self.lo


@dataclass
class ExtractionConfig:
    method: str = "dual_students"
    epochs: Optional[int] = None  # None: derived from query_budget
    generator_iters: int = 1
    student_iters: int = 5
    batch: int = 256
    latent_dim: int = 16
    lr_generator: float = 1e-4
    lr_student: Optional[float] = None  # None: 0.3 soft, 0.05 hard
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.9
    label_mode: str = "soft"
    student_loss: Optional[str] = None  # None: l1 soft, ce hard
    generator_loss: str = "l1"
    margin: float = 1.0
    fd_directions: int = 1
    fd_step: float = 1e-3
    query_budget: Optional[int] = 200_000
    seed: int = 0
    unknown_classes: bool = False
    max_classes: int = 100
    student_hidden: tuple = (32, 32)
    generator_hidden: tuple = (64, 64)
    eval_fraction: float = 0.05
    check_bound: bool = False

    def resolved(self) -> "ExtractionConfig":
        cfg = dataclasses.replace(self)
        if cfg.lr_student is None:
            cfg.lr_student = 0.3 if cfg.label_mode == "soft" else 0.05
        if cfg.student_loss is None:
            cfg.student_loss = "l1" if cfg.label_mode == "soft" else "ce"
        cfg.student_hidden = tuple(int(h) for h in cfg.student_hidden)
        cfg.generator_hidden = tuple(int(h) for h in cfg.generator_hidden)
        cfg.validate()
        if cfg.epochs is None:
            if cfg.query_budget is None:
                raise ConfigError("either epochs or query_budget must be set")
            cfg.epochs = cfg.query_budget // cfg.queries_per_epoch
        return cfg

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("generator_iters", "student_iters", "batch", "latent_dim", "fd_directions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.label_mode not in ("soft", "hard"):
            raise ConfigError(f"label_mode must be soft or hard, got {self.label_mode!r}")
        for name in ("student_loss", "generator_loss"):
            kind = getattr(self, name)
            if kind is not None and kind not in losses.LOSS_KINDS:
                raise ConfigError(f"{name} must be one of {losses.LOSS_KINDS}, got {kind!r}")
        if self.method == "dual_students" and self.generator_loss != "l1":
            raise ConfigError("dual students uses the l1 generator loss only")
        if self.label_mode == "hard" and self.student_loss in ("l1", "kl") and self.method == "dfme_fd":
            raise ConfigError("the forward-difference baseline needs ce or multi_margin on hard labels")
        if self.unknown_classes and self.label_mode != "hard":
            raise ConfigError("unknown class count is only defined for hard labels")
        if self.fd_step <= 0:
            raise ConfigError("fd_step must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.query_budget is not None and self.query_budget < 0:
            raise ConfigError("query_budget must be non-negative")

    @property
    def queries_per_epoch(self) -> int:
        if self.method == "dual_students":
            return self.student_iters * self.batch
        return (self.student_iters + 2 * self.fd_directions * self.generator_iters) * self.batch

    def expected_queries(self, epochs: int | None = None) -> int:
        epochs = self.epochs if epochs is None else epochs
        return epochs * self.queries_per_epoch


@dataclass
class ClassMap:
    """Raw target class ids in first-seen order; index = student output unit."""

    seen: list = field(default_factory=list)
    min_width: int = 2

    @property
    def capacity(self) -> int:
        return max(self.min_width, len(self.seen))

    def index(self, raw: int) -> int:
        return self.seen.index(raw)

    def to_raw(self, idx) -> np.ndarray:
        """Output indices to raw ids; units with no class yet map to -1."""
        table = np.array(self.seen + [-1] * (self.capacity - len(self.seen)), dtype=np.int64)
        return table[np.asarray(idx)]

    def observe(self, labels) -> list:
        """Record unseen ids in order of appearance; return the new ones."""
        new = []
        for raw in np.asarray(labels).tolist():
            if raw not in self.seen:
                self.seen.append(raw)
                new.append(raw)
        return new


@dataclass
class TrainState:
    """What a metrics monitor gets to look at, mid-run."""

    epoch: int
    queries: int
    students: list  # EMA views, the networks whose accuracy is reported
    live_students: list
    generator: Mlp
    class_map: Optional[ClassMap] = None


@dataclass
class RunResult:
    students: tuple
    generator: Mlp
    ledger: QueryLedger
    metrics_history: list
    live_students: tuple = ()
    truncated: bool = False
    epochs_run: int = 0
    class_map: Optional[ClassMap] = None
    config: Optional[ExtractionConfig] = None
    bound_checks: int = 0

    @property
    def s1(self) -> Mlp:
        return self.students[0]


Monitor = Callable[[TrainState], object]


def ensemble_predict(s1: Mlp, s2: Mlp, x: np.ndarray) -> np.ndarray:
    """Mean of the two students' softmax outputs."""
    if s1.out_dim != s2.out_dim:
        raise ContractError(f"students have head widths {s1.out_dim} and {s2.out_dim}")
    return (softmax_array(s1.predict(x)) + softmax_array(s2.predict(x))) / 2


def select_proxy(s1: Mlp, s2: Mlp, oracle: Oracle, probe_x: np.ndarray) -> Mlp:
    """The student agreeing more often with the target on ``probe_x`` (ties: s1)."""
    if s1.out_dim != s2.out_dim:
        raise ContractError(f"students have head widths {s1.out_dim} and {s2.out_dim}")
    a1 = eval_agreement(oracle, s1, probe_x)
    a2 = eval_agreement(oracle, s2, probe_x)
    return s2 if a2 > a1 else s1


def fd_gradient(loss_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float,
                directions: int, rng: np.random.Generator) -> np.ndarray:
    """Central-difference estimate of per-sample input gradients.

    ``loss_fn`` maps a (b, d) batch to b per-sample losses. Each sample gets
    its own random unit directions u; the estimate sums
    (L(x + h u) - L(x - h u)) / (2h) * u over ``directions`` draws.
    """
    est = np.zeros_like(x)
    for _ in range(directions):
        u = rng.normal(size=x.shape)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        up = loss_fn(x + step * u)
        down = loss_fn(x - step * u)
        est += ((up - down) / (2 * step))[:, None] * u
    return est


def _latents(rng: np.random.Generator, cfg: ExtractionConfig) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(cfg.batch, cfg.latent_dim))


def make_generator(cfg: ExtractionConfig, domain: Box, seed: int) -> Mlp:
    dims = [cfg.latent_dim, *cfg.generator_hidden, domain.dim]
    return init_mlp(dims, "relu", seed=seed, head="bounded", lo=domain.lo, hi=domain.hi, norm=True)


def make_student(cfg: ExtractionConfig, in_dim: int, n_classes: int, seed: int) -> Mlp:
    return init_mlp([in_dim, *cfg.student_hidden, n_classes], "relu", seed=seed)


def _l1_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b).sum(axis=1)


class _Loop:
    """Shared bookkeeping for one extraction run."""

    def __init__(self, cfg, oracle, students, generator, monitor, reference):
        self.cfg = cfg
        self.oracle = oracle
        self.students = list(students)
        self.generator = generator
        self.monitor = monitor
        self.reference = reference
        self.student_opts = [SgdState(cfg.lr_student, cfg.momentum, cfg.weight_decay) for _ in students]
        self.emas = [EmaState.track(s, cfg.ema_decay) for s in students]
        self.gen_opt = SgdState(cfg.lr_generator, cfg.momentum, cfg.weight_decay)
        self.latent_rng = substream(cfg.seed, "latents")
        self.history: list = []
        self.class_map: Optional[ClassMap] = None
        self.bound_checks = 0
        self.epoch = 0
        total = cfg.query_budget if cfg.query_budget is not None else cfg.expected_queries()
        self.interval = max(1, int(round(total * cfg.eval_fraction)))
        self.next_eval = self.interval

    @property
    def queries(self) -> int:
        return self.oracle.ledger.total_samples

    def ema_views(self) -> list:
        return [ema_apply(e, s) for e, s in zip(self.emas, self.students)]

    def record(self) -> None:
        if self.monitor is None:
            return
        state = TrainState(self.epoch, self.queries, self.ema_views(), list(self.students),
                           self.generator, self.class_map)
        self.history.append(self.monitor(state))

    def maybe_record(self) -> None:
        if self.queries >= self.next_eval:
            self.record()
            while self.next_eval <= self.queries:
                self.next_eval += self.interval

    def check_bound(self, x: np.ndarray, t: np.ndarray | None) -> None:
        """Per-sample l1(S1,S2) <= l1(S1,T) + l1(S2,T) on a generated batch."""
        if not self.cfg.check_bound or len(self.students) < 2:
            return
        if t is None:
            if self.reference is None:
                return
            t = self.reference(x)
        p1 = softmax_array(self.students[0].predict(x))
        p2 = softmax_array(self.students[1].predict(x))
        lhs = _l1_rows(p1, p2)
        rhs = _l1_rows(p1, t) + _l1_rows(p2, t)
        self.bound_checks += 1
        worst = float(np.max(lhs - rhs))
        if worst > BOUND_TOL:
            raise BoundViolation(f"triangle bound violated by {worst:.3e} at epoch {self.epoch}")

    def student_targets(self, x: np.ndarray) -> np.ndarray:
        return self.oracle.query(x, "student_train")

    def student_step(self) -> None:
        cfg = self.cfg
        x = self.generator.predict(_latents(self.latent_rng, cfg))
        t = self.student_targets(x)
        self.check_bound(x, t)
        for net, opt, ema in zip(self.students, self.student_opts, self.emas):
            loss = losses.student_loss(cfg.student_loss, net(x), t, cfg.margin)
            nd.backward(loss)
            sgd_step(net, opt)
            ema_update(ema, net)
        self.maybe_record()

    def generator_step_ds(self) -> None:
        z = _latents(self.latent_rng, self.cfg)
        x = self.generator(z)
        p1 = nd.softmax(self.students[0](x))
        p2 = nd.softmax(self.students[1](x))
        nd.backward(losses.generator_loss_ds(p1, p2))
        sgd_step(self.generator, self.gen_opt)
        for s in self.students:
            nd.zero_grads(s.parameters())
        self.check_bound(x.value, None)

    def result(self, truncated: bool) -> RunResult:
        return RunResult(
            students=tuple(self.ema_views()),
            generator=self.generator,
            ledger=self.oracle.ledger,
            metrics_history=self.history,
            live_students=tuple(self.students),
            truncated=truncated,
            epochs_run=self.epoch,
            class_map=self.class_map,
            config=self.cfg,
            bound_checks=self.bound_checks,
        )


def _check_arithmetic(loop: _Loop, truncated: bool) -> None:
    if truncated:
        return
    expected = loop.cfg.expected_queries(loop.epoch)
    if loop.queries != expected:
        raise RuntimeError(f"ledger holds {loop.queries} queries, loop arithmetic says {expected}")


def _default_networks(cfg, oracle, domain, n_students, students, generator, n_classes=None):
    if n_classes is None:
        n_classes = oracle.n_classes
    if n_classes is None:
        raise ContractError("oracle does not declare its class count")
    if students is None:
        names = ("init_s1", "init_s2")[:n_students]
        students = [make_student(cfg, domain.dim, n_classes, subseed(cfg.seed, n)) for n in names]
    if generator is None:
        generator = make_generator(cfg, domain, subseed(cfg.seed, "init_g"))
    return list(students), generator


def _run_epochs(loop: _Loop, generator_step: Callable[[], None]) -> bool:
    cfg = loop.cfg
    loop.record()
    truncated = False
    try:
        for _ in range(cfg.epochs):
            for _ in range(cfg.generator_iters):
                generator_step()
            for _ in range(cfg.student_iters):
                loop.student_step()
            loop.epoch += 1
    except BudgetExhausted:
        truncated = True
    if loop.history and loop.monitor is not None and loop.history[-1].queries != loop.queries:
        loop.record()
    _check_arithmetic(loop, truncated)
    return truncated


def train_dual_students(cfg: ExtractionConfig, oracle: Oracle, domain: Box, *,
                        students=None, generator=None, monitor: Monitor | None = None,
                        reference: Callable | None = None) -> RunResult:
    """Alternate generator steps that maximise student disagreement (no
    queries) with student steps that fit the target's answers.

    ``students``/``generator`` override the seeded initial networks.
    ``reference`` is a white-box probability function used only by the
    debug bound check on generator batches.
    """
    cfg = cfg.resolved()
    if cfg.method != "dual_students":
        raise ConfigError("train_dual_students needs method=dual_students")
    if cfg.unknown_classes:
        return train_unknown_classes(cfg, oracle, domain, monitor=monitor, reference=reference)
    students, generator = _default_networks(cfg, oracle, domain, 2, students, generator)
    loop = _Loop(cfg, oracle, students, generator, monitor, reference)
    truncated = _run_epochs(loop, loop.generator_step_ds)
    return loop.result(truncated)


def train_dfme_fd(cfg: ExtractionConfig, oracle: Oracle, domain: Box, *,
                  student=None, generator=None, monitor: Monitor | None = None) -> RunResult:
    """Single-student baseline whose generator step estimates the target's
    input gradient by central differences, spending 2*batch queries per
    direction."""
    cfg = cfg.resolved()
    if cfg.method != "dfme_fd":
        raise ConfigError("train_dfme_fd needs method=dfme_fd")
    students, generator = _default_networks(
        cfg, oracle, domain, 1, None if student is None else [student], generator)
    loop = _Loop(cfg, oracle, students, generator, monitor, None)
    fd_rng = substream(cfg.seed, "fd_directions")
    student = students[0]

    def sample_loss(x: np.ndarray) -> np.ndarray:
        t = oracle.query(x, "generator_grad_est")
        return losses.per_sample_loss(cfg.generator_loss, student.predict(x), t, cfg.margin).value[:, 0]

    def generator_step() -> None:
        x = generator(_latents(loop.latent_rng, cfg))
        g = fd_gradient(sample_loss, x.value, cfg.fd_step, cfg.fd_directions, fd_rng)
        # ascend the batch-mean loss: surrogate whose x-gradient is -g / b
        surrogate = nd.sum_(nd.mul(x, -g / cfg.batch))
        nd.backward(surrogate)
        sgd_step(generator, loop.gen_opt)

    truncated = _run_epochs(loop, generator_step)
    return loop.result(truncated)


def train_unknown_classes(cfg: ExtractionConfig, oracle: Oracle, domain: Box, *,
                          monitor: Monitor | None = None, reference: Callable | None = None) -> RunResult:
    """Dual students on hard labels without knowing the class count.

    Students start with two outputs. Each raw class id returned by the target
    is mapped to the next free output in order of first appearance; when the
    map outgrows the head, both heads gain a unit.
    """
    cfg = cfg.resolved()
    if cfg.label_mode != "hard" or not cfg.unknown_classes:
        raise ConfigError("unknown-class training needs hard labels and unknown_classes=true")
    if cfg.method != "dual_students":
        raise ConfigError("unknown-class training runs on dual students")
    class_map = ClassMap()
    students, generator = _default_networks(cfg, oracle, domain, 2, None, None, n_classes=class_map.capacity)
    loop = _Loop(cfg, oracle, students, generator, monitor, reference)
    loop.class_map = class_map
    growth_rng = substream(cfg.seed, "head_growth")

    def targets(x: np.ndarray) -> np.ndarray:
        raw = oracle.query_labels(x, "student_train")
        for _ in class_map.observe(raw):
            if len(class_map.seen) > cfg.max_classes:
                raise ConfigError(f"target exposed more than max_classes={cfg.max_classes} classes")
            while loop.students[0].out_dim < class_map.capacity:
                for net, opt, ema in zip(loop.students, loop.student_opts, loop.emas):
                    grow_head(net, growth_rng, opt, ema)
        idx = np.array([class_map.index(r) for r in raw.tolist()])
        return one_hot(idx, class_map.capacity)

    def check_bound_mapped(x, t):
        # reference probabilities are over raw ids; the bound is checked on hard
        # student targets only, where both sides live in the mapped space
        if t is not None:
            _Loop.check_bound(loop, x, t)

    loop.student_targets = targets
    loop.check_bound = check_bound_mapped
    truncated = _run_epochs(loop, loop.generator_step_ds)
    return loop.result(truncated)


def finetune_budget(full_budget: int, fraction: float = 0.05) -> int:
    return int(full_budget * fraction)


def finetune_with_ds(pretrained_student: Mlp, cfg: ExtractionConfig, oracle: Oracle,
                     domain: Box | None = None, *, monitor: Monitor | None = None) -> RunResult:
    """Resume dual-students training from one pretrained student.

    S1 starts from the pretrained weights; S2 and the generator are fresh.
    The run's reported network is S1 (``result.s1``). An unset student
    learning rate falls back to ``FINETUNE_LR`` rather than the from-scratch one.
    """
    cfg = dataclasses.replace(cfg, method="dual_students", unknown_classes=False)
    if cfg.lr_student is None:
        cfg = dataclasses.replace(cfg, lr_student=FINETUNE_LR[cfg.label_mode])
    if oracle.n_classes is not None and pretrained_student.out_dim != oracle.n_classes:
        raise ContractError(
            f"pretrained head width {pretrained_student.out_dim} != target class count {oracle.n_classes}")
    if domain is None:
        domain = Box.unit(pretrained_student.in_dim)
    rcfg = cfg.resolved()
    s1 = clone(pretrained_student)
    s2 = make_student(rcfg, domain.dim, pretrained_student.out_dim, subseed(rcfg.seed, "init_s2"))
    return train_dual_students(cfg, oracle, domain, students=[s1, s2], monitor=monitor)
