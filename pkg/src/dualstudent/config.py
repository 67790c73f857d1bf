"""Run specifications and their flat sectioned text format.

A config file is INI-style: ``[section]`` headers, then ``key = value``
lines. Sections mirror the dataclasses below. Unknown sections or keys are
errors. Lists are comma separated; ``none`` means "use the default rule".
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .attacks import KINDS as ATTACK_KINDS, SOURCES as ATTACK_SOURCES, AttackConfig
from .data import DatasetSpec
from .extraction import ConfigError, ExtractionConfig

TASKS = ("train_target", "extract", "finetune", "eval_grad_fidelity", "attack_eval", "report")


@dataclass
class TargetSpec:
    hidden: tuple = (64, 64)
    epochs: int = 30
    floor: float = 0.9
    checkpoint: Optional[str] = None  # load instead of training


@dataclass
class EvalSpec:
    loss: Optional[str] = None  # None: l1 soft, ce hard
    normalize: str = "gradient"
    n_generated: int = 10_000
    n_grad: int = 256
    fd_step: float = 1e-3
    thresholds: tuple = (0.5, 0.75, 0.9)


@dataclass
class AttackSuite:
    kinds: tuple = ("pgd",)
    epsilons: tuple = (0.01, 0.125)
    targeted: tuple = (False,)
    steps: int = 10
    step_size: Optional[float] = None  # None: epsilon / 4
    random_start: bool = True
    sources: tuple = ATTACK_SOURCES
    n_eval: int = 1000
    ds_run: Optional[str] = None  # existing extract output dirs to reuse
    fd_run: Optional[str] = None
    proxy_epochs: int = 30

    def configs(self) -> list[AttackConfig]:
        return [AttackConfig(k, float(e), self.steps, self.step_size, bool(t), self.random_start)
                for k in self.kinds for t in self.targeted for e in self.epsilons]


@dataclass
class FinetuneSpec:
    pretrained: Optional[str] = None  # checkpoint; None: run a full extraction first
    fraction: float = 0.05
    degrade_drop: float = 0.10  # minimum agreement drop the weight noise must cause
    degrade_scale: float = 0.02  # first noise std tried; doubled until the drop is reached
    lr_student: Optional[float] = None  # None: extraction.lr_student if set, else the fine-tuning default


@dataclass
class RunSpec:
    task: str = "extract"
    seed: int = 0
    output_dir: str = "runs/out"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    target: TargetSpec = field(default_factory=TargetSpec)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    attack: AttackSuite = field(default_factory=AttackSuite)
    finetune: FinetuneSpec = field(default_factory=FinetuneSpec)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        self.dataset.validate()
        self.extraction.validate()
        if self.evaluation.normalize not in ("gradient", "loss"):
            raise ConfigError("evaluation.normalize must be gradient or loss")
        for k in self.attack.kinds:
            if k not in ATTACK_KINDS:
                raise ConfigError(f"attack kind must be one of {ATTACK_KINDS}, got {k!r}")
        for s in self.attack.sources:
            if s not in ATTACK_SOURCES:
                raise ConfigError(f"attack source must be one of {ATTACK_SOURCES}, got {s!r}")
        if not 0 < self.finetune.fraction <= 1:
            raise ConfigError("finetune.fraction must lie in (0, 1]")

    def seeded(self) -> "RunSpec":
        """Copy with the run seed pushed into every subsystem that takes one."""
        spec = dataclasses.replace(self)
        spec.extraction = dataclasses.replace(self.extraction, seed=self.seed)
        return spec


SECTIONS = {
    "run": None,
    "dataset": DatasetSpec,
    "target": TargetSpec,
    "extraction": ExtractionConfig,
    "evaluation": EvalSpec,
    "attack": AttackSuite,
    "finetune": FinetuneSpec,
}
RUN_KEYS = ("task", "seed", "output_dir")
# the run seed is the only seed; a second one per section would break propagation
HIDDEN_KEYS = {"extraction": ("seed",)}


def section_keys(section: str) -> list[str]:
    if section == "run":
        return list(RUN_KEYS)
    hidden = HIDDEN_KEYS.get(section, ())
    return [f.name for f in dataclasses.fields(SECTIONS[section]) if f.name not in hidden]


def _field_type(section: str, key: str):
    if section == "run":
        return {"task": str, "seed": int, "output_dir": str}[key]
    hints = typing.get_type_hints(SECTIONS[section])
    return hints[key]


def _scalar(text: str, kind, where: str):
    t = text.strip()
    try:
        if kind is bool:
            low = t.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {t!r}")
        if kind is int:
            return int(t)
        if kind is float:
            return float(t)
        return t
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _elem_kind(section: str, key: str):
    # tuple-typed fields take their element type from the default value
    cls = SECTIONS[section]
    default = next(f for f in dataclasses.fields(cls) if f.name == key).default
    if isinstance(default, tuple) and default:
        return type(default[0])
    return str


def parse_value(section: str, key: str, text: str):
    where = f"[{section}] {key}"
    kind = _field_type(section, key)
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    optional = origin is typing.Union and type(None) in args
    if optional:
        if text.strip().lower() == "none":
            return None
        kind = next(a for a in args if a is not type(None))
    if kind is tuple or typing.get_origin(kind) is tuple:
        elem = _elem_kind(section, key)
        parts = [p for p in text.split(",") if p.strip()]
        return tuple(_scalar(p, elem, where) for p in parts)
    return _scalar(text, kind, where)


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_key(spec: RunSpec, section: str, key: str, text: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in section_keys(section):
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    value = parse_value(section, key, text)
    if section == "run":
        setattr(spec, key, value)
    else:
        setattr(getattr(spec, section), key, value)


def resolve_key(name: str) -> tuple[str, str]:
    """``section.key`` or a bare key that names exactly one field."""
    if "." in name:
        section, key = name.split(".", 1)
        return section, key
    owners = [s for s in SECTIONS if name in section_keys(s)]
    if not owners:
        raise ConfigError(f"unknown config key {name!r}")
    if len(owners) > 1:
        raise ConfigError(f"key {name!r} is ambiguous, use one of "
                          + ", ".join(f"{s}.{name}" for s in owners))
    return owners[0], name


def parse_config(text: str, spec: RunSpec | None = None) -> RunSpec:
    spec = RunSpec() if spec is None else spec
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if parser.defaults():
        raise ConfigError("keys outside a section are not allowed")
    for section in parser.sections():
        for key, value in parser.items(section):
            set_key(spec, section, key, value)
    return spec


def load_config(path, spec: RunSpec | None = None) -> RunSpec:
    return parse_config(Path(path).read_text(), spec)


def dump_config(spec: RunSpec) -> str:
    """Every key of every section, defaults included; parse_config reads it back."""
    out = io.StringIO()
    for section in SECTIONS:
        out.write(f"[{section}]\n")
        obj = spec if section == "run" else getattr(spec, section)
        for key in section_keys(section):
            out.write(f"{key} = {format_value(getattr(obj, key))}\n")
        out.write("\n")
    return out.getvalue()
