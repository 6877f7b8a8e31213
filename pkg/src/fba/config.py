"""Line-based ``key = value`` run configuration.

Keys are dotted (``trainer.mode``, ``backbone.stages``). Every key has a type and a
default; the resolved echo lists all of them and parses back to an equal config.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .blocks import BackboneSpec, StageSpec
from .tasks import TASK_KINDS, build_classification_task, build_detection_task, build_sr_task
from .tasks.base import Task
from .trainer import MODES, OPTIMIZERS, OptimizerConfig, TrainerConfig

DATA_SOURCES = ("synthetic", "cifar10")


class ConfigError(Exception):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass
class TaskConfig:
    kind: str = ""
    num_classes: int = 4
    input_size: int = 16
    strides: Tuple[int, ...] = (4, 8, 16)
    fpn_width: int = 16
    pos_weight: float = 1.0
    scale: int = 2
    hr_size: int = 48


@dataclass
class DataConfig:
    source: str = "synthetic"
    seed: int = 0
    train_count: int = 256
    test_count: int = 128
    resample: bool = False  # draw a fresh synthetic training set every epoch
    noise: float = 0.1
    path: str = ""
    test_path: str = ""


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    data: DataConfig = field(default_factory=DataConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    backbone: Optional[BackboneSpec] = None
    eval_every: int = 1
    out_dir: str = "runs/out"


# ---------------------------------------------------------------------------
# value codecs


def _int(s: str) -> int:
    if not re.fullmatch(r"[+-]?\d+", s):
        raise ValueError(f"expected an integer, got {s!r}")
    return int(s)


def _float(s: str) -> float:
    v = float(s)
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError(f"expected a finite number, got {s!r}")
    return v


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _choice(options):
    def conv(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return conv


def _int_list(s: str) -> Tuple[int, ...]:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(_int(p) for p in parts)


def _stages(s: str) -> Tuple[StageSpec, ...]:
    """``2x8,2x16/2`` -> two stages; ``/s`` sets the stride of the stage's first block."""
    out = []
    for part in [p.strip() for p in s.split(",") if p.strip()]:
        m = re.fullmatch(r"(\d+)x(\d+)(?:/(\d+))?", part)
        if not m:
            raise ValueError(f"stage {part!r} is not of the form <blocks>x<channels>[/<stride>]")
        out.append(StageSpec(int(m.group(1)), int(m.group(2)), int(m.group(3) or 1)))
    if not out:
        raise ValueError("expected at least one stage")
    return tuple(out)


def _fmt_stages(stages) -> str:
    return ",".join(f"{s.block_count}x{s.channels}" + (f"/{s.stride}" if s.stride != 1 else "") for s in stages)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# key -> (object path, attribute, parser)
_FIELDS: Dict[str, Tuple[str, str, Callable]] = {
    "task.kind": ("task", "kind", _choice(TASK_KINDS)),
    "task.num_classes": ("task", "num_classes", _int),
    "task.input_size": ("task", "input_size", _int),
    "task.strides": ("task", "strides", _int_list),
    "task.fpn_width": ("task", "fpn_width", _int),
    "task.pos_weight": ("task", "pos_weight", _float),
    "task.scale": ("task", "scale", _int),
    "task.hr_size": ("task", "hr_size", _int),
    "data.source": ("data", "source", _choice(DATA_SOURCES)),
    "data.seed": ("data", "seed", _int),
    "data.train_count": ("data", "train_count", _int),
    "data.test_count": ("data", "test_count", _int),
    "data.resample": ("data", "resample", _bool),
    "data.noise": ("data", "noise", _float),
    "data.path": ("data", "path", str),
    "data.test_path": ("data", "test_path", str),
    "trainer.mode": ("trainer", "mode", _choice(MODES)),
    "trainer.k": ("trainer", "K", _int),
    "trainer.lr": ("trainer", "eta_l", _float),
    "trainer.lr_aux": ("trainer", "eta_a", _float),
    "trainer.warmup_steps": ("trainer", "warmup_steps", _int),
    "trainer.batch_size": ("trainer", "batch_size", _int),
    "trainer.epochs": ("trainer", "epochs", _int),
    "trainer.seed": ("trainer", "seed", _int),
    "trainer.shared_head": ("trainer", "shared_head", _bool),
    "trainer.channel_reduction": ("trainer", "channel_reduction", _float),
    "trainer.dtype": ("trainer", "dtype", _choice(("f32", "f64"))),
    "trainer.parallel": ("trainer", "parallel", _bool),
    "trainer.eval_every": ("", "eval_every", _int),
    "optimizer.kind": ("trainer.optimizer", "kind", _choice(OPTIMIZERS)),
    "optimizer.momentum": ("trainer.optimizer", "momentum", _float),
    "optimizer.weight_decay": ("trainer.optimizer", "weight_decay", _float),
    "optimizer.beta1": ("trainer.optimizer", "beta1", _float),
    "optimizer.beta2": ("trainer.optimizer", "beta2", _float),
    "optimizer.eps": ("trainer.optimizer", "eps", _float),
    "backbone.stages": ("backbone", "stages", _stages),
    "backbone.stem_pool": ("backbone", "stem_pool", _int),
    "backbone.res_scale": ("backbone", "res_scale", _float),
    "output.dir": ("", "out_dir", str),
}
REQUIRED = ("task.kind",)


def _target(cfg: RunConfig, path: str):
    obj = cfg
    for part in filter(None, path.split(".")):
        obj = getattr(obj, part)
    return obj


def _split_line(raw: str, lineno: int) -> Optional[Tuple[str, str]]:
    text = raw.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
    key, value = (p.strip() for p in text.split("=", 1))
    if not key or not value:
        raise ConfigError(f"empty key or value in {raw.strip()!r}", lineno)
    return key, value


def parse_config(text: str, overrides: Optional[List[str]] = None, check_paths: bool = True) -> RunConfig:
    """Parse config text; ``overrides`` are extra ``key=value`` strings applied last."""
    pairs: List[Tuple[str, str, Optional[int]]] = []
    seen: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        kv = _split_line(raw, lineno)
        if kv is None:
            continue
        if kv[0] in seen:
            raise ConfigError(f"duplicate key {kv[0]!r} (first set on line {seen[kv[0]]})", lineno)
        seen[kv[0]] = lineno
        pairs.append((kv[0], kv[1], lineno))
    for o in overrides or []:
        if "=" not in o:
            raise ConfigError(f"override {o!r} is not key=value")
        k, v = (p.strip() for p in o.split("=", 1))
        pairs.append((k, v, None))

    cfg = RunConfig()
    backbone: Dict[str, object] = {}
    given = set()
    eta_a_given = False
    for key, value, lineno in pairs:
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        path, attr, conv = _FIELDS[key]
        try:
            v = conv(value)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}", lineno) from None
        given.add(key)
        if path == "backbone":
            backbone[attr] = v
        else:
            setattr(_target(cfg, path), attr, v)
        eta_a_given |= key == "trainer.lr_aux"
    for key in REQUIRED:
        if key not in given:
            raise ConfigError(f"missing required key {key!r}")
    if cfg.task.kind == "detection" and "task.input_size" not in given:
        cfg.task.input_size = 64
    if not eta_a_given:
        cfg.trainer.eta_a = cfg.trainer.eta_l
    default = build_task(cfg.task, None).backbone_spec
    if backbone:
        cfg.backbone = BackboneSpec(
            tuple(backbone.get("stages", default.stages)),
            input_channels=default.input_channels,
            stem_pool=int(backbone.get("stem_pool", default.stem_pool)),
            res_scale=float(backbone.get("res_scale", default.res_scale)),
        )
    else:
        cfg.backbone = default
    validate(cfg, check_paths)
    return cfg


def validate(cfg: RunConfig, check_paths: bool = True) -> None:
    t, d, tr = cfg.task, cfg.data, cfg.trainer
    try:
        cfg.backbone.validate()
    except Exception as e:
        raise ConfigError(f"backbone: {e}") from None
    if d.source == "cifar10":
        if t.kind != "classification":
            raise ConfigError("data.source = cifar10 needs task.kind = classification")
        if not d.path:
            raise ConfigError("data.source = cifar10 needs data.path")
        if t.num_classes != 10 or t.input_size != 32:
            raise ConfigError("CIFAR-10 needs task.num_classes = 10 and task.input_size = 32")
        if check_paths:
            for p in filter(None, (d.path, d.test_path)):
                if not os.path.exists(p):
                    raise ConfigError(f"data file {p!r} does not exist")
    elif d.path or d.test_path:
        raise ConfigError("data.path is only valid with data.source = cifar10 (exactly one data source)")
    if d.train_count < 1 or d.test_count < 1:
        raise ConfigError("data counts must be >= 1")
    if cfg.eval_every < 1:
        raise ConfigError("trainer.eval_every must be >= 1")
    try:
        tr.validate()
    except Exception as e:
        raise ConfigError(str(e)) from None
    if tr.mode != "e2e" and tr.K > cfg.backbone.total_blocks:
        raise ConfigError(f"trainer.k = {tr.K} exceeds the {cfg.backbone.total_blocks} backbone blocks")


def resolved_text(cfg: RunConfig) -> str:
    """Every key with its resolved value, in declaration order."""
    lines = ["# resolved run configuration"]
    for key, (path, attr, _) in _FIELDS.items():
        if path == "backbone":
            v = getattr(cfg.backbone, attr)
            s = _fmt_stages(v) if attr == "stages" else _fmt(v)
        else:
            v = getattr(_target(cfg, path), attr)
            s = _fmt(v)
        if s == "":
            continue  # empty strings are the default and cannot be written as a value
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"


def load_config(path: str, overrides: Optional[List[str]] = None) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), overrides)


def build_task(t: TaskConfig, backbone: Optional[BackboneSpec]) -> Task:
    if t.kind == "classification":
        return build_classification_task(t.num_classes, t.input_size, backbone)
    if t.kind == "detection":
        return build_detection_task(t.input_size, backbone, t.strides, t.fpn_width, t.pos_weight)
    if t.kind == "super_resolution":
        return build_sr_task(t.scale, t.hr_size, backbone)
    raise ConfigError(f"unknown task kind {t.kind!r}")


def config_fields() -> List[str]:
    return list(_FIELDS)
