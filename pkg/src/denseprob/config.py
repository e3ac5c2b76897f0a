"""Plain-text experiment configuration (INI sections of ``key = value`` lines).

Tuples are written as comma-separated values and booleans as
``true``/``false``.  ``to_text`` followed by ``from_text`` reproduces the
configuration exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from typing import Tuple

from .network import NetConfig
from .training import TrainConfig

STAGES = ("generate", "train", "infer", "evaluate", "ablate")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_count: int = 2000
    test_count: int = 200
    size: tuple = (64, 64)
    channels: int = 3
    corner_range: float = 8.0
    translation: float = 0.0
    object_prob: float = 0.5
    flat_fraction: float = 0.3
    perturb: bool = True
    perturb_amplitude: float = 3.0
    perturb_smoothness: float = 4.0
    perturb_masks: tuple = (1, 4)
    perturb_sigma: tuple = (3.0, 8.0)
    perturb_max_norm: float = 4.0
    test_perturb: bool = True
    clean_copy: bool = False  # also write an unperturbed training split


@dataclass
class EvalConfig:
    mode: str = "single"  # single | two_stage | multi_scale
    confidence: str = "network"  # network | oracle | constant
    radius: float = 1.0
    pck_thresholds: tuple = (1.0, 5.0)
    match_threshold: float = 0.1
    inlier_floor: float = 0.1
    scales: tuple = (0.5, 0.88, 1.0, 1.33, 1.66, 2.0)
    limit: int = 0  # evaluate only the first N test pairs (0 = all)


@dataclass
class AblateConfig:
    variants: tuple = ("l1", "single", "unconstrained", "constrained", "noperturb")


@dataclass
class ExperimentConfig:
    stage: str = "train"
    seed: int = 0
    out: str = "runs/default"
    data_dir: str = ""  # defaults to <out>/data
    checkpoint: str = ""  # defaults to <out>/model.ckpt
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=lambda: NetConfig(dtype="float32"))
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    SECTIONS = ("data", "net", "train", "eval", "ablate")
    TOP = ("stage", "seed", "out", "data_dir", "checkpoint")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, default, name):
    t = text.strip()
    try:
        if isinstance(default, bool):
            low = t.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(t)
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
        if isinstance(default, tuple):
            items = [s.strip() for s in t.split(",") if s.strip()]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                kind = float if any(isinstance(x, float) for x in default) else int
                return tuple(kind(s) for s in items)
            return tuple(items)
        return t
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def to_text(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]"]
    for k in ExperimentConfig.TOP:
        lines.append(f"{k} = {_fmt(getattr(cfg, k))}")
    for sec in ExperimentConfig.SECTIONS:
        lines.append("")
        lines.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def _update(obj, items, section):
    known = {f.name: f for f in fields(obj)}
    vals = {}
    for k, v in items:
        if k not in known:
            raise ConfigError(f"unknown key {section}.{k}")
        vals[k] = _parse(v, getattr(obj, k), f"{section}.{k}")
    try:
        return dataclasses.replace(obj, **vals)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_text(text: str, base: ExperimentConfig = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = base if base is not None else ExperimentConfig()
    for sec in cp.sections():
        items = list(cp.items(sec))
        if sec == "experiment":
            vals = {}
            for k, v in items:
                if k not in ExperimentConfig.TOP:
                    raise ConfigError(f"unknown key experiment.{k}")
                vals[k] = _parse(v, getattr(cfg, k), f"experiment.{k}")
            cfg = dataclasses.replace(cfg, **vals)
        elif sec in ExperimentConfig.SECTIONS:
            cfg = dataclasses.replace(cfg, **{sec: _update(getattr(cfg, sec), items, sec)})
        else:
            raise ConfigError(f"unknown section [{sec}]")
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    if cfg.stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}")
    if cfg.eval.mode not in ("single", "two_stage", "multi_scale"):
        raise ConfigError(f"unknown evaluation mode {cfg.eval.mode!r}")
    if cfg.eval.confidence not in ("network", "oracle", "constant"):
        raise ConfigError(f"unknown confidence source {cfg.eval.confidence!r}")
    if cfg.data.train_count < 0 or cfg.data.test_count < 0:
        raise ConfigError("sample counts must be nonnegative")
    if tuple(cfg.data.size) != tuple(cfg.net.image_size):
        raise ConfigError(f"data size {cfg.data.size} differs from network input {cfg.net.image_size}")
    if not cfg.eval.scales:
        raise ConfigError("scale list is empty")


def load(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return from_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
