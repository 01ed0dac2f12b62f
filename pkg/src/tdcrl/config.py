"""Run configuration: nested dataclasses loaded from YAML with strict key
checking, plus label-hashed random substreams off one master seed."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
import yaml

from .augment import AugmentConfig


class ConfigError(ValueError):
    pass


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for a named component.

    The spawn key is the first 8 bytes (little-endian) of
    ``blake2b(label, digest_size=8)``, so e.g. ``substream(s, "init")`` is
    the same stream no matter which other components draw numbers.
    """
    key = int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


@dataclass
class TrainConfig:
    N: int = 6
    batch_size: int = 128
    epochs: int = 60
    lr0: float = 0.005
    eta_min: float = 0.0
    tau: float = 0.1
    lam: float = 3.0
    layers: int = 3
    loss_g_kind: str = "infonce"
    mode: str = "tdcrl"
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    seed: int = 0
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = _build(AugmentConfig, self.aug, "aug")
        for name in ("N", "batch_size", "layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.aug.M < 1:
            raise ConfigError("aug.M must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.lam < 0:
            raise ConfigError("train.lam must be >= 0")
        if self.tau <= 0:
            raise ConfigError("train.tau must be > 0")
        if self.lr0 <= 0 or not 0 <= self.eta_min <= self.lr0:
            raise ConfigError("need train.lr0 > 0 and 0 <= train.eta_min <= train.lr0")
        if self.loss_g_kind not in ("infonce", "l2"):
            raise ConfigError(f"train.loss_g_kind must be 'infonce' or 'l2', got {self.loss_g_kind!r}")
        if self.mode not in ("tdcrl", "no_ci"):
            raise ConfigError(f"train.mode must be 'tdcrl' or 'no_ci', got {self.mode!r}")
        if self.aug.concentration <= 0 or self.aug.noise_sigma < 0:
            raise ConfigError("aug.concentration must be > 0 and aug.noise_sigma >= 0")
        if not 0 <= self.aug.random_sampling_fraction <= 1:
            raise ConfigError("aug.random_sampling_fraction must lie in [0, 1]")


@dataclass
class EncoderConfig:
    K: int = 7
    ES: int = 64
    W: int = 16
    class_scale: float = 1.0
    style_scale: float = 1.0
    text_noise: float = 0.0
    image_noise: float = 0.05
    gap_scale: float = 0.0

    def __post_init__(self):
        for name in ("K", "ES", "W"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder.{name} must be >= 1")
        for name in ("class_scale", "style_scale", "text_noise", "image_noise", "gap_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"encoder.{name} must be >= 0")


@dataclass
class BenchmarkConfig:
    train_styles: int = 4
    heldout_styles: int = 2
    images_per_cell: int = 200
    heldout_scale: float = 2.0

    def __post_init__(self):
        if self.train_styles < 1:
            raise ConfigError("benchmark.train_styles must be >= 1")
        if self.heldout_styles < 0 or self.images_per_cell < 1:
            raise ConfigError("benchmark.heldout_styles must be >= 0 and images_per_cell >= 1")
        if self.heldout_scale <= 0:
            raise ConfigError("benchmark.heldout_scale must be > 0")


@dataclass
class EvalConfig:
    mmd_bandwidth: Optional[float] = None  # None: median heuristic
    probe_epochs: int = 200
    probe_lr: float = 0.1

    def __post_init__(self):
        if self.mmd_bandwidth is not None and self.mmd_bandwidth <= 0:
            raise ConfigError("eval.mmd_bandwidth must be positive or null")
        if self.probe_epochs < 1 or self.probe_lr <= 0:
            raise ConfigError("eval.probe_epochs must be >= 1 and eval.probe_lr > 0")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    # the synthetic benchmark has 4 training styles, so N defaults to 4 here
    train: TrainConfig = field(default_factory=lambda: TrainConfig(N=4))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.train_config()  # validates aug against the train section

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed, aug=self.aug)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["train"].pop("aug")
        d["train"].pop("seed")
        return d


_SECTIONS = {
    "aug": AugmentConfig, "train": TrainConfig, "encoder": EncoderConfig,
    "benchmark": BenchmarkConfig, "eval": EvalConfig,
}
_NOT_IN_FILE = {"train": {"aug", "seed"}}


def _build(cls, data: Dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix} must be a mapping")
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in allowed or key in _NOT_IN_FILE.get(prefix, ()):
            raise ConfigError(f"unknown config key '{prefix}.{key}'")
    kwargs = {}
    for key, value in data.items():
        default = allowed[key].default
        if isinstance(default, bool) or default is None:
            pass
        elif isinstance(default, int) and not (isinstance(value, int) and not isinstance(value, bool)):
            raise ConfigError(f"'{prefix}.{key}' must be an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"'{prefix}.{key}' must be a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"'{prefix}.{key}' must be a string, got {value!r}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


def config_from_dict(data: Optional[Dict[str, Any]]) -> RunConfig:
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in top:
            raise ConfigError(f"unknown config key '{key}'")
    kwargs: Dict[str, Any] = {}
    for key, cls in _SECTIONS.items():
        if key in data:
            kwargs[key] = _build(cls, data[key] or {}, key)
    if "seed" in data:
        if not isinstance(data["seed"], int) or isinstance(data["seed"], bool) or data["seed"] < 0:
            raise ConfigError("'seed' must be a non-negative integer")
        kwargs["seed"] = data["seed"]
    if "out" in data:
        if not isinstance(data["out"], str):
            raise ConfigError("'out' must be a string")
        kwargs["out"] = data["out"]
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)
