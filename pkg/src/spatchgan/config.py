"""Experiment configuration and its YAML file schema.

A config file is a YAML mapping whose top-level keys are the fields of
:class:`TrainConfig`. The sections ``loss``, ``disc``, ``gen`` and ``data``
map onto :class:`LossWeights`, :class:`DiscriminatorConfig`,
:class:`GeneratorConfig` and :class:`DataConfig`. Missing keys keep their
defaults; unknown keys are rejected. See ``configs/`` for examples.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .discriminator import DiscriminatorConfig, DiscriminatorConfigError
from .generators import GeneratorConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source_dir: str = None
    target_dir: str = None
    augmentation: str = "anime_style"
    source_manifest: str = None
    target_manifest: str = None
    workers: int = 0


@dataclass
class TrainConfig:
    total_iters: int = 500000
    warmup_iters: int = 100000
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    batch_size: int = 4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weight_decay: float = 1e-4
    d_updates: int = 1
    seed: int = 0
    image_size: int = 256
    checkpoint_interval: int = 10000
    eval_interval: int = 10000
    log_interval: int = 1
    scale_down: int = 1
    embedder: str = "toy-conv64"
    loss: LossWeights = field(default_factory=LossWeights)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    data: DataConfig = field(default_factory=DataConfig)

    # Iteration counts after desk-scale reduction.
    @property
    def iters(self):
        return self.total_iters // self.scale_down

    @property
    def warmup(self):
        return self.warmup_iters // self.scale_down

    def interval(self, name):
        return max(1, getattr(self, name) // self.scale_down)

    def validate(self):
        if self.scale_down < 1:
            raise ConfigError("scale_down: must be >= 1")
        if self.total_iters < 0 or not 0 <= self.warmup_iters <= self.total_iters:
            raise ConfigError("warmup_iters: need 0 <= warmup_iters <= total_iters")
        if not 0 <= self.lr_end <= self.lr_start:
            raise ConfigError("lr_end: need 0 <= lr_end <= lr_start")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.d_updates < 1:
            raise ConfigError("d_updates: must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be >= 0")
        for name in ("checkpoint_interval", "eval_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigError("%s: must be >= 1" % name)
        try:
            self.loss.validate()
        except ValueError as e:
            raise ConfigError("loss.%s" % e) from None
        try:
            self.disc.validate()
            self.disc.check_input_size((self.image_size, self.image_size))
        except DiscriminatorConfigError as e:
            raise ConfigError("disc: %s" % e) from None
        try:
            self.gen.validate()
        except ValueError as e:
            raise ConfigError("gen: %s" % e) from None
        if self.image_size % 8:
            raise ConfigError("image_size: must be divisible by 8")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def arch_hash(self):
        """Hash of everything that determines parameter block names and shapes."""
        arch = {"image_size": self.image_size,
                "disc": dataclasses.asdict(self.disc),
                "gen": dataclasses.asdict(self.gen)}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"loss": LossWeights, "disc": DiscriminatorConfig,
             "gen": GeneratorConfig, "data": DataConfig}


def _coerce(path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("%s: expected a boolean, got %r" % (path, value))
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("%s: expected an integer, got %r" % (path, value))
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("%s: expected a number, got %r" % (path, value))
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError("%s: expected a list, got %r" % (path, value))
        return tuple(value)
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError("%s: expected a string, got %r" % (path, value))
        return value
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError("%s: expected a mapping" % (prefix or "config"))
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = prefix + key
        if key not in known:
            raise ConfigError("%s: unknown key (allowed: %s)" % (path, ", ".join(sorted(known))))
        if cls is TrainConfig and key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value or {}, key + ".")
        else:
            kwargs[key] = _coerce(path, value, getattr(defaults, key))
    return cls(**kwargs)


def config_from_dict(data):
    return _build(TrainConfig, data or {}, "").validate()


def load_config(path):
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e)) from e
    except yaml.YAMLError as e:
        raise ConfigError("config %s is not valid YAML: %s" % (path, e)) from e
    return config_from_dict(data)


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(_plain(cfg.to_dict()), f, sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
