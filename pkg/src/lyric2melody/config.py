"""YAML run configuration shared by every CLI subcommand."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .generate import Sampling
from .model import ModelConfig
from .neural import Schedule
from .training import TrainConfig
from .vq import VQConfig

CONFIG_ENV = "L2M_CONFIG"
PRESETS = ("toy", "paper")
PATH_KEYS = ("corpus", "valid", "quantizer", "checkpoint", "vq_checkpoint", "features", "request", "reference", "generated")


class ConfigError(ValueError):
    pass


def _check_keys(section: str, payload: Mapping, allowed) -> None:
    if not isinstance(payload, Mapping):
        raise ConfigError(f"{section}: expected a mapping, got {type(payload).__name__}")
    unknown = sorted(set(payload) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    out: str = "runs/latest"
    k: int = 64
    model: Mapping[str, Any] = field(default_factory=dict)
    train: Mapping[str, Any] = field(default_factory=dict)
    vq: Mapping[str, Any] = field(default_factory=dict)
    vq_train: Mapping[str, Any] = field(default_factory=dict)
    sampling: Mapping[str, Any] = field(default_factory=dict)
    paths: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "RunConfig":
        payload = dict(payload or {})
        _check_keys("config", payload, [f.name for f in fields(cls)])
        cfg = cls(**payload)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        """Read ``path``, or the file named by $L2M_CONFIG, or fall back to defaults."""
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            return cls()
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        return cls.from_dict(raw or {})

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: expected one of {PRESETS}, got {self.preset!r}")
        for name in ("seed", "k"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}: expected integer, got {value!r}")
        if self.k < 2:
            raise ConfigError(f"k: need at least 2 classes, got {self.k}")
        _check_keys("paths", self.paths, PATH_KEYS)
        _check_keys("sampling", self.sampling, [f.name for f in fields(Sampling)])
        # building each section surfaces unknown keys and bad values
        for build in (self.model_config, self.train_config, self.vq_config, self.vq_train_config, self.sampling_config):
            try:
                build()
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{build.__name__.removesuffix('_config')}: {exc}") from None

    def with_overrides(self, **values) -> "RunConfig":
        """Apply CLI flags; ``None`` means the flag was not given. Dotted keys address sections."""
        cfg = self
        for key, value in values.items():
            if value is None:
                continue
            if "." in key:
                section, name = key.split(".", 1)
                cfg = replace(cfg, **{section: {**getattr(cfg, section), name: value}})
            else:
                cfg = replace(cfg, **{key: value})
        cfg.validate()
        return cfg

    def model_config(self) -> ModelConfig:
        base = ModelConfig.toy() if self.preset == "toy" else ModelConfig.paper()
        _check_keys("model", self.model, [f.name for f in fields(ModelConfig)])
        return replace(base, **{"k": self.k, **self.model})

    def _train(self, section: str, payload: Mapping, default: TrainConfig) -> TrainConfig:
        _check_keys(section, payload, [f.name for f in fields(TrainConfig)])
        payload = dict(payload)
        sched = payload.pop("schedule", {})
        _check_keys(f"{section}.schedule", sched, [f.name for f in fields(Schedule)])
        return replace(default, **{"seed": self.seed, **payload, "schedule": replace(default.schedule, **sched)})

    def train_config(self) -> TrainConfig:
        return self._train("train", self.train, TrainConfig())

    def vq_config(self) -> VQConfig:
        base = VQConfig.toy() if self.preset == "toy" else VQConfig.paper()
        _check_keys("vq", self.vq, [f.name for f in fields(VQConfig)])
        return replace(base, **self.vq)

    def vq_train_config(self) -> TrainConfig:
        return self._train("vq_train", self.vq_train, TrainConfig())

    def sampling_config(self) -> Sampling:
        return replace(Sampling(seed=self.seed), **self.sampling)

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("model", "train", "vq", "vq_train", "sampling", "paths"):
            out[name] = dict(getattr(self, name))
        return out

    def effective(self) -> dict:
        """Fully resolved settings, as echoed into run directories."""
        return {
            "preset": self.preset,
            "seed": self.seed,
            "out": self.out,
            "k": self.k,
            "model": self.model_config().to_dict(),
            "train": self.train_config().to_dict(),
            "vq": self.vq_config().to_dict(),
            "vq_train": self.vq_train_config().to_dict(),
            "sampling": asdict(self.sampling_config()),
            "paths": dict(self.paths),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.effective(), sort_keys=True, allow_unicode=True)
