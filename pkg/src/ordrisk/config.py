"""Experiment configuration: data, model and training sections in one YAML file."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .synthgen import AugmentConfig, GenConfig

ABLATION_FLAGS = ("disable_mv", "disable_poe", "disable_align", "disable_ml", "stp_mode")


@dataclass(frozen=True)
class Ablation:
    disable_mv: bool = False
    disable_poe: bool = False
    disable_align: bool = False
    disable_ml: bool = False
    stp_mode: bool = False

    def active(self) -> list[str]:
        return [name for name in ABLATION_FLAGS if getattr(self, name)]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    lr_decay: float = 0.5
    lr_patience: int = 5
    early_stop_patience: int = 15
    max_epochs: int = 60
    min_improvement: float = 1e-4
    seed: int = 0
    augment: bool = True
    eval_batch_size: int = 64
    bootstrap_iters: int = 1000
    cs_theta: float = 1.0
    loss: LossWeights = field(default_factory=LossWeights)
    ablation: Ablation = field(default_factory=Ablation)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.lr_decay < 1:
            raise ConfigError(f"lr_decay must be in (0, 1), got {self.lr_decay}")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batchnorm statistics)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        self.loss.validate()

    def effective_weights(self) -> LossWeights:
        a = self.ablation
        return self.loss.ablate(a.disable_mv, a.disable_poe, a.disable_align, a.disable_ml, a.stp_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"]["scale_range"] = list(self.augmentation.scale_range)
        return d


def _section(cls, d: Optional[dict], where: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return d


def train_config_from_dict(d: Optional[dict]) -> TrainConfig:
    d = _section(TrainConfig, d, "train")
    try:
        if "loss" in d:
            d["loss"] = LossWeights.from_dict(_section(LossWeights, d["loss"], "train.loss"))
        if "ablation" in d:
            d["ablation"] = Ablation(**_section(Ablation, d["ablation"], "train.ablation"))
        if "augmentation" in d:
            aug = _section(AugmentConfig, d["augmentation"], "train.augmentation")
            if "scale_range" in aug:
                aug["scale_range"] = tuple(aug["scale_range"])
            d["augmentation"] = AugmentConfig(**aug)
        return TrainConfig(**d)
    except TypeError as err:
        raise ConfigError(str(err)) from err


@dataclass
class ExperimentConfig:
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.train.validate()
        if (self.model.image_height, self.model.image_width) != (self.data.image_height, self.data.image_width):
            raise ConfigError(f"model input {self.model.image_height}x{self.model.image_width} does not "
                              f"match generated images {self.data.image_height}x{self.data.image_width}")
        if self.model.horizon != self.data.horizon:
            raise ConfigError(f"model horizon {self.model.horizon} != data horizon {self.data.horizon}")

    def resolved_model(self) -> ModelConfig:
        """Model config with the ablation switches applied."""
        a = self.train.ablation
        return replace(self.model, stp_mode=self.model.stp_mode or a.stp_mode,
                       use_alignment=self.model.use_alignment and not a.disable_align)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed))

    def with_ablation(self, **flags) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, ablation=replace(self.train.ablation, **flags)))

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "model": self.model.to_dict(), "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {"data", "model", "train"}
        if unknown:
            raise ConfigError(f"unknown top-level config sections: {sorted(unknown)}")
        try:
            cfg = cls(GenConfig.from_dict(d.get("data") or {}), ModelConfig.from_dict(d.get("model") or {}),
                      train_config_from_dict(d.get("train")))
        except TypeError as err:
            raise ConfigError(str(err)) from err
        cfg.validate()
        return cfg


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{p}: {err}") from err
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
