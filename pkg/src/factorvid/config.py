"""Run configuration: flat dotted keys in a YAML file, overridable from the command line."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import SceneConfig
from .losses import CurriculumConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "curriculum": CurriculumConfig,
    "scene": SceneConfig,
}
_DATA_KEYS = {"train_clips": 20, "val_clips": 4, "test_clips": 10, "base_seed": 0}
_PATH_KEYS = {"data_dir": "data", "run_dir": "run"}


def _defaults():
    flat = {}
    for sec, cls in _SECTIONS.items():
        inst = cls()
        for f in fields(cls):
            if sec == "train" and f.name == "curriculum":
                continue
            v = getattr(inst, f.name)
            flat[f"{sec}.{f.name}"] = list(v) if isinstance(v, tuple) else v
    flat.update({f"data.{k}": v for k, v in _DATA_KEYS.items()})
    flat.update({f"paths.{k}": v for k, v in _PATH_KEYS.items()})
    return flat


DEFAULTS = _defaults()


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    scene: SceneConfig
    data: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @property
    def curriculum(self):
        return self.train.curriculum

    def to_flat(self) -> dict:
        flat = {}
        for k, v in self.model.to_dict().items():
            flat[f"model.{k}"] = v
        for k, v in self.train.to_dict().items():
            if k != "curriculum":
                flat[f"train.{k}"] = v
        for k, v in self.curriculum.to_dict().items():
            flat[f"curriculum.{k}"] = v
        for k, v in self.scene.to_dict().items():
            flat[f"scene.{k}"] = v
        flat.update({f"data.{k}": v for k, v in self.data.items()})
        flat.update({f"paths.{k}": v for k, v in self.paths.items()})
        return flat

    def dump(self) -> str:
        return yaml.safe_dump(self.to_flat(), sort_keys=True)

    def counts(self):
        return {"train": self.data["train_clips"], "val": self.data["val_clips"],
                "test": self.data["test_clips"]}


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    return key.strip().lstrip("-"), yaml.safe_load(raw)


def from_flat(flat: dict) -> RunConfig:
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**DEFAULTS, **flat}
    groups: dict[str, dict] = {}
    for key, value in merged.items():
        sec, name = key.split(".", 1)
        groups.setdefault(sec, {})[name] = value
    try:
        cur = CurriculumConfig(**groups["curriculum"])
        train = TrainConfig(curriculum=cur, **groups["train"])
        scene = SceneConfig.from_dict(groups["scene"])
        model = ModelConfig(**groups["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if model.H != scene.resolution or model.W != scene.resolution:
        raise ConfigError("model.H/model.W must equal scene.resolution")
    if model.C != scene.channels:
        raise ConfigError("model.C must equal scene.channels")
    if scene.T_total < model.T_in + model.T_out:
        raise ConfigError("scene.T_total must cover model.T_in + model.T_out")
    data = groups["data"]
    for k in ("train_clips", "val_clips", "test_clips"):
        if not isinstance(data[k], int) or data[k] < 0:
            raise ConfigError(f"data.{k} must be a nonnegative integer")
    return RunConfig(model, train, scene, data, groups["paths"])


def load_config(path=None, overrides=()) -> RunConfig:
    flat = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping of dotted keys")
        flat.update(loaded)
    for item in overrides:
        k, v = parse_override(item) if isinstance(item, str) else item
        flat[k] = v
    return from_flat(flat)
