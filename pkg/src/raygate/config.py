"""Experiment configuration: dataclass tree, YAML (de)serialization, and
environment-variable overrides.

Config files are plain YAML mirroring the dataclass fields. Any leaf can
be overridden from the environment with the ``RAYGATE_`` prefix and ``__``
as the path separator, e.g. ``RAYGATE_OPTIM__LR=0.05`` or
``RAYGATE_MODEL__USE_DAM=false``. Override values are parsed as YAML
scalars.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import yaml

from .backbone import BackboneConfig
from .losses import LossConfig
from .pipeline import ModelConfig
from .synth import SynthSpec

ENV_PREFIX = "RAYGATE_"


@dataclass
class OptimConfig:
    kind: str = "sgd"                 # "sgd" | "adamw"
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 12
    batch_size: int = 16
    schedule: str = "constant"        # "constant" | "one_cycle"
    warmup_frac: float = 0.3
    early_stop_patience: int = 0      # 0 disables early stopping
    grad_clip: float = 10.0           # max gradient norm; 0 disables

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.schedule not in ("constant", "one_cycle"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class DataConfig:
    root: str = ""                    # directory holding annotations/<split>.json
    synth: SynthSpec | None = None    # inline generator spec (cmd: generate)
    input_size: int = 128
    val_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = SynthSpec.from_dict(self.synth)
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class ExperimentConfig:
    task: str = "detect"
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if self.task not in ("detect", "multilabel"):
            raise ValueError(f"unknown task {self.task!r}")
        self.model.task = self.task

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.data.synth is not None:
            d["data"]["synth"] = self.data.synth.to_dict()
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        return cls(**payload)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_yaml())

    @classmethod
    def load(cls, path, env: dict | None = None) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            payload = yaml.safe_load(fh)
        payload = apply_env_overrides(payload, env)
        return cls.from_dict(payload)


def multilabel_defaults() -> ExperimentConfig:
    """Classification-mode defaults: decoupled weight decay, one-cycle
    schedule, 80 epochs with early stopping."""
    return ExperimentConfig(
        task="multilabel",
        optim=OptimConfig(kind="adamw", lr=1e-3, weight_decay=1e-2,
                          epochs=80, batch_size=16, schedule="one_cycle",
                          early_stop_patience=10))


def detection_defaults() -> ExperimentConfig:
    """Detection-mode defaults: SGD with momentum 0.9, weight decay 1e-4,
    lr 0.02, batch 16."""
    return ExperimentConfig(task="detect", optim=OptimConfig())


def apply_env_overrides(payload: dict, env: dict | None = None) -> dict:
    env = os.environ if env is None else env
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = payload
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(raw)
    return payload
