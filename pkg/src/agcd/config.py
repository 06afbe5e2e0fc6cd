"""Strict JSON run configuration.

Sections: ``data``, ``mmnp``, ``model``, ``crid``, ``train``, ``eval``.
Missing keys take the defaults below; unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .crid import CRIDConfig
from .errors import ConfigError
from .evalkit.experiments import ExperimentConfig
from .evalkit.model import ModelSpec
from .evalkit.train import TrainConfig
from .fieldgrid import GeneratorParams, GridSpec


@dataclass(frozen=True)
class DataSection:
    seed: int = 0
    samples: int = 2048
    test_samples: int = 256
    horizon: int = 1
    H: int = 16
    W: int = 16
    variables: tuple[str, ...] = ("z", "t", "u", "v")
    rotation_per_step: float = 0.16
    diffusivity: float = 0.06
    max_start: int = 0


@dataclass(frozen=True)
class MMNPSection:
    backend: str = "mock"
    url: str = ""
    rounds: int = 2
    retries: int = 3
    backoff: float = 0.5
    timeout: float = 30.0
    defect_rate: float = 0.0
    strategy: str = "full"
    render_images: bool = False


@dataclass(frozen=True)
class ModelSection:
    patch: int = 4
    d: int = 32
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 4
    residual: bool = True


@dataclass(frozen=True)
class CRIDSection:
    d_t: int = 48
    max_tokens: int = 64
    f_hidden: int = 32
    scales: tuple[int, ...] = (2, 4)
    memory: int = 8
    beta_h: float | None = None
    pool_projections: bool = True
    heads: int = 4
    mlp_ratio: int = 4


@dataclass(frozen=True)
class TrainSection:
    steps: int = 2000
    batch: int = 32
    lr: float = 2e-3
    final_lr_fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    rollout_steps: int = 8
    ablation_defect_rate: float = 0.25


_SECTIONS = {
    "data": DataSection,
    "mmnp": MMNPSection,
    "model": ModelSection,
    "crid": CRIDSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass(frozen=True)
class Config:
    data: DataSection = field(default_factory=DataSection)
    mmnp: MMNPSection = field(default_factory=MMNPSection)
    model: ModelSection = field(default_factory=ModelSection)
    crid: CRIDSection = field(default_factory=CRIDSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived objects -------------------------------------------------
    def grid(self) -> GridSpec:
        return GridSpec.regular(self.data.H, self.data.W, self.data.variables)

    def generator(self) -> GeneratorParams:
        return GeneratorParams(rotation_per_step=self.data.rotation_per_step,
                               diffusivity=self.data.diffusivity, max_start=self.data.max_start)

    def backbone(self) -> BackboneConfig:
        m = self.model
        return BackboneConfig(self.data.H, self.data.W, len(self.data.variables), m.patch, m.d, m.heads, m.depth, m.mlp_ratio)

    def crid_config(self, **overrides) -> CRIDConfig:
        return CRIDConfig(**{**dataclasses.asdict(self.crid), **overrides})

    def model_spec(self, variant: str) -> ModelSpec:
        return ModelSpec(variant, self.backbone(), self.crid_config(), self.model.residual)

    def train_config(self, steps: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(t.steps if steps is None else steps, t.batch, t.lr, t.final_lr_fraction, t.seed)

    def experiment(self, seeds=None, steps: int | None = None) -> ExperimentConfig:
        return ExperimentConfig(
            seeds=tuple(seeds if seeds is not None else self.eval.seeds),
            n_train=self.data.samples,
            n_test=self.data.test_samples,
            H=self.data.H,
            W=self.data.W,
            variables=tuple(self.data.variables),
            rollout_steps=self.eval.rollout_steps,
            max_start=self.data.max_start,
            rounds=self.mmnp.rounds,
            narrator_defect_rate=self.mmnp.defect_rate,
            ablation_defect_rate=self.eval.ablation_defect_rate,
            train=self.train_config(steps),
            backbone=self.backbone(),
            crid=self.crid_config(),
        )

    def to_json(self) -> dict:
        return {name: _jsonable(dataclasses.asdict(getattr(self, name))) for name in _SECTIONS}

    def dump(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(cls, section: str, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")
    values = {}
    for k, v in raw.items():
        default = fields[k].default
        if isinstance(default, tuple):
            if not isinstance(v, list):
                raise ConfigError(f"{section}.{k} must be a list")
            v = tuple(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{section}.{k} must be a boolean")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{section}.{k} must be a number")
            if isinstance(default, int) and not float(v).is_integer():
                raise ConfigError(f"{section}.{k} must be an integer")
            v = type(default)(v)
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{section}.{k} must be a string")
        values[k] = v
    return cls(**values)


def config_from_dict(doc: dict) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    return Config(**{name: _coerce(cls, name, doc.get(name, {})) for name, cls in _SECTIONS.items()})


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)
