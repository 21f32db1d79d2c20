"""Run configuration: one TOML/JSON document with a stable content hash.

The hash covers every field that affects computation (seed, model,
training, analysis, inversion, perceptual study) but not filesystem
paths, so the same run written to a different directory keeps the same
provenance hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .inversion import InversionConfig
from .losses import LossWeights, PerturbationConfig
from .percept import DOMAINS, PerturbSpec
from .training import TrainConfig


@dataclass
class ModelConfig:
    backbone: str = "small"
    backbone_channels: int = 64
    feature_channels: int = 128


@dataclass
class AnalysisConfig:
    cluster_count: int = 4
    mask_percentile: float = 50.0
    activation_mode: str = "masked"  # or "raw"
    trait_samples: int = 400
    trait_components: int | None = None
    salient_percentile: float = 80.0
    concept_names: dict = field(default_factory=dict)  # cluster id -> name


@dataclass
class PerceptConfig:
    spec: PerturbSpec = field(default_factory=PerturbSpec)
    samples_per_category: int = 500
    domains: list = field(default_factory=lambda: list(DOMAINS))


@dataclass
class PathsConfig:
    data: str = ""
    out: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    augment: bool = False
    augment_copies: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    percept: PerceptConfig = field(default_factory=PerceptConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("paths", None)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _build(cls, data: dict, nested: dict | None = None):
    """Construct a dataclass from a plain dict, ignoring unknown keys."""
    nested = nested or {}
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ValueError(f"unknown {cls.__name__} field: '{key}'")
        kwargs[key] = nested[key](value) if key in nested and isinstance(value, dict) else value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(
        RunConfig,
        data,
        nested={
            "model": lambda d: _build(ModelConfig, d),
            "train": lambda d: _build(
                TrainConfig,
                d,
                nested={
                    "loss_weights": lambda w: _build(LossWeights, w),
                    "perturbation": lambda p: _build(PerturbationConfig, p),
                },
            ),
            "inversion": lambda d: _build(InversionConfig, d),
            "percept": lambda d: _build(
                PerceptConfig, d, nested={"spec": lambda s: _build(PerturbSpec, s)}
            ),
            "analysis": lambda d: _build(AnalysisConfig, d),
            "paths": lambda d: _build(PathsConfig, d),
        },
    )


def load_config(path) -> RunConfig:
    """Read a RunConfig from a .toml or .json file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(text)
    elif path.suffix == ".json":
        data = json.loads(text)
    else:
        raise ValueError(f"config must be .toml or .json, got '{path.suffix}'")
    return config_from_dict(data)


def write_json(path, payload: dict):
    """Canonical JSON artifact writer (sorted keys, trailing newline)."""
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
