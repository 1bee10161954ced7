"""Experiment configuration loaded from YAML.

An empty file gives the full-scale protocol: 256 x 256 models, 200 epochs with
100 steady, five seeds, base width 64. Unknown keys are rejected so typos fail
early. Relative paths resolve against ``$BIASTRANSFER_OUTPUT_ROOT`` when set,
otherwise against the working directory.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import BiasTransferError, ConfigError
from .losses import ExtraLossConfig, LossWeights
from .networks import ARCHITECTURES
from .synthdata import BenchmarkSpec, DomainBias, PhantomSpec, benchmark_spec_dict, benchmark_spec_from_dict
from .training import TrainConfig, train_config_from_dict

OUTPUT_ROOT_ENV = "BIASTRANSFER_OUTPUT_ROOT"
METRICS = ("ssim", "ms_ssim", "fid", "downstream")


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    new_domain: str = "NEW"
    target_domain: str = "TAR"


@dataclass(frozen=True)
class DownstreamConfig:
    seed: int = 0
    epochs: int = 60
    min_accuracy: float = 0.85


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: str = "cyclegan"
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    metrics: tuple[str, ...] = METRICS
    output_dir: str = "runs"
    baseline_seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise ConfigError(f"unknown metrics {sorted(bad)}")

    @property
    def extra(self) -> ExtraLossConfig:
        return self.train.extra

    def resolve(self, path: str | Path) -> Path:
        path = Path(path)
        if path.is_absolute():
            return path
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return (Path(root) if root else Path.cwd()) / path

    @property
    def data_root(self) -> Path:
        return self.resolve(self.data.root)

    @property
    def output_path(self) -> Path:
        return self.resolve(self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["synth"] = benchmark_spec_dict(self.synth)
        return json.loads(json.dumps(d))


def _check_keys(section: str, given: dict, cls) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}; allowed: {sorted(allowed)}")


def config_from_dict(d: dict | None) -> ExperimentConfig:
    d = dict(d or {})
    _check_keys("config", d, ExperimentConfig)
    try:
        train_d = dict(d.pop("train", {}) or {})
        _check_keys("train", train_d, TrainConfig)
        for key, cls in (("extra", ExtraLossConfig), ("weights", LossWeights)):
            if key in train_d:
                _check_keys(f"train.{key}", train_d[key], cls)
        data = d.pop("data", {}) or {}
        _check_keys("data", data, DataConfig)
        synth = d.pop("synth", {}) or {}
        _check_keys("synth", synth, BenchmarkSpec)
        for key, cls in (("phantom", PhantomSpec), ("tar_bias", DomainBias), ("new_bias", DomainBias)):
            if key in synth:
                _check_keys(f"synth.{key}", synth[key], cls)
        down = d.pop("downstream", {}) or {}
        _check_keys("downstream", down, DownstreamConfig)
        if "metrics" in d:
            d["metrics"] = tuple(d["metrics"])
        return ExperimentConfig(
            train=train_config_from_dict(train_d),
            data=DataConfig(**data),
            synth=benchmark_spec_from_dict(synth),
            downstream=DownstreamConfig(**down),
            **d,
        )
    except BiasTransferError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid configuration: {err}") from err


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from err
    return config_from_dict(raw)
