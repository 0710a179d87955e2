"""Run configuration: a YAML key tree with strict unknown-key rejection."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .clip_sim import INIT_TEMPLATES, TaskConfig
from .io import dumps, sha256_text
from .losses import LossWeights
from .metrics import BinningConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = tuple(range(10))
    shots: tuple[int, ...] = (4, 8, 16, 32)
    templates: tuple[str, ...] = INIT_TEMPLATES
    sigma_grid: tuple[float, ...] = (0.4, 0.6, 0.8)
    n_eval: int = 200


_TRAIN_KEYS = ("lr", "batch_size", "epochs", "variance_convention", "moment_class_subsample",
               "mbls_weight", "mbls_cap")
_WEIGHT_KEYS = ("alpha", "beta", "lambda_margin", "lambda_mom", "tau")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: BinningConfig = field(default_factory=BinningConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        train = {k: getattr(self.train, k) for k in _TRAIN_KEYS}
        train.update({k: getattr(self.train.weights, k) for k in _WEIGHT_KEYS})
        return {
            "seed": self.seed,
            "task": dataclasses.asdict(self.task),
            "train": train,
            "metrics": dataclasses.asdict(self.metrics),
            "experiment": {k: list(v) if isinstance(v, tuple) else v
                           for k, v in dataclasses.asdict(self.experiment).items()},
        }

    def digest(self) -> str:
        return sha256_text(dumps(self.to_dict(), indent=None))

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed if seed is None else seed)


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a mapping")
    return value


def from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys("root", raw, ("seed", "task", "train", "metrics", "experiment"))
    try:
        task_raw = _section(raw, "task")
        _check_keys("task", task_raw, [f.name for f in dataclasses.fields(TaskConfig)])
        task = TaskConfig(**task_raw)

        train_raw = _section(raw, "train")
        _check_keys("train", train_raw, _TRAIN_KEYS + _WEIGHT_KEYS)
        weights = LossWeights(**{k: float(train_raw[k]) for k in _WEIGHT_KEYS if k in train_raw})
        train = TrainConfig(weights=weights, **{k: train_raw[k] for k in _TRAIN_KEYS if k in train_raw})

        metrics_raw = _section(raw, "metrics")
        _check_keys("metrics", metrics_raw, ("num_bins", "scheme"))
        metrics = BinningConfig(**metrics_raw)

        exp_raw = _section(raw, "experiment")
        _check_keys("experiment", exp_raw, [f.name for f in dataclasses.fields(ExperimentConfig)])
        exp = ExperimentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in exp_raw.items()})
        seed = int(raw.get("seed", 0))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return RunConfig(seed=seed, task=task, train=dataclasses.replace(train, seed=seed), metrics=metrics,
                     experiment=exp)


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
