"""Run configuration: one JSON document drives every pipeline stage.

The emitted default config lists every hyperparameter with its default value,
so a saved config doubles as documentation of the run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .errors import ValidationError

CHALLENGES = ("repeated_holdout", "leave_one_tissue_out", "transfer")
POPULATIONS = ("full", "train")


@dataclass(frozen=True)
class CurationConfig:
    study_priority: tuple[str, ...] = ()
    min_samples: int = 5
    min_label_sd: float | None = None
    sample_exclude: tuple[str, ...] = ()  # manual outlier list


@dataclass(frozen=True)
class PreprocessConfig:
    k_per_dataset: int = 5000
    fit_population: str = "full"  # standardization statistics: full corpus or train split

    def __post_init__(self):
        if self.fit_population not in POPULATIONS:
            raise ValidationError(f"fit_population must be one of {POPULATIONS}")


@dataclass(frozen=True)
class DamaeParams:
    hidden_dim: int = 512
    latent_dim: int = 256
    dropout: float = 0.2
    mask_rate: float = 0.3
    noise_sd: float = 0.01
    max_epochs: int = 3000
    patience: int = 20
    min_delta: float = 1e-5
    holdout_fraction: float = 0.1
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    train_population: str = "full"  # transductive (full corpus) by default

    def __post_init__(self):
        if self.train_population not in POPULATIONS:
            raise ValidationError(f"train_population must be one of {POPULATIONS}")


@dataclass(frozen=True)
class TuneParams:
    n_folds: int = 5
    grouping: str = "by_sample"
    n_alphas: int = 10
    alpha_eps: float = 1e-3
    cd_tolerance: float = 1e-4
    cd_max_passes: int = 1000
    l1_ratio: float = 1.0


@dataclass(frozen=True)
class EnsembleParams:
    n_representations: int = 5
    seeds: tuple[int, ...] | None = None  # derived from the master seed when None


@dataclass(frozen=True)
class TaskParams:
    challenge: str = "repeated_holdout"
    fraction: float = 0.2
    repeats: int = 10
    test_subset_size: int = 10
    n_bootstrap: int = 1000
    removed_per_repeat: int = 10
    transfer_test_tag: str | None = None  # dataset_tag that marks the test domain

    def __post_init__(self):
        if self.challenge not in CHALLENGES:
            raise ValidationError(f"challenge must be one of {CHALLENGES}")


@dataclass(frozen=True)
class RunConfig:
    expression_path: str = "expression.csv"
    metadata_path: str | None = "metadata.csv"
    response_path: str = "responses.csv"
    output_dir: str = "leap_out"
    synthetic: SyntheticSpec | None = None
    curation: CurationConfig = field(default_factory=CurationConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    damae: DamaeParams = field(default_factory=DamaeParams)
    tune: TuneParams = field(default_factory=TuneParams)
    ensemble: EnsembleParams = field(default_factory=EnsembleParams)
    task: TaskParams = field(default_factory=TaskParams)
    master_seed: int = 0
    workers: int = 1
    baseline_knn: bool = False
    knn_k: int = 5


_NESTED = {
    "synthetic": SyntheticSpec,
    "curation": CurationConfig,
    "preprocess": PreprocessConfig,
    "damae": DamaeParams,
    "tune": TuneParams,
    "ensemble": EnsembleParams,
    "task": TaskParams,
}


def _build(cls, payload: dict):
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - field_names
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if key in _NESTED and value is not None:
            value = _build(_NESTED[key], value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(payload: dict) -> RunConfig:
    return _build(RunConfig, payload)


def load_config(path) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON config: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return config_from_dict(payload)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
        newline="\n",
    )


def default_config() -> RunConfig:
    """Defaults for every stage, including a small synthetic dataset so a
    fresh config runs end to end without external data."""
    return RunConfig(synthetic=SyntheticSpec())
