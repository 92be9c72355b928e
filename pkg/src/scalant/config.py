"""Run configuration: a YAML file with nested sections, validated strictly
(unknown keys are rejected) before any work starts."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import ModelConfig
from .training import StageConfig


class ConfigError(Exception):
    pass


@dataclass
class TaskConfig:
    kind: str = "copy"
    n_pairs: int = 20000
    val_pairs: int = 1000
    len_lo: int = 4
    len_hi: int = 12


@dataclass
class DataConfig:
    train_path: str = "train.tsv"
    val_path: str = "val.tsv"
    vocab_path: str = "vocab.txt"
    token_budget: int = 3584
    val_max_pairs: int | None = None
    task: TaskConfig | None = None


@dataclass
class DecodingConfig:
    beam: int = 4
    alpha: float = 0.6
    ratio_cap: float = 20.0
    len_cap: float = 250
    max_sources: int | None = None
    corpus_path: str | None = None          # default: <output_dir>/distill_corpus.tsv
    source_checkpoint: str | None = None    # default: <output_dir>/stage2/final.ckpt


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    model: ModelConfig
    data: DataConfig = field(default_factory=DataConfig)
    stages: dict = field(default_factory=dict)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)

    def stage(self, n: int) -> StageConfig:
        if n not in self.stages:
            raise ConfigError(f"config has no training.stage{n} section")
        return self.stages[n]

    def out_path(self, *parts) -> Path:
        return Path(self.output_dir).joinpath(*parts)


def _build(cls, mapping, where: str):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**mapping)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _build_model(mapping) -> ModelConfig:
    if not isinstance(mapping, dict):
        raise ConfigError("model: expected a mapping")
    mapping = dict(mapping)
    if "width_menu" in mapping:
        mapping["width_menu"] = tuple(mapping["width_menu"])
    if "dropout_by_width" in mapping:
        mapping["dropout_by_width"] = {
            int(k): float(v) for k, v in mapping["dropout_by_width"].items()
        }
    return _build(ModelConfig, mapping, "model")


def _build_stages(mapping, run_seed: int) -> dict:
    stages: dict[int, StageConfig] = {}
    if mapping is None:
        return stages
    if not isinstance(mapping, dict):
        raise ConfigError("training: expected a mapping of stage sections")
    for key, section in mapping.items():
        if not (isinstance(key, str) and key.startswith("stage") and key[5:].isdigit()):
            raise ConfigError(f"training: unknown section {key!r} (expected stage1..stage3)")
        n = int(key[5:])
        section = dict(section or {})
        section.setdefault("stage", n)
        if section["stage"] != n:
            raise ConfigError(f"training.{key}: stage field contradicts section name")
        section.setdefault("seed", run_seed + n)
        stages[n] = _build(StageConfig, section, f"training.{key}")
    return stages


def _build_data(mapping) -> DataConfig:
    mapping = dict(mapping or {})
    task = mapping.pop("task", None)
    data = _build(DataConfig, mapping, "data")
    if task is not None:
        data.task = _build(TaskConfig, task, "data.task")
    return data


TOP_LEVEL_KEYS = {"seed", "output_dir", "model", "data", "training", "decoding"}


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    return run_config_from_dict(raw)


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    for required in ("seed", "output_dir", "model"):
        if required not in raw:
            raise ConfigError(f"missing required key {required!r}")
    seed = int(raw["seed"])
    return RunConfig(
        seed=seed,
        output_dir=str(raw["output_dir"]),
        model=_build_model(raw["model"]),
        data=_build_data(raw.get("data")),
        stages=_build_stages(raw.get("training"), seed),
        decoding=_build(DecodingConfig, raw.get("decoding"), "decoding"),
    )
