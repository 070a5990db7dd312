"""Run configuration: a YAML file with nested sections, validated field by field."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .baselines import TrunkConfig
from .pipeline import CreateConfig, ModelConfig, SearchConfig, SeuConfig, TrainConfig

METHODS = ("seu", "sgd_baseline")
SEQUENCE_KINDS = ("split", "permuted")
OUT_ENV = "SEULAB_OUT"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(name, "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown field")
    obj = cls(**data)
    for fname, f in fields.items():
        value = getattr(obj, fname)
        default = getattr(cls(), fname)
        if isinstance(default, bool):
            continue
        if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{name}.{fname}", f"expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float) \
                and not value.is_integer():
            raise ConfigError(f"{name}.{fname}", f"expected an integer, got {value!r}")
        if isinstance(value, (int, float)) and fname not in ("split_seed", "weight_decay") and value <= 0:
            raise ConfigError(f"{name}.{fname}", f"must be positive, got {value!r}")
        if fname == "weight_decay" and value < 0:
            raise ConfigError(f"{name}.{fname}", "must be non-negative")
    return obj


@dataclass
class RunConfig:
    sequence: Dict[str, Any]
    method: str = "seu"
    seed: int = 0
    output_dir: Optional[str] = None
    cache: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    create: CreateConfig = field(default_factory=CreateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: TrunkConfig = field(default_factory=TrunkConfig)

    @property
    def seu(self) -> SeuConfig:
        return SeuConfig(self.model, self.search, self.create, self.train)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        method = data.get("method", "seu")
        if method not in METHODS:
            raise ConfigError("method", f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed", f"expected a non-negative integer, got {seed!r}")
        seq = data.get("sequence")
        if not isinstance(seq, dict):
            raise ConfigError("sequence", "missing or not a mapping")
        if seq.get("kind") not in SEQUENCE_KINDS:
            raise ConfigError("sequence.kind", f"expected one of {', '.join(SEQUENCE_KINDS)}, got {seq.get('kind')!r}")
        if not isinstance(seq.get("dataset"), str):
            raise ConfigError("sequence.dataset", "dataset name required")
        if seq["kind"] == "split" and not isinstance(seq.get("classes_per_task"), int):
            raise ConfigError("sequence.classes_per_task", "integer required for split sequences")
        if seq["kind"] == "permuted" and not isinstance(seq.get("n_tasks"), int):
            raise ConfigError("sequence.n_tasks", "integer required for permuted sequences")
        model = _section(ModelConfig, data.get("model"), "model")
        if model.reduction_layers is not None and (
                not isinstance(model.reduction_layers, list)
                or any(not isinstance(k, int) or not 1 <= k <= model.n_layers for k in model.reduction_layers)):
            raise ConfigError("model.reduction_layers", f"expected layer numbers in 1..{model.n_layers}")
        return cls(
            sequence=dict(seq),
            method=method,
            seed=seed,
            output_dir=data.get("output_dir"),
            cache=data.get("cache"),
            model=model,
            search=_section(SearchConfig, data.get("search"), "search"),
            create=_section(CreateConfig, data.get("create"), "create"),
            train=_section(TrainConfig, data.get("train"), "train"),
            baseline=_section(TrunkConfig, data.get("baseline"), "baseline"),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
        except OSError as exc:
            raise ConfigError("<file>", str(exc)) from exc
        return cls.from_dict(data)


def resolve_output(cfg: RunConfig, override: Optional[str] = None) -> Path:
    if override:
        return Path(override)
    root = os.environ.get(OUT_ENV)
    name = cfg.output_dir or f"runs/{cfg.method}-seed{cfg.seed}"
    if root and not Path(name).is_absolute():
        return Path(root) / name
    return Path(name)
