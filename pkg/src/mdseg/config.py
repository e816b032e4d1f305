"""Experiment configuration files (YAML) and dotted-key overrides."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .synthgen import DomainSpec, default_domains
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str = "data"
    volumes_per_domain: int = 10
    volume_shape: tuple[int, int, int] = (128, 64, 64)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    domains: list[DomainSpec] = field(default_factory=default_domains)


@dataclass
class EvalConfig:
    max_folds: int | None = None
    fold: int = 0


@dataclass
class AnalysisConfig:
    n_pairs: int = 100_000
    scales: tuple[int, ...] = (1, 5, 9)
    perplexity: float = 30.0
    learning_rate: float = 200.0
    max_points: int = 600


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/experiment"
    prior_checkpoint: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    base_dir: Path = field(default=Path("."), repr=False)

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def data_dir(self) -> Path:
        return self.resolve(self.data.dir)

    @property
    def run_dir(self) -> Path:
        return self.resolve(self.output_dir)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "prior_checkpoint": self.prior_checkpoint,
            "data": {"dir": self.data.dir, "volumes_per_domain": self.data.volumes_per_domain,
                     "volume_shape": list(self.data.volume_shape), "spacing_mm": list(self.data.spacing_mm),
                     "domains": [d.to_dict() for d in self.data.domains]},
            "train": self.train.to_dict(),
            "evaluation": {"max_folds": self.evaluation.max_folds, "fold": self.evaluation.fold},
            "analysis": {"n_pairs": self.analysis.n_pairs, "scales": list(self.analysis.scales),
                         "perplexity": self.analysis.perplexity, "learning_rate": self.analysis.learning_rate,
                         "max_points": self.analysis.max_points},
        }

    def validate(self) -> "ExperimentConfig":
        if self.data.volumes_per_domain < 3:
            raise ConfigError("the leave-one-out protocol needs >= 3 volumes per domain")
        ids = [d.domain_id for d in self.data.domains]
        if len(set(ids)) != len(ids) or not ids:
            raise ConfigError("domain ids must be unique and non-empty")
        try:
            self.train.validate(len(ids))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.train.strategy == "transfer" and self.train.source_domain not in ids:
            raise ConfigError(f"source domain {self.train.source_domain} is not configured")
        return self


def _known(cls, d: Mapping, where: str) -> dict:
    names = set(cls.__dataclass_fields__) - {"base_dir"}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return dict(d)


def from_dict(raw: Mapping, base_dir: Path | str = ".") -> ExperimentConfig:
    raw = _known(ExperimentConfig, raw or {}, "config")
    try:
        data = _known(DataConfig, raw.pop("data", {}) or {}, "data")
        if "domains" in data:
            data["domains"] = default_domains() if data["domains"] == "default" else \
                [DomainSpec.from_dict(d) for d in data["domains"]]
        for key in ("volume_shape", "spacing_mm"):
            if key in data:
                data[key] = tuple(data[key])
        train = TrainConfig.from_dict(_known(TrainConfig, raw.pop("train", {}) or {}, "train"))
        evaluation = EvalConfig(**_known(EvalConfig, raw.pop("evaluation", {}) or {}, "evaluation"))
        analysis = _known(AnalysisConfig, raw.pop("analysis", {}) or {}, "analysis")
        if "scales" in analysis:
            analysis["scales"] = tuple(analysis["scales"])
        cfg = ExperimentConfig(data=DataConfig(**data), train=train, evaluation=evaluation,
                               analysis=AnalysisConfig(**analysis), base_dir=Path(base_dir), **raw)
    except ConfigError:
        raise
    except (TypeError, KeyError, ValueError) as e:
        raise ConfigError(f"malformed config: {e}") from None
    return cfg


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """``a.b.c=value`` pairs; values are parsed as YAML scalars/lists."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-mapping key {key!r}")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load(path: str | Path | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw: dict[str, Any] = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
        base = path.parent
    return from_dict(apply_overrides(raw, overrides), base).validate()


def dump(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
