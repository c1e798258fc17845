"""Experiment configuration: one YAML file describing a complete run."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import yaml

from .exceptions import ValidationError
from .models import ArchitectureId
from .training import TrainingConfig
from .transforms import AugmentConfig, PreprocessConfig

CHECKPOINT_MODES = ("full", "head", "none")


@dataclass(frozen=True)
class SyntheticSection:
    n_pos: int = 20
    n_neg: int = 20
    image_size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class DatasetSection:
    cohen_root: str | None = None
    cohen_metadata: str | None = None
    cohen_snapshot: str = ""
    kaggle_root: str | None = None
    kaggle_fraction: float = 0.2
    kaggle_seed: int = 0
    build_seed: int = 0
    synthetic: SyntheticSection | None = None


@dataclass(frozen=True)
class SplitSection:
    k: int = 10
    seed: int = 0


@dataclass(frozen=True)
class ModelSection:
    pretrained: bool = True
    weights_paths: dict = field(default_factory=dict)
    checkpoints: str = "full"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = DatasetSection()
    split: SplitSection = SplitSection()
    architectures: tuple[ArchitectureId, ...] = tuple(ArchitectureId)
    preprocess: PreprocessConfig = PreprocessConfig()
    augment: AugmentConfig = AugmentConfig()
    training: TrainingConfig = TrainingConfig()
    model: ModelSection = ModelSection()
    output_dir: str = "runs/default"

    def __post_init__(self):
        archs = tuple(ArchitectureId.coerce(a) for a in self.architectures)
        if not archs:
            raise ValidationError("at least one architecture is required")
        object.__setattr__(self, "architectures", archs)
        if self.split.k < 2:
            raise ValidationError(f"split.k must be at least 2, got {self.split.k}")
        if self.model.checkpoints not in CHECKPOINT_MODES:
            raise ValidationError(f"model.checkpoints must be one of {CHECKPOINT_MODES}")

    def to_dict(self) -> dict:
        d = {
            "dataset": asdict(self.dataset),
            "split": asdict(self.split),
            "architectures": [a.value for a in self.architectures],
            "preprocess": self.preprocess.to_dict(),
            "augment": self.augment.to_dict(),
            "training": self.training.to_dict(),
            "model": asdict(self.model),
            "output_dir": self.output_dir,
        }
        d["model"]["weights_paths"] = dict(self.model.weights_paths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        _reject_unknown(d, {f.name for f in fields(cls)}, "config")
        kwargs = {}
        if "dataset" in d:
            ds = dict(d["dataset"] or {})
            _reject_unknown(ds, {f.name for f in fields(DatasetSection)}, "dataset")
            if ds.get("synthetic") is not None:
                syn = dict(ds["synthetic"])
                _reject_unknown(syn, {f.name for f in fields(SyntheticSection)}, "dataset.synthetic")
                ds["synthetic"] = SyntheticSection(**syn)
            kwargs["dataset"] = DatasetSection(**ds)
        for key, typ in (("split", SplitSection), ("model", ModelSection),
                         ("training", TrainingConfig), ("augment", AugmentConfig), ("preprocess", PreprocessConfig)):
            if key in d:
                section = dict(d[key] or {})
                _reject_unknown(section, {f.name for f in fields(typ)}, key)
                if "rotation_range_degrees" in section:
                    section["rotation_range_degrees"] = tuple(section["rotation_range_degrees"])
                kwargs[key] = typ(**section)
        if "architectures" in d:
            kwargs["architectures"] = tuple(d["architectures"])
        if "output_dir" in d:
            kwargs["output_dir"] = str(d["output_dir"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override the split and training seeds (and the synthetic seed, if any)."""
        dataset = self.dataset
        if dataset.synthetic is not None:
            dataset = replace(dataset, synthetic=replace(dataset.synthetic, seed=seed))
        return replace(self, dataset=dataset, split=replace(self.split, seed=seed),
                       training=replace(self.training, seed=seed))


def _reject_unknown(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")


def default_config_path() -> Path:
    return Path(str(resources.files("cxrbench") / "data" / "default_config.yaml"))


def default_config() -> ExperimentConfig:
    return ExperimentConfig.load(default_config_path())
