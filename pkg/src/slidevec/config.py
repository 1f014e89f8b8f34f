"""Experiment configuration: one JSON file drives every pipeline command.

Command-line flags override file values; one master seed fans out to every
randomized stage through :mod:`slidevec.seeds`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .clustering import DEFAULT_K, KmeansConfig
from .evaluation import DEFAULT_MAX_INSTANCES, SplitSpec
from .mil import DEFAULT_ATTENTION_WIDTH, DEFAULT_HIDDEN_WIDTH, TrainConfig
from .tiling import NucleiConfig, TissueConfig


@dataclass(frozen=True)
class FilterConfig:
    nuclei_min: int = 10
    tissue_min: float = 0.5


@dataclass
class ExperimentConfig:
    slides_dir: str | None = None
    features_dir: str | None = None
    work_dir: str | None = None
    seed: int = 0
    jobs: int = 1
    k: int | str = DEFAULT_K  # integer, or "elbow" to pick via the WCSS curve
    classifier: str = "amil"
    elbow_k_min: int = 2
    elbow_k_max: int = 30
    elbow_sample: int = 20000  # cap on pooled points used for the curve
    max_instances: int = DEFAULT_MAX_INSTANCES
    attention_width: int = DEFAULT_ATTENTION_WIDTH
    hidden_width: int = DEFAULT_HIDDEN_WIDTH
    tissue: TissueConfig = field(default_factory=TissueConfig)
    nuclei: NucleiConfig = field(default_factory=NucleiConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    kmeans: KmeansConfig = field(default_factory=KmeansConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)

    def to_dict(self) -> dict:
        return {
            "slides_dir": self.slides_dir,
            "features_dir": self.features_dir,
            "work_dir": self.work_dir,
            "seed": self.seed,
            "jobs": self.jobs,
            "k": self.k,
            "classifier": self.classifier,
            "elbow_k_min": self.elbow_k_min,
            "elbow_k_max": self.elbow_k_max,
            "elbow_sample": self.elbow_sample,
            "max_instances": self.max_instances,
            "attention_width": self.attention_width,
            "hidden_width": self.hidden_width,
            "tissue": dataclasses.asdict(self.tissue),
            "nuclei": dataclasses.asdict(self.nuclei),
            "filter": dataclasses.asdict(self.filter),
            "kmeans": dataclasses.asdict(self.kmeans),
            "augment": {
                "scale_min": self.augment.scale_min,
                "scale_max": self.augment.scale_max,
                "jitter_level": self.augment.jitter_level,
                "mixup_alpha": self.augment.mixup_alpha,
                "augment_enabled": self.augment.enabled,
            },
            "train": {
                "learning_rate": self.train.learning_rate,
                "weight_decay": self.train.weight_decay,
                "beta1": self.train.beta1,
                "beta2": self.train.beta2,
                "eps": self.train.eps,
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
            },
            "split": {"ratios": list(self.split.ratios)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {
            "slides_dir", "features_dir", "work_dir", "seed", "jobs", "k", "classifier",
            "elbow_k_min", "elbow_k_max", "elbow_sample", "max_instances",
            "attention_width", "hidden_width",
            "tissue", "nuclei", "filter", "kmeans", "augment", "train", "split",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        simple = {
            k: d[k]
            for k in (
                "slides_dir", "features_dir", "work_dir", "seed", "jobs", "k", "classifier",
                "elbow_k_min", "elbow_k_max", "elbow_sample", "max_instances",
                "attention_width", "hidden_width",
            )
            if k in d
        }
        augment = cfg.augment
        if "augment" in d:
            a = dict(d["augment"])
            augment = AugmentConfig(
                scale_min=a.get("scale_min", augment.scale_min),
                scale_max=a.get("scale_max", augment.scale_max),
                jitter_level=a.get("jitter_level", augment.jitter_level),
                mixup_alpha=a.get("mixup_alpha", augment.mixup_alpha),
                enabled=a.get("augment_enabled", augment.enabled),
            )
        train = cfg.train
        if "train" in d:
            t = dict(d["train"])
            train = TrainConfig(
                learning_rate=t.get("learning_rate", train.learning_rate),
                weight_decay=t.get("weight_decay", train.weight_decay),
                beta1=t.get("beta1", train.beta1),
                beta2=t.get("beta2", train.beta2),
                eps=t.get("eps", train.eps),
                epochs=t.get("epochs", train.epochs),
                batch_size=t.get("batch_size", train.batch_size),
            )
        split = cfg.split
        if "split" in d:
            split = SplitSpec(ratios=tuple(d["split"].get("ratios", cfg.split.ratios)))
        return dataclasses.replace(
            cfg,
            **simple,
            tissue=TissueConfig(**d["tissue"]) if "tissue" in d else cfg.tissue,
            nuclei=NucleiConfig(**d["nuclei"]) if "nuclei" in d else cfg.nuclei,
            filter=FilterConfig(**d["filter"]) if "filter" in d else cfg.filter,
            kmeans=KmeansConfig(**d["kmeans"]) if "kmeans" in d else cfg.kmeans,
            augment=augment,
            train=train,
            split=split,
        )

    @classmethod
    def from_file(cls, path: Path | str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: Path | str) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
