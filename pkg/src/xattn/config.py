"""Model, data, and training configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the detector and its attention tensors.

    Per-head size ``s = d / n_h`` must divide exactly; tokens per camera
    ``n_t = grid_h * grid_w``; image size is the token grid times the patch
    edge length.
    """

    n_c: int = 6
    n_l: int = 6
    n_h: int = 4
    n_q: int = 16
    d: int = 64
    grid_h: int = 8
    grid_w: int = 8
    patch: int = 8
    n_classes: int = 4
    threshold: float = 0.3

    def __post_init__(self):
        if self.d % self.n_h != 0:
            raise ValueError(f"embed dim {self.d} not divisible by {self.n_h} heads")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        for name in ("n_c", "n_l", "n_h", "n_q", "d", "grid_h", "grid_w", "patch", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def s(self) -> int:
        return self.d // self.n_h

    @property
    def n_t(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def image_h(self) -> int:
        return self.grid_h * self.patch

    @property
    def image_w(self) -> int:
        return self.grid_w * self.patch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class ScenegenParams:
    """Knobs for one synthetic scene."""

    n_c: int = 6
    image_h: int = 64
    image_w: int = 64
    n_objects: int = 3
    n_classes: int = 4
    noise_amplitude: float = 0.1
    radius_min: float = 0.08
    radius_max: float = 0.18
    max_overlap: float = 0.2
    max_attempts: int = 1000

    @classmethod
    def for_model(cls, cfg: ModelConfig, **overrides) -> "ScenegenParams":
        base = dict(
            n_c=cfg.n_c,
            image_h=cfg.image_h,
            image_w=cfg.image_w,
            n_classes=cfg.n_classes,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class TrainParams:
    steps: int = 5000
    lr: float = 2e-3
    batch_size: int = 4
    center_weight: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 500


@dataclass(frozen=True)
class DataParams:
    n_scenes: int = 200
    objects_min: int = 1
    objects_max: int = 4
    noise_amplitude: float = 0.1
    radius_min: float = 0.08
    radius_max: float = 0.18


@dataclass
class RunConfig:
    """Effective configuration of a CLI run; echoed into output dirs."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainParams = field(default_factory=TrainParams)
    data: DataParams = field(default_factory=DataParams)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            model=ModelConfig(**d.get("model", {})),
            train=TrainParams(**d.get("train", {})),
            data=DataParams(**d.get("data", {})),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def echo(self, out_dir: str | Path) -> Path:
        """Write the effective config next to the run's artifacts."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        target = out / "config.echo.json"
        with open(target, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return target
