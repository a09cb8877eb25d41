"""Run configuration: one JSON file drives data, training, distillation and benchmarking."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .distill import DistillConfig
from .errors import ParameterError
from .swin import SwinConfig


@dataclass
class DataConfig:
    n_train: int = 5120
    n_eval: int = 1024


@dataclass
class TeacherConfig:
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32


@dataclass
class CalibConfig:
    num_samples: int = 512
    batch_size: int = 128


@dataclass
class BenchConfig:
    warmup: int = 50
    iters: int = 1000
    batch_size: int = 32
    trials: int = 100
    trial_iters: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    model: SwinConfig = field(default_factory=SwinConfig)
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    eval_batch_size: int = 128

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def meta(self, **extra) -> dict:
        return {"seed": self.seed, "config_hash": self.hash(), "config": self.to_dict(), **extra}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {
            "model": SwinConfig,
            "data": DataConfig,
            "teacher": TeacherConfig,
            "distill": DistillConfig,
            "calib": CalibConfig,
            "bench": BenchConfig,
        }
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                allowed = {f.name for f in fields(sections[key])}
                unknown = set(value) - allowed
                if unknown:
                    raise ParameterError(f"unknown keys in config section '{key}': {sorted(unknown)}")
                kwargs[key] = sections[key](**value)
            elif key in ("seed", "eval_batch_size"):
                kwargs[key] = int(value)
            else:
                raise ParameterError(f"unknown config key '{key}'")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
