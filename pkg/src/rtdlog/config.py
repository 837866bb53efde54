"""Run configuration: defaults <- JSON config file <- command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import SplitSpec, Window
from .electra import TrainingConfig


@dataclass
class RunConfig:
    dataset: str | None = None
    profile: str = "bgl"
    normalizer: str | None = None
    vocab_size: int = 8192
    max_len: int = 128
    preset: str = "desk"
    lam: float = 50.0
    mask_prob: float = 0.15
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 16
    max_steps: int | None = None
    warmup_steps: int = 50
    seed: int = 0
    group: list[str] = field(default_factory=lambda: ["count:100", "minutes:60"])
    split: str = "random:0"
    train_fraction: float = 0.8
    threshold: str = "auto"
    holdout: float = 0.0
    out: str | None = None

    def __post_init__(self):
        self.split_spec()
        self.windows()
        if self.threshold != "auto":
            float(self.threshold)
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")

    def split_spec(self) -> SplitSpec:
        return SplitSpec.parse(self.split, self.train_fraction)

    def windows(self) -> list[Window]:
        return [Window.parse(g) for g in self.group]

    def training_config(self) -> TrainingConfig:
        return TrainingConfig.preset(
            self.preset, lam=self.lam, mask_prob=self.mask_prob, batch_size=self.batch_size,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay, epochs=self.epochs,
            max_steps=self.max_steps, warmup_steps=self.warmup_steps, seed=self.seed, max_len=self.max_len,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def merged(self, overrides: dict) -> "RunConfig":
        d = asdict(self)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
