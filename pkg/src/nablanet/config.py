"""Run configuration with per-task training-recipe defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from nablanet.models import ModelSpec

# training recipes: segmentation with Adam/BCE, classification with SGD/CCE and step decay
RECIPES = {
    "segment": dict(
        optimizer="adam", lr=3e-4, momentum=0.9, epochs=250, batch_size=8, loss="bce",
        lr_step_every=0, lr_step_factor=10.0, input_size=256, family="nabla",
    ),
    "classify": dict(
        optimizer="sgd", lr=0.01, momentum=0.9, epochs=150, batch_size=8, loss="cce",
        lr_step_every=50, lr_step_factor=10.0, input_size=192, family="irrcnn",
    ),
}


@dataclass
class RunConfig:
    task: str = "segment"
    # model
    variant: str = "AB"
    n_decoders: int = 2
    widths: Optional[list] = None
    t: int = 2
    input_size: Optional[int] = None
    in_channels: int = 3
    classes: int = 7
    # recipe (None -> task default)
    optimizer: Optional[str] = None
    lr: Optional[float] = None
    momentum: Optional[float] = None
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    loss: Optional[str] = None
    lr_step_every: Optional[int] = None
    lr_step_factor: Optional[float] = None
    seed: int = 0
    # data
    data_dir: Optional[str] = None
    synth_n: int = 0
    synth_size: int = 32
    synth_seed: int = 0
    train_fraction: Optional[float] = None
    train_count: Optional[int] = None
    val_fraction: float = 0.1
    augment: bool = False
    # run
    transfer_from: Optional[str] = None
    output_dir: str = "runs/default"
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.task not in RECIPES:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(RECIPES)}")
        for key, value in RECIPES[self.task].items():
            if key != "family" and getattr(self, key) is None:
                setattr(self, key, value)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("bce", "cce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    @property
    def family(self) -> str:
        return RECIPES[self.task]["family"]

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            family=self.family,
            variant=self.variant,
            n_decoders=self.n_decoders,
            widths=tuple(self.widths) if self.widths else None,
            t=self.t,
            input_size=self.input_size,
            in_channels=self.in_channels,
            classes=self.classes,
            seed=self.seed,
        )

    def lr_at(self, epoch: int) -> float:
        from nablanet.optim import lr_schedule

        if not self.lr_step_every:
            return self.lr
        return lr_schedule(epoch, self.lr, self.lr_step_every, self.lr_step_factor)

    def lr_milestones(self) -> list:
        """Epochs at which the learning rate drops."""
        return [e for e in range(1, self.epochs) if self.lr_at(e) < self.lr_at(e - 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, overrides: Optional[list] = None) -> "RunConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        d.update(parse_overrides(overrides or []))
        return cls.from_dict(d)


def parse_overrides(items: list) -> dict:
    """``k=v`` strings; values are parsed as JSON when possible."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out
