"""Experiment configuration: one JSON document that fully determines a run."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

from .data import SynthConfig
from .segnet import ModelConfig
from .train import StagePlan

SEED_ENV = "STSWIN_SEED"


class ConfigFileError(ValueError):
    """Malformed or inconsistent experiment configuration."""


def _default_stages() -> dict[int, StagePlan]:
    return {1: StagePlan(1, epochs=30), 2: StagePlan(2, epochs=10), 3: StagePlan(3, epochs=20)}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict[int, StagePlan] = field(default_factory=_default_stages)
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    dataset: str | None = None       # existing dataset root; overrides ``synth``
    seed: int = 0
    eval_split: str = "test"
    val_split: str = "val"
    stage2_epoch_grid: tuple[int, ...] = ()

    def __post_init__(self):
        if set(self.stages) != {1, 2, 3}:
            raise ConfigFileError("stages must define plans 1, 2 and 3")
        for k, plan in self.stages.items():
            if plan.stage != k:
                raise ConfigFileError(f"plan under key {k} declares stage {plan.stage}")
        if self.dataset is None and self.synth is None:
            raise ConfigFileError("either dataset or synth must be given")
        self.stage2_epoch_grid = tuple(int(e) for e in self.stage2_epoch_grid)
        if any(e < 1 for e in self.stage2_epoch_grid):
            raise ConfigFileError("stage-2 epoch grid entries must be positive")
        if self.synth is not None and (self.synth.height, self.synth.width) != (self.model.height, self.model.width):
            raise ConfigFileError("synthetic frame size must match the model input size")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "stages": {str(k): p.to_dict() for k, p in sorted(self.stages.items())},
            "synth": None if self.synth is None else asdict(self.synth),
            "dataset": self.dataset,
            "seed": self.seed,
            "eval_split": self.eval_split,
            "val_split": self.val_split,
            "stage2_epoch_grid": list(self.stage2_epoch_grid),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {"model", "stages", "synth", "dataset", "seed", "eval_split", "val_split", "stage2_epoch_grid"}
        unknown = set(d) - known
        if unknown:
            raise ConfigFileError(f"unknown config keys: {sorted(unknown)}")
        try:
            stages = _default_stages()
            for k, p in (d.get("stages") or {}).items():
                stages[int(k)] = StagePlan.from_dict({"stage": int(k), **p})
            synth = d.get("synth", {})
            return cls(
                model=ModelConfig(**d.get("model", {})),
                stages=stages,
                synth=None if synth is None else SynthConfig(**synth),
                dataset=d.get("dataset"),
                seed=int(d.get("seed", 0)),
                eval_split=d.get("eval_split", "test"),
                val_split=d.get("val_split", "val"),
                stage2_epoch_grid=tuple(d.get("stage2_epoch_grid", ())),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def load_config(path: str | Path | None, seed_override: int | None = None) -> ExperimentConfig:
    """Read a config file (or the defaults) and apply seed overrides.

    Precedence: explicit ``seed_override`` > ``STSWIN_SEED`` > file.
    """
    if path is None:
        raw: dict = {}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigFileError(f"{path}: cannot read ({exc})") from exc
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"{path}: malformed JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigFileError(f"{path}: top level must be an object")
    cfg = ExperimentConfig.from_dict(raw)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigFileError(f"{SEED_ENV}={env!r} is not an integer") from exc
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def desk_config(**overrides) -> ExperimentConfig:
    """Small 32x32 setup used by the ordering experiment and the smoke runs."""
    model = ModelConfig(height=32, width=32, clip_length=4)
    synth = SynthConfig(height=32, width=32)
    base = ExperimentConfig(model=model, synth=synth)
    for k, v in overrides.items():
        setattr(base, k, v)
    base.__post_init__()
    return base
