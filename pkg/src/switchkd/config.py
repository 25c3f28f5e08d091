"""Run configuration document and on-disk layout of a run directory."""

from __future__ import annotations

import json
from pathlib import Path

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .data import DatasetSpec, Task
from .engine import DistillConfig, Scheme, StageHyper
from .losses import StrategyName
from .model import ModelConfig


class TeacherTraining(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(1, ge=0, lt=2**64)
    pt: StageHyper = StageHyper(learning_rate=1e-3, batch_size=32)
    sft: StageHyper = StageHyper(learning_rate=3e-3, batch_size=32, epochs=8)


class AblateAxes(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    strategies: list[StrategyName] = Field(default_factory=lambda: list(StrategyName))
    switch: list[bool] = Field(default_factory=lambda: [True])
    schemes: list[Scheme] = Field(default_factory=lambda: [Scheme.PT_DFT])

    @field_validator("strategies", "switch", "schemes")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("axis must list at least one value")
        return v


def _student_data() -> DatasetSpec:
    return DatasetSpec(task=Task.MAJORITY_COLOR, n_train=500, n_val=2000, seed=0, noise_level=0.4)


def _teacher_data() -> DatasetSpec:
    return DatasetSpec(task=Task.MAJORITY_COLOR, n_train=2000, n_val=500, seed=1, noise_level=0.0)


def _distill() -> DistillConfig:
    return DistillConfig(ft=StageHyper(learning_rate=3e-3, batch_size=16, epochs=32))


class RunConfig(BaseModel):
    """Everything a command needs; validated before any work starts."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    dataset: DatasetSpec = Field(default_factory=_student_data)
    # None: the teacher trains on ``dataset`` as well
    teacher_dataset: DatasetSpec | None = Field(default_factory=_teacher_data)
    teacher: ModelConfig = ModelConfig(lm_dim=64, lm_layers=2, lm_heads=4)
    student: ModelConfig = ModelConfig(lm_dim=16, lm_layers=1, lm_heads=2)
    teacher_training: TeacherTraining = TeacherTraining()
    distill: DistillConfig = Field(default_factory=_distill)
    ablate: AblateAxes = AblateAxes()
    out_dir: str = "runs/default"
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        if any(s < 0 or s >= 2**64 for s in v):
            raise ValueError("seeds must lie in [0, 2**64)")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    def updated(self, **changes) -> "RunConfig":
        """Copy with top-level fields replaced, re-validated."""
        return RunConfig.model_validate({**self.model_dump(mode="json"), **changes})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=1, sort_keys=True) + "\n"


def load_config(path: str | Path | None) -> RunConfig:
    """Read a JSON or YAML document; ``None`` gives the built-in defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    return RunConfig.model_validate(doc or {})


class Layout:
    """Where each artifact of a run directory lives."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def train_path(self) -> Path:
        return self.data_dir / "train.jsonl"

    @property
    def val_path(self) -> Path:
        return self.data_dir / "val.jsonl"

    @property
    def teacher_data_dir(self) -> Path:
        return self.root / "teacher_data"

    def teacher_train_path(self, cfg: RunConfig) -> Path:
        return self.teacher_data_dir / "train.jsonl" if cfg.teacher_dataset else self.train_path

    def teacher_val_path(self, cfg: RunConfig) -> Path:
        return self.teacher_data_dir / "val.jsonl" if cfg.teacher_dataset else self.val_path

    @property
    def teacher_dir(self) -> Path:
        return self.root / "teacher"

    @property
    def teacher_checkpoint(self) -> Path:
        return self.teacher_dir / "teacher"

    def distill_dir(self, scheme: str, strategy: str, switch: bool, seed: int) -> Path:
        return self.root / "distill" / cell_key(scheme, strategy, switch, seed)

    @property
    def ablate_dir(self) -> Path:
        return self.root / "ablate"


def cell_key(scheme: str, strategy: str, switch: bool, seed: int) -> str:
    return f"{Scheme.parse(scheme).value}_{StrategyName.parse(strategy).value}_{'sw' if switch else 'nosw'}_s{seed}"
