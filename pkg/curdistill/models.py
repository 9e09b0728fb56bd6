import hashlib
import json
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class OptimizerName(str, Enum):
    ADAM = "adam"
    ADAMW = "adamw"
    SGD = "sgd"


class LabelMode(str, Enum):
    HARD = "hard"
    SOFT = "soft"


class RegSpace(str, Enum):
    PIXEL = "pixel"
    FEATURE = "feature"


class GateMode(str, Enum):
    DYNAMIC = "dynamic"
    STATIC = "static"
    OFF = "off"


class AdvNorm(str, Enum):
    GATED = "gated"
    BATCH = "batch"


class BatchMode(str, Enum):
    MIXED = "mixed"
    PER_CLASS = "per_class"


class InitMode(str, Enum):
    REAL = "real"
    NOISE = "noise"


class ScheduleKind(str, Enum):
    LOGARITHMIC = "logarithmic"
    UNIFORM = "uniform"
    CUSTOM = "custom"


def _preset_value(row: dict, key: str, default):
    return row[key] if key in row else default


class TrainConfig(BaseModel):
    """Supervised training recipe shared by teacher, student and evaluation runs"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    optimizer: OptimizerName = OptimizerName.ADAMW
    betas: Tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    learning_rate: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-2, ge=0)
    schedule: str = "cosine"
    epochs: int = Field(1000, ge=1)
    batch_size: int = Field(16, ge=2)
    augmentation: bool = True
    crop_scale: Tuple[float, float] = (0.08, 1.0)
    horizontal_flip: bool = True
    label_mode: LabelMode = LabelMode.SOFT
    halve_on_warm_start: bool = True
    rng_seed: int = 0

    @field_validator("schedule")
    @classmethod
    def _only_cosine(cls, value: str) -> str:
        if value != "cosine":
            raise ValueError("only the cosine schedule is supported")
        return value

    @field_validator("crop_scale")
    @classmethod
    def _valid_scale(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0 < low <= high <= 1:
            raise ValueError("crop_scale must satisfy 0 < min <= max <= 1")
        return value

    @classmethod
    def from_preset(cls, row: dict, **overrides) -> "TrainConfig":
        """Build a config from an evaluation-table style row"""
        optimizer = _preset_value(row, "optimizer", "adamw")
        momentum = _preset_value(row, "momentum", [0.9, 0.999])
        values = {
            "optimizer": optimizer,
            "learning_rate": _preset_value(row, "learning_rate", 1e-3),
            "weight_decay": _preset_value(row, "weight_decay", 1e-2),
            "schedule": _preset_value(row, "lr_schedule", "cosine"),
            "augmentation": _preset_value(row, "augmentation", "random_resized_crop") != "none",
            "batch_size": _preset_value(row, "batch_size", 16),
            "epochs": _preset_value(row, "epoch", 1000),
        }
        if isinstance(momentum, (list, tuple)):
            values["betas"] = tuple(momentum)
        else:
            values["momentum"] = momentum
        for key in ("horizontal_flip", "label_mode", "crop_scale", "halve_on_warm_start"):
            if key in row:
                values[key] = row[key]
        values.update(overrides)
        return cls(**values)

    def config_hash(self) -> str:
        """Hash of every field except the seed"""
        payload = self.model_dump(mode="json", exclude={"rng_seed"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


class SynthesisConfig(BaseModel):
    """Settings of the recovery loop that optimizes one synthetic subset"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha_reg: float = Field(1.0, ge=0)
    alpha_adv: float = Field(1.0, ge=0)
    lambda_bn: float = Field(1.0, ge=0)
    reg_space: RegSpace = RegSpace.PIXEL
    optimizer: OptimizerName = OptimizerName.ADAM
    betas: Tuple[float, float] = (0.5, 0.9)
    learning_rate: float = Field(0.25, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    schedule: str = "cosine"
    # zero iterations returns the seeds untouched
    iterations: int = Field(1000, ge=0)
    batch_size: int = Field(10, ge=2)
    augmentation: bool = True
    crop_scale: Tuple[float, float] = (0.08, 1.0)
    gate_mode: GateMode = GateMode.DYNAMIC
    adv_norm: AdvNorm = AdvNorm.GATED
    batch_mode: BatchMode = BatchMode.MIXED
    init: InitMode = InitMode.REAL
    rng_seed: int = 0

    @field_validator("optimizer")
    @classmethod
    def _only_adam(cls, value: OptimizerName) -> OptimizerName:
        if value != OptimizerName.ADAM:
            raise ValueError("synthesis optimizes pixels with adam")
        return value

    @field_validator("schedule")
    @classmethod
    def _only_cosine(cls, value: str) -> str:
        if value != "cosine":
            raise ValueError("only the cosine schedule is supported")
        return value

    @classmethod
    def from_preset(cls, row: dict, **overrides) -> "SynthesisConfig":
        """Build a config from a synthesis-table style row"""
        values = {
            "optimizer": _preset_value(row, "optimizer", "adam"),
            "betas": tuple(_preset_value(row, "momentum", [0.5, 0.9])),
            "weight_decay": _preset_value(row, "weight_decay", 1e-4),
            "schedule": _preset_value(row, "lr_schedule", "cosine"),
            "augmentation": _preset_value(row, "augmentation", "random_resized_crop") != "none",
            "alpha_adv": _preset_value(row, "alpha_adv", 1.0),
            "alpha_reg": _preset_value(row, "alpha_reg", 1.0),
            "learning_rate": _preset_value(row, "learning_rate", 0.25),
            "batch_size": _preset_value(row, "batch_size", 10),
            "iterations": _preset_value(row, "iteration", 1000),
        }
        for key in ("lambda_bn", "reg_space", "gate_mode", "adv_norm", "batch_mode", "init", "crop_scale"):
            if key in row:
                values[key] = row[key]
        values.update(overrides)
        return cls(**values)


class CurriculumPlan(BaseModel):
    """Per-class cumulative sizes of the curricula"""

    model_config = ConfigDict(frozen=True)

    ipc: int = Field(ge=1)
    schedule: ScheduleKind = ScheduleKind.LOGARITHMIC
    cum_sizes: List[int]

    @model_validator(mode="after")
    def _check_sizes(self) -> "CurriculumPlan":
        if not self.cum_sizes:
            raise ValueError("cum_sizes must not be empty")
        if self.cum_sizes[-1] != self.ipc:
            raise ValueError(f"last cumulative size {self.cum_sizes[-1]} != ipc {self.ipc}")
        if any(b <= a for a, b in zip(self.cum_sizes, self.cum_sizes[1:])) or self.cum_sizes[0] < 1:
            raise ValueError("cum_sizes must be positive and strictly increasing")
        return self

    @property
    def curricula(self) -> int:
        return len(self.cum_sizes)

    @property
    def subset_sizes(self) -> List[int]:
        return [b - a for a, b in zip([0] + self.cum_sizes[:-1], self.cum_sizes)]

    def to_json_dict(self) -> dict:
        return {
            "ipc": self.ipc,
            "schedule": self.schedule.value,
            "J": self.curricula,
            "cum_sizes": list(self.cum_sizes),
            "subset_sizes": self.subset_sizes,
        }


class DistillOptions(BaseModel):
    """Run-level switches of the curriculum loop"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    schedule: ScheduleKind = ScheduleKind.LOGARITHMIC
    uniform_step: int = Field(5, ge=1)
    cum_sizes: Optional[List[int]] = None
    rng_seed: int = 0
    export_soft_labels: bool = False


class DistillConfigs(BaseModel):
    """Everything run_distillation needs besides data and teacher"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    student: TrainConfig = Field(default_factory=TrainConfig)
    options: DistillOptions = Field(default_factory=DistillOptions)


class EvalSummary(BaseModel):
    """Per-architecture evaluation result written to the results file"""

    dataset: str
    ipc: int
    arch: str
    seeds: List[int]
    accuracies: List[float]
    mean: float
    std: float
    config_hash: str
    baseline: bool = False


class ContinualResult(BaseModel):
    """One step of the class-incremental protocol"""

    step: int
    classes: List[int]
    accuracy: float


class RunSettings(BaseModel):
    """Flat, file-backed configuration of a command-line run"""

    model_config = ConfigDict(extra="forbid")

    dataset: str = "cifar10"
    data_root: Optional[str] = None
    run_dir: Optional[str] = None
    ipc: int = Field(10, ge=1)
    arch: str = "resnet18-cifar"
    archs: List[str] = Field(default_factory=lambda: ["resnet18-cifar"])
    seed: int = 0
    seeds: int = Field(3, ge=1)
    device: str = "cpu"
    resume: bool = False
    teacher: Optional[str] = None
    synthetic: Optional[str] = None
    baseline: bool = False
    label_mode: LabelMode = LabelMode.SOFT
    n_steps: int = Field(5, ge=1)
    schedule: ScheduleKind = ScheduleKind.LOGARITHMIC
    cum_sizes: Optional[List[int]] = None
    export_soft_labels: bool = False
    source: str = "synthetic"
    model: Optional[str] = None
    synthesis: Dict[str, object] = Field(default_factory=dict)
    training: Dict[str, object] = Field(default_factory=dict)
    teacher_training: Dict[str, object] = Field(default_factory=dict)
