import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pydantic

from .config import DATASETS, EVALUATION_PRESETS, RUNS_DIR, SYNTHESIS_PRESETS, TEACHER_PRESETS
from .exceptions import ConfigError, DatasetLoadError
from .models import (
    ContinualResult,
    DistillConfigs,
    DistillOptions,
    EvalSummary,
    RunSettings,
    SynthesisConfig,
    TrainConfig,
)
from .services.curriculum_service import plan_curricula, run_distillation
from .services.dataset_service import (
    LabeledImageSet,
    SyntheticDataset,
    load_dataset,
    load_synthetic,
    random_real_subset,
)
from .services.evaluate_service import continual_eval, evaluate_synthetic, export_features, save_results
from .services.network_service import ModelCheckpoint, load_checkpoint, save_checkpoint
from .services.train_service import evaluate_model, train_teacher
from .utils.metrics import JsonlWriter

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.json"
PRESET_ROW_KEYS = {
    "optimizer", "momentum", "weight_decay", "lr_schedule", "augmentation",
    "alpha_adv", "alpha_reg", "learning_rate", "batch_size", "iteration", "epoch",
}


def _config_error(error: pydantic.ValidationError, section: str = "") -> ConfigError:
    fields = {
        ".".join(str(p) for p in ((section,) if section else ()) + tuple(e["loc"])): e["msg"]
        for e in error.errors()
    }
    detail = "; ".join(f"{name}: {msg}" for name, msg in fields.items())
    return ConfigError(f"Invalid configuration: {detail}", fields=fields)


def load_run_settings(path: Optional[Union[str, Path]] = None, **overrides) -> RunSettings:
    """
    Merge a flat JSON config file with explicit overrides

    Overrides whose value is None are ignored.

    Raises:
        ConfigError: If the file is unreadable or a field is invalid
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", fields={"config": str(path)})
        try:
            values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(values, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        settings = RunSettings(**values)
    except pydantic.ValidationError as e:
        raise _config_error(e)
    if settings.dataset not in DATASETS:
        raise ConfigError(f"Unknown dataset '{settings.dataset}'", fields={"dataset": settings.dataset})
    return settings


class DistillClient:
    """
    Stage driver for curriculum distillation runs

    Each stage reads its inputs from and writes its artifacts to one run directory:
    teacher/, plan.json, curriculum_<j>/, final/, results.json, continual.json,
    features/, metrics.jsonl and resolved_config.json.
    """

    def __init__(self, settings: Optional[RunSettings] = None, **overrides):
        """
        Args:
            settings: Resolved run settings (defaults when omitted)
            overrides: Field overrides applied on top of settings
        """
        base = settings.model_dump() if settings is not None else {}
        base.update({k: v for k, v in overrides.items() if v is not None})
        try:
            self.settings = RunSettings(**base)
        except pydantic.ValidationError as e:
            raise _config_error(e)
        self.synthesis_config = self._section(SynthesisConfig, SYNTHESIS_PRESETS, self.settings.synthesis, "synthesis")
        self.training_config = self._section(TrainConfig, EVALUATION_PRESETS, self.settings.training, "training")
        self.teacher_config = self._section(
            TrainConfig, TEACHER_PRESETS, self.settings.teacher_training, "teacher_training",
            label_mode="hard",
        )

    def _section(self, model, presets: dict, values: dict, name: str, **fixed):
        # table-style keys (lr_schedule, iteration, ...) patch the preset row, the rest are field overrides
        row = dict(presets.get(self.settings.dataset, {}))
        row.update({k: v for k, v in values.items() if k in PRESET_ROW_KEYS})
        fields = {k: v for k, v in values.items() if k not in PRESET_ROW_KEYS}
        try:
            return model.from_preset(row, **{**fixed, "rng_seed": self.settings.seed, **fields})
        except pydantic.ValidationError as e:
            raise _config_error(e, name)

    @property
    def run_dir(self) -> Path:
        if self.settings.run_dir:
            return Path(self.settings.run_dir)
        s = self.settings
        return RUNS_DIR / f"{s.dataset}_ipc{s.ipc}_seed{s.seed}"

    @property
    def metrics(self) -> JsonlWriter:
        return JsonlWriter(self.run_dir / "metrics.jsonl")

    def resolved_config(self) -> Dict[str, Any]:
        """Settings with every preset default merged in"""
        resolved = self.settings.model_dump(mode="json")
        resolved["synthesis"] = self.synthesis_config.model_dump(mode="json")
        resolved["training"] = self.training_config.model_dump(mode="json")
        resolved["teacher_training"] = self.teacher_config.model_dump(mode="json")
        resolved["run_dir"] = str(self.run_dir)
        return resolved

    def write_resolved_config(self) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / RESOLVED_CONFIG
        path.write_text(json.dumps(self.resolved_config(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    def _load(self, split: str) -> LabeledImageSet:
        return load_dataset(self.settings.dataset, split, self.settings.data_root)

    def _teacher_path(self) -> Path:
        return Path(self.settings.teacher) if self.settings.teacher else self.run_dir / "teacher"

    def load_teacher(self) -> ModelCheckpoint:
        """
        Raises:
            DatasetLoadError: If no checkpoint exists at the teacher path
        """
        return load_checkpoint(self._teacher_path(), device=self.settings.device)

    def _synthetic_path(self) -> Path:
        return Path(self.settings.synthetic) if self.settings.synthetic else self.run_dir / "final"

    def load_synthetic(self) -> SyntheticDataset:
        path = self._synthetic_path()
        if not path.exists():
            raise DatasetLoadError(f"Synthetic dataset not found: {path}", path=str(path))
        return load_synthetic(path)

    def plan(self) -> Dict[str, Any]:
        s = self.settings
        return plan_curricula(s.ipc, s.schedule, cum_sizes=s.cum_sizes).to_json_dict()

    def squeeze(self) -> Path:
        """Train the teacher on the training split and save it under teacher/"""
        self.write_resolved_config()
        train, val = self._load("train"), self._load("val")
        teacher = train_teacher(train, self.settings.arch, self.teacher_config, metrics=self.metrics,
                                device=self.settings.device)
        accuracy = evaluate_model(teacher, val)
        teacher.train_meta["val_accuracy"] = accuracy
        logger.info(f"Teacher {self.settings.arch} val accuracy {accuracy:.4f}")
        return save_checkpoint(teacher, self.run_dir / "teacher").parent

    def distill(self) -> SyntheticDataset:
        """Run every curriculum and save the final synthetic dataset under final/"""
        teacher = self.load_teacher()
        self.write_resolved_config()
        s = self.settings
        cfgs = DistillConfigs(
            synthesis=self.synthesis_config,
            student=self.training_config,
            options=DistillOptions(
                schedule=s.schedule,
                cum_sizes=s.cum_sizes,
                rng_seed=s.seed,
                export_soft_labels=s.export_soft_labels,
            ),
        )
        final, _ = run_distillation(self._load("train"), teacher, s.ipc, cfgs, run_dir=self.run_dir, resume=s.resume)
        return final

    def evaluate(self) -> List[EvalSummary]:
        """Evaluate the synthetic set (and optionally the random-real baseline) on every arch"""
        s = self.settings
        teacher = self.load_teacher()
        sds = self.load_synthetic()
        self.write_resolved_config()
        val = self._load("val")
        cfg = self.training_config.model_copy(update={"label_mode": s.label_mode})
        summaries = evaluate_synthetic(sds, teacher, s.archs, val, cfg, n_seeds=s.seeds, metrics=self.metrics)
        if s.baseline:
            real = random_real_subset(self._load("train"), sds.ipc, rng_seed=s.seed)
            summaries += evaluate_synthetic(real, teacher, s.archs, val, cfg, n_seeds=s.seeds,
                                            baseline=True, metrics=self.metrics)
        save_results(summaries, self.run_dir / "results.json")
        return summaries

    def continual(self) -> List[ContinualResult]:
        s = self.settings
        teacher = self.load_teacher()
        sds = self.load_synthetic()
        self.write_resolved_config()
        cfg = self.training_config.model_copy(update={"label_mode": s.label_mode})
        results = continual_eval(sds, teacher, self._load("val"), s.n_steps, cfg, arch_id=s.arch,
                                 rng_seed=s.seed, metrics=self.metrics)
        save_results(results, self.run_dir / "continual.json")
        return results

    def export_features(self) -> Path:
        """Export penultimate features of the synthetic set (source=synthetic) or a real split"""
        s = self.settings
        model = load_checkpoint(s.model, device=s.device) if s.model else self.load_teacher()
        if s.source == "synthetic":
            source = self.load_synthetic()
        elif s.source in ("train", "val"):
            source = self._load(s.source)
        else:
            raise ConfigError(f"source must be synthetic, train or val, got '{s.source}'", fields={"source": s.source})
        out_dir = self.run_dir / "features"
        export_features(model, source, out_dir)
        return out_dir
