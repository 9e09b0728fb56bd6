import hashlib
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from ..config import EVAL_BATCH_SIZE
from ..exceptions import ValidationError
from ..models import ContinualResult, EvalSummary, LabelMode, TrainConfig
from ..utils.metrics import JsonlWriter
from .dataset_service import LabeledImageSet, SyntheticDataset, select_records
from .network_service import ModelCheckpoint, penultimate_features
from .train_service import evaluate_model, train_student

logger = logging.getLogger(__name__)

_LE_FLOAT32 = np.dtype("<f4")
FEATURES_BLOB = "features.bin"
FEATURES_HEADER = "features.json"


def aggregate_accuracies(accuracies: Sequence[float]) -> tuple:
    """Sample mean and standard deviation (n - 1); std is 0 for a single run"""
    series = pd.Series(list(accuracies), dtype="float64")
    if series.empty:
        raise ValidationError("no accuracies to aggregate")
    std = float(series.std(ddof=1)) if len(series) > 1 else 0.0
    return float(series.mean()), std


def evaluate_synthetic(
    sds: SyntheticDataset,
    teacher: ModelCheckpoint,
    arch_ids: Sequence[str],
    val: LabeledImageSet,
    cfg: TrainConfig,
    n_seeds: int = 3,
    label_mode: Optional[LabelMode] = None,
    baseline: bool = False,
    metrics: Optional[JsonlWriter] = None,
) -> List[EvalSummary]:
    """
    Train fresh networks on a synthetic set and report validation accuracy

    Every (arch, seed) run trains from scratch on the synthetic records only, relabeled
    by the frozen teacher unless label_mode is hard. Runs differ only in rng_seed,
    which is cfg.rng_seed + k for the k-th run.

    Returns:
        One EvalSummary per architecture

    Raises:
        ValidationError: If class counts or image shapes of sds, val and teacher disagree
        ArchitectureError: If an architecture cannot take the teacher's input shape
    """
    if n_seeds < 1:
        raise ValidationError("n_seeds must be at least 1")
    if sds.class_count != val.class_count or teacher.class_count != val.class_count:
        raise ValidationError(
            f"class counts differ: synthetic {sds.class_count}, val {val.class_count}, teacher {teacher.class_count}"
        )
    if tuple(teacher.input_shape) != val.image_shape:
        raise ValidationError(f"teacher input {tuple(teacher.input_shape)} != val images {val.image_shape}")
    if label_mode is not None:
        cfg = cfg.model_copy(update={"label_mode": LabelMode(label_mode)})

    summaries = []
    for arch in arch_ids:
        seeds, accuracies = [], []
        for k in range(n_seeds):
            run_cfg = cfg.model_copy(update={"rng_seed": cfg.rng_seed + k})
            model = train_student(sds, teacher, None, run_cfg, arch_id=arch, metrics=metrics, stage=f"eval_{arch}_{k}")
            accuracy = evaluate_model(model, val)
            seeds.append(run_cfg.rng_seed)
            accuracies.append(accuracy)
            logger.info(f"{arch} seed {run_cfg.rng_seed}: accuracy {accuracy:.4f}")
            if metrics:
                metrics.write({"stage": "eval", "arch": arch, "seed": run_cfg.rng_seed, "split": "val",
                               "accuracy": accuracy, "baseline": baseline})
        mean, std = aggregate_accuracies(accuracies)
        summaries.append(EvalSummary(
            dataset=sds.dataset_id,
            ipc=sds.ipc,
            arch=arch,
            seeds=seeds,
            accuracies=accuracies,
            mean=mean,
            std=std,
            config_hash=cfg.config_hash(),
            baseline=baseline,
        ))
        logger.info(f"{arch}: {mean:.4f} +- {std:.4f} over {n_seeds} seeds")
    return summaries


def partition_classes(class_count: int, n_steps: int, rng_seed: int = 0) -> List[List[int]]:
    """Seeded random split of the classes into n_steps equal groups"""
    if n_steps < 1 or class_count % n_steps != 0:
        raise ValidationError(f"{class_count} classes cannot be split into {n_steps} equal steps")
    order = np.random.default_rng(rng_seed).permutation(class_count)
    return [sorted(int(c) for c in group) for group in np.split(order, n_steps)]


def continual_eval(
    sds: SyntheticDataset,
    teacher: ModelCheckpoint,
    val: LabeledImageSet,
    n_steps: int = 5,
    cfg: Optional[TrainConfig] = None,
    arch_id: Optional[str] = None,
    rng_seed: int = 0,
    metrics: Optional[JsonlWriter] = None,
) -> List[ContinualResult]:
    """
    Class-incremental protocol

    At step t the model (warm-started from step t-1) trains on the synthetic records
    of every class seen so far, with logits restricted to those classes, and is
    tested on the val images of the same classes.

    Raises:
        ValidationError: If the class count is not divisible by n_steps
    """
    cfg = cfg or TrainConfig()
    groups = partition_classes(sds.class_count, n_steps, rng_seed)
    step_cfg = cfg.model_copy(update={"halve_on_warm_start": False})
    seen: List[int] = []
    model: Optional[ModelCheckpoint] = None
    results = []
    for t, group in enumerate(groups, start=1):
        seen = sorted(seen + group)
        records = select_records(sds, seen)
        model = train_student(records, teacher, model, step_cfg, arch_id=arch_id, metrics=metrics,
                              allowed_classes=seen, stage=f"continual_{t}")
        val_seen = val.subset(np.flatnonzero(np.isin(val.labels, seen)), split="val")
        accuracy = evaluate_model(model, val_seen, allowed_classes=seen)
        results.append(ContinualResult(step=t, classes=list(seen), accuracy=accuracy))
        logger.info(f"Continual step {t}/{n_steps}: {len(seen)} classes, accuracy {accuracy:.4f}")
    return results


@torch.no_grad()
def compute_features(model: ModelCheckpoint, images: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = torch.as_tensor(images[start:start + batch_size], device=model.device, dtype=model.dtype)
        chunks.append(penultimate_features(model, batch).cpu().numpy())
    return np.concatenate(chunks).astype(np.float32) if chunks else np.zeros((0, 0), dtype=np.float32)


def export_features(
    model: ModelCheckpoint,
    source: Union[LabeledImageSet, SyntheticDataset],
    out_dir: Union[str, Path],
) -> np.ndarray:
    """
    Write penultimate features of every sample

    features.bin holds a little-endian float32 row-major N x D matrix; the
    features.json sidecar records shape, layer, labels and the blob checksum.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features = compute_features(model, source.images)
    blob = np.ascontiguousarray(features.astype(_LE_FLOAT32)).tobytes()
    (out_dir / FEATURES_BLOB).write_bytes(blob)
    sidecar = {
        "file": FEATURES_BLOB,
        "dtype": "float32",
        "byte_order": "little",
        "layout": "row-major",
        "shape": list(features.shape),
        "layer": "penultimate",
        "arch_id": model.arch_id,
        "labels": [int(y) for y in source.labels],
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    (out_dir / FEATURES_HEADER).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    logger.info(f"Exported {features.shape[0]}x{features.shape[1] if features.ndim == 2 else 0} features to {out_dir}")
    return features


def load_features(out_dir: Union[str, Path]) -> tuple:
    """Read back an export as (features, labels)"""
    out_dir = Path(out_dir)
    sidecar = json.loads((out_dir / FEATURES_HEADER).read_text(encoding="utf-8"))
    values = np.frombuffer((out_dir / sidecar["file"]).read_bytes(), dtype=_LE_FLOAT32)
    return values.reshape(sidecar["shape"]).astype(np.float32), np.asarray(sidecar["labels"], dtype=np.int64)


def save_results(results: Sequence[Union[EvalSummary, ContinualResult]], path: Union[str, Path]) -> Path:
    """Write evaluation or continual results as a JSON array"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.model_dump(mode="json") for r in results], indent=2), encoding="utf-8")
    return path
