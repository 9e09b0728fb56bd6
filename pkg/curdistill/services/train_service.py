import logging
import time
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm.auto import tqdm

from ..config import EVAL_BATCH_SIZE, SHOW_PROGRESS
from ..exceptions import ArchitectureError, DivergenceError, ValidationError
from ..models import LabelMode, OptimizerName, TrainConfig
from ..utils.augment import RandomResizedCropFlip
from ..utils.metrics import JsonlWriter
from ..utils.schedule import cosine_factor, derive_seed
from .dataset_service import LabeledImageSet, SyntheticDataset, SyntheticRecord, records_to_arrays
from .network_service import ModelCheckpoint, build_model, softmax_probs

logger = logging.getLogger(__name__)

_MASK_VALUE = -1e9


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == OptimizerName.SGD:
        return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if cfg.optimizer == OptimizerName.ADAM:
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)


def soft_cross_entropy(logits: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy against a soft target distribution"""
    return F.cross_entropy(logits, target_probs)


def class_mask(class_count: int, allowed_classes: Optional[Sequence[int]], device, dtype) -> Optional[torch.Tensor]:
    """Additive logit mask that removes classes outside allowed_classes"""
    if allowed_classes is None:
        return None
    mask = torch.full((class_count,), _MASK_VALUE, device=device, dtype=dtype)
    mask[torch.as_tensor(sorted(allowed_classes), device=device, dtype=torch.long)] = 0.0
    return mask


def _minibatches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        # BN needs two samples; a trailing singleton is dropped
        if len(idx) >= 2:
            yield idx


def _fit(
    model: ModelCheckpoint,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    epochs: int,
    stage: str,
    teacher: Optional[ModelCheckpoint] = None,
    val: Optional[LabeledImageSet] = None,
    metrics: Optional[JsonlWriter] = None,
    allowed_classes: Optional[Sequence[int]] = None,
) -> ModelCheckpoint:
    device, dtype = model.device, model.dtype
    if len(images) < 2:
        raise ValidationError(f"{stage}: need at least two training images, got {len(images)}")
    data = torch.as_tensor(images, dtype=dtype)
    targets = torch.as_tensor(labels, dtype=torch.long)
    batch_size = min(cfg.batch_size, len(images))
    steps_per_epoch = len(images) // batch_size + (1 if len(images) % batch_size >= 2 else 0)
    total_steps = steps_per_epoch * epochs

    generator = torch.Generator()
    generator.manual_seed(cfg.rng_seed)
    augment = (
        RandomResizedCropFlip(cfg.crop_scale, cfg.horizontal_flip, seed=derive_seed(cfg.rng_seed, 1))
        if cfg.augmentation else None
    )
    optimizer = make_optimizer(model.module.parameters(), cfg)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, cosine_factor(total_steps))
    mask = class_mask(model.class_count, allowed_classes, device, dtype)
    soft = cfg.label_mode == LabelMode.SOFT and teacher is not None
    teacher_net = teacher.frozen().to(device) if soft else None

    step = 0
    epoch_iter = tqdm(range(epochs), desc=stage, disable=not SHOW_PROGRESS, leave=False)
    for epoch in epoch_iter:
        started = time.perf_counter()
        model.module.train()
        loss_sum, correct, seen = 0.0, 0, 0
        for idx in _minibatches(len(images), batch_size, generator):
            x = data[idx].to(device)
            y = targets[idx].to(device)
            view = augment(x) if augment is not None else x
            logits = model.module(view)
            if mask is not None:
                logits = logits + mask
            if soft:
                with torch.no_grad():
                    teacher_logits = teacher_net.module(view)
                    if mask is not None:
                        teacher_logits = teacher_logits + mask
                    probs = softmax_probs(teacher_logits)
                loss = soft_cross_entropy(logits, probs)
            else:
                loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"{stage}: non-finite loss at epoch {epoch} step {step} (lr {scheduler.get_last_lr()[0]:.3g})",
                    step=step,
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((logits.argmax(dim=1) == y).sum().item())
            seen += len(idx)

        record = {
            "stage": stage,
            "epoch": epoch,
            "split": "train",
            "loss": loss_sum / max(seen, 1),
            "accuracy": correct / max(seen, 1),
            "lr": scheduler.get_last_lr()[0],
            "wall_ms": (time.perf_counter() - started) * 1000.0,
        }
        if metrics:
            metrics.write(record)
        if val is not None:
            val_acc = evaluate_model(model, val, allowed_classes=allowed_classes)
            if metrics:
                metrics.write({**record, "split": "val", "loss": None, "accuracy": val_acc})
            epoch_iter.set_postfix(loss=record["loss"], val=val_acc)
    model.module.eval()
    return model


def train_teacher(
    ds: LabeledImageSet,
    arch_id: str,
    cfg: TrainConfig,
    val: Optional[LabeledImageSet] = None,
    metrics: Optional[JsonlWriter] = None,
    device: Union[str, torch.device] = "cpu",
) -> ModelCheckpoint:
    """
    Train the teacher on the original training split with hard labels

    Raises:
        ValidationError: If ds is not a training split
        DivergenceError: If the loss becomes non-finite
    """
    if ds.split != "train":
        raise ValidationError(f"teacher training needs a train split, got '{ds.split}'")
    logger.info(f"Training teacher {arch_id} on {ds.name} ({len(ds)} images, {cfg.epochs} epochs)")
    model = build_model(arch_id, ds.class_count, ds.image_shape, cfg.rng_seed, ds.mean, ds.std, device)
    hard = cfg.model_copy(update={"label_mode": LabelMode.HARD})
    _fit(model, ds.images, ds.labels, hard, cfg.epochs, "teacher", val=val, metrics=metrics)
    model.train_meta.update({
        "stage": "teacher",
        "dataset": ds.name,
        "epochs": cfg.epochs,
        "config_hash": cfg.config_hash(),
        "rng_seed": cfg.rng_seed,
        "discardable": True,
    })
    return model


def train_student(
    cum_synth: Union[SyntheticDataset, Sequence[SyntheticRecord]],
    teacher: ModelCheckpoint,
    init: Optional[ModelCheckpoint],
    cfg: TrainConfig,
    arch_id: Optional[str] = None,
    metrics: Optional[JsonlWriter] = None,
    allowed_classes: Optional[Sequence[int]] = None,
    stage: str = "student",
    val: Optional[LabeledImageSet] = None,
) -> ModelCheckpoint:
    """
    Train a network on synthetic records, relabeled on the fly by the teacher

    Each augmented view is labeled by the teacher's softmax on that same view
    (label_mode=soft) or by the record label (label_mode=hard). With ``init`` the
    student starts from those parameters and, unless disabled, trains half the epochs.

    Raises:
        ValidationError: If there are no records or class counts disagree
        ArchitectureError: If init does not match the requested architecture
    """
    records = cum_synth.records if isinstance(cum_synth, SyntheticDataset) else list(cum_synth)
    if not records:
        raise ValidationError("student training needs at least one synthetic record")
    if isinstance(cum_synth, SyntheticDataset) and cum_synth.class_count != teacher.class_count:
        raise ValidationError(
            f"synthetic class_count {cum_synth.class_count} != teacher class_count {teacher.class_count}"
        )
    arch = arch_id or (init.arch_id if init is not None else teacher.arch_id)
    if init is not None:
        if init.arch_id != arch:
            raise ArchitectureError(f"warm start from {init.arch_id} cannot train {arch}")
        model = init.copy()
        epochs = max(1, cfg.epochs // 2) if cfg.halve_on_warm_start else cfg.epochs
    else:
        model = build_model(
            arch, teacher.class_count, teacher.input_shape, cfg.rng_seed, teacher.mean, teacher.std, teacher.device
        )
        epochs = cfg.epochs
    if model.device != teacher.device or model.dtype != teacher.dtype:
        model.module.to(device=teacher.device, dtype=teacher.dtype)

    images, labels = records_to_arrays(records)
    logger.info(f"Training {stage} {arch} on {len(records)} synthetic images for {epochs} epochs")
    _fit(model, images, labels, cfg, epochs, stage, teacher=teacher, val=val, metrics=metrics,
         allowed_classes=allowed_classes)
    model.train_meta.update({
        "stage": stage,
        "epochs": epochs,
        "warm_start": init is not None,
        "records": len(records),
        "config_hash": cfg.config_hash(),
        "rng_seed": cfg.rng_seed,
        "discardable": True,
    })
    return model


@torch.no_grad()
def evaluate_model(
    model: ModelCheckpoint,
    ds: LabeledImageSet,
    allowed_classes: Optional[Sequence[int]] = None,
    batch_size: int = EVAL_BATCH_SIZE,
) -> float:
    """Top-1 accuracy with eval-mode forwards and no augmentation"""
    if len(ds) == 0:
        return 0.0
    was_training = model.module.training
    model.module.eval()
    mask = class_mask(model.class_count, allowed_classes, model.device, model.dtype)
    correct = 0
    try:
        for start in range(0, len(ds), batch_size):
            x = torch.as_tensor(ds.images[start:start + batch_size], device=model.device, dtype=model.dtype)
            logits = model.module(x)
            if mask is not None:
                logits = logits + mask
            y = torch.as_tensor(ds.labels[start:start + batch_size], device=model.device)
            correct += int((logits.argmax(dim=1) == y).sum().item())
    finally:
        model.module.train(was_training)
    return correct / len(ds)
