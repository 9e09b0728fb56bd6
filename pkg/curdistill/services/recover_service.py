"""
Synthesis of one curriculum subset

The objective per step is

    L_ce+bn(teacher) + alpha_reg * L_reg(seeds) + alpha_adv * L_adv(student, teacher-gated)

optimized with Adam directly on the pixels, which stay clamped to [0, 1].
"""

import logging
from typing import Iterator, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from tqdm.auto import tqdm

from ..config import ADV_PROB_CEILING, SHOW_PROGRESS
from ..exceptions import DivergenceError, ValidationError
from ..models import AdvNorm, BatchMode, GateMode, InitMode, RegSpace, SynthesisConfig
from ..utils.augment import RandomResizedCropFlip
from ..utils.metrics import JsonlWriter
from ..utils.schedule import cosine_factor, derive_seed
from .dataset_service import LabeledImageSet, SyntheticRecord
from .network_service import (
    ModelCheckpoint,
    bn_distance,
    forward,
    forward_with_bn_capture,
    penultimate_features,
    softmax_probs,
)

logger = logging.getLogger(__name__)


class CeBnLoss(NamedTuple):
    value: torch.Tensor
    ce: torch.Tensor
    bn: torch.Tensor


class AdvLoss(NamedTuple):
    value: torch.Tensor
    gate: torch.Tensor


def ce_bn_loss(
    teacher: ModelCheckpoint,
    images: torch.Tensor,
    labels: torch.Tensor,
    lambda_bn: float = 1.0,
) -> CeBnLoss:
    """
    Cross-entropy of the teacher's predictions plus BN-statistic matching

    value = CE(teacher(images), labels)
            + lambda_bn * sum_l (||mu_l - mu_l^run||_2 + ||sigma_l - sigma_l^run||_2)
    """
    logits, stats = forward_with_bn_capture(teacher, images)
    ce = F.cross_entropy(logits, labels)
    bn = bn_distance(stats, teacher.bn_running).to(ce.dtype)
    value = ce + lambda_bn * bn
    if torch.isnan(value):
        raise DivergenceError("ce+bn loss is NaN")
    return CeBnLoss(value, ce, bn)


def reg_loss(
    images: torch.Tensor,
    seed_images: torch.Tensor,
    space: RegSpace = RegSpace.PIXEL,
    teacher: Optional[ModelCheckpoint] = None,
    has_seed: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Mean squared distance to the seed images, in pixel or teacher-feature space

    Records without a seed (``has_seed`` False) are excluded and contribute 0.
    """
    if images.shape != seed_images.shape:
        raise ValidationError(f"images {tuple(images.shape)} and seeds {tuple(seed_images.shape)} differ")
    if has_seed is not None:
        images, seed_images = images[has_seed], seed_images[has_seed]
    if images.shape[0] == 0:
        return images.sum() * 0.0
    if RegSpace(space) == RegSpace.PIXEL:
        return F.mse_loss(images, seed_images)
    if teacher is None:
        raise ValidationError("feature-space regularization needs the teacher")
    with torch.no_grad():
        target = penultimate_features(teacher, seed_images)
    return F.mse_loss(penultimate_features(teacher, images), target)


@torch.no_grad()
def teacher_gate(teacher: ModelCheckpoint, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """True where the teacher's argmax equals the label"""
    return forward(teacher, images, mode="eval").argmax(dim=1) == labels


def adv_loss(
    student: ModelCheckpoint,
    teacher: ModelCheckpoint,
    images: torch.Tensor,
    labels: torch.Tensor,
    norm: AdvNorm = AdvNorm.GATED,
    gate: Optional[torch.Tensor] = None,
) -> AdvLoss:
    """
    Teacher-gated non-saturating loss  -(1/|G|) sum_{i in G} log(1 - p_student(y_i | x_i))

    The gate is recomputed on ``images`` unless given. An empty gate yields 0 with
    an exactly-zero gradient. The student's true-class probability is clamped to
    1 - 1e-6 before the log.
    """
    if gate is None:
        gate = teacher_gate(teacher, images, labels)
    probs = softmax_probs(forward(student, images, mode="eval"))
    p_true = probs.gather(1, labels.view(-1, 1)).squeeze(1).clamp(max=ADV_PROB_CEILING)
    per_sample = -torch.log1p(-p_true)
    if not bool(gate.any()):
        return AdvLoss(per_sample.sum() * 0.0, gate)
    denom = gate.sum() if AdvNorm(norm) == AdvNorm.GATED else images.shape[0]
    return AdvLoss(per_sample[gate].sum() / denom, gate)


def _batch_stream(
    labels: torch.Tensor,
    batch_size: int,
    mode: BatchMode,
    generator: torch.Generator,
) -> Iterator[torch.Tensor]:
    """Endless minibatch indices: shuffled passes over the subset (or one class at a time)"""
    if mode == BatchMode.PER_CLASS:
        groups = [torch.nonzero(labels == c).flatten() for c in torch.unique(labels).tolist()]
        if any(len(g) < 2 for g in groups):
            raise ValidationError("per-class batches need at least two records per class")
    else:
        groups = [torch.arange(len(labels))]
    while True:
        for group in groups:
            size = min(batch_size, len(group))
            order = group[torch.randperm(len(group), generator=generator)]
            for start in range(0, len(order) - size + 1, size):
                yield order[start:start + size]


def synthesize_subset(
    teacher: ModelCheckpoint,
    student_prev: Optional[ModelCheckpoint],
    seeds: LabeledImageSet,
    cfg: SynthesisConfig,
    seed_indices: Optional[Sequence[int]] = None,
    curriculum: int = 1,
    trace: Optional[JsonlWriter] = None,
) -> List[SyntheticRecord]:
    """
    Optimize one curriculum subset starting from its seed images

    The adversarial term is omitted when ``student_prev`` is None (first curriculum).
    Augmented views feed the networks while gradients reach the full-resolution pixels.

    Raises:
        ValidationError: If there are fewer than two seeds
        DivergenceError: If the loss becomes non-finite; ``last_state`` holds the last finite images
    """
    n = len(seeds)
    if n == 0:
        raise ValidationError("synthesis needs at least one seed")
    if seed_indices is not None and len(seed_indices) != n:
        raise ValidationError("seed_indices must align with the seed images")
    seed_indices = list(seed_indices) if seed_indices is not None else [None] * n

    teacher_f = teacher.frozen()
    student_f = student_prev.frozen() if student_prev is not None else None
    device, dtype = teacher_f.device, teacher_f.dtype
    seed_images = torch.as_tensor(seeds.images, device=device, dtype=dtype)
    labels = torch.as_tensor(seeds.labels, device=device, dtype=torch.long)

    generator = torch.Generator()
    generator.manual_seed(cfg.rng_seed)
    if cfg.init == InitMode.NOISE:
        start = torch.rand(seed_images.shape, generator=generator, dtype=dtype).to(device)
    else:
        start = seed_images.clone()
    images = start.requires_grad_(True)

    def to_records(pixels: torch.Tensor) -> List[SyntheticRecord]:
        array = pixels.detach().cpu().numpy().astype(np.float32)
        return [
            SyntheticRecord(array[i], int(seeds.labels[i]), seed_indices[i], curriculum)
            for i in range(n)
        ]

    if cfg.iterations == 0:
        return to_records(images)
    if n < 2:
        raise ValidationError("synthesis needs at least two seeds for batch statistics")

    use_reg = cfg.alpha_reg > 0 and cfg.init == InitMode.REAL
    use_adv = student_f is not None and cfg.alpha_adv > 0
    optimizer = torch.optim.Adam([images], lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, cosine_factor(cfg.iterations))
    augment = (
        RandomResizedCropFlip(cfg.crop_scale, flip=False, seed=derive_seed(cfg.rng_seed, 2))
        if cfg.augmentation else None
    )
    batches = _batch_stream(labels.cpu(), min(cfg.batch_size, n), cfg.batch_mode, generator)

    static_gate = None
    if use_adv and cfg.gate_mode == GateMode.STATIC:
        static_gate = teacher_gate(teacher_f, images.detach(), labels)

    last_good = images.detach().clone()
    zero = torch.zeros((), device=device, dtype=dtype)
    progress = tqdm(range(cfg.iterations), desc=f"recover[{curriculum}]", disable=not SHOW_PROGRESS, leave=False)
    for step in progress:
        idx = next(batches).to(device)
        batch, batch_labels = images[idx], labels[idx]
        view = augment(batch) if augment is not None else batch

        try:
            ce_bn = ce_bn_loss(teacher_f, view, batch_labels, cfg.lambda_bn)
            reg = reg_loss(batch, seed_images[idx], cfg.reg_space, teacher_f) if use_reg else zero
            adv, gate_fraction = zero, 0.0
            if use_adv:
                if cfg.gate_mode == GateMode.STATIC:
                    gate = static_gate[idx]
                elif cfg.gate_mode == GateMode.OFF:
                    gate = torch.ones_like(batch_labels, dtype=torch.bool)
                else:
                    gate = None
                adv_terms = adv_loss(student_f, teacher_f, view, batch_labels, cfg.adv_norm, gate)
                adv, gate_fraction = adv_terms.value, float(adv_terms.gate.float().mean())
            total = ce_bn.value + cfg.alpha_reg * reg + cfg.alpha_adv * adv
            if not torch.isfinite(total):
                raise DivergenceError("total loss is not finite")
        except (DivergenceError, ValidationError) as e:
            raise DivergenceError(
                f"curriculum {curriculum}: non-finite synthesis loss at iteration {step} ({e})",
                last_state=to_records(last_good),
                step=step,
            ) from e
        lr = scheduler.get_last_lr()[0]
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        scheduler.step()
        with torch.no_grad():
            images.clamp_(0.0, 1.0)
            if torch.isfinite(images).all():
                last_good.copy_(images)

        if trace:
            trace.write({
                "iter": step,
                "loss_total": total.item(),
                "loss_ce": ce_bn.ce.item(),
                "loss_bn": ce_bn.bn.item(),
                "loss_reg": reg.item(),
                "loss_adv": adv.item(),
                "gate_fraction": gate_fraction,
                "lr": lr,
            })
        if step % 50 == 0:
            progress.set_postfix(loss=total.item())

    logger.info(f"Curriculum {curriculum}: synthesized {n} images in {cfg.iterations} iterations")
    return to_records(images)
