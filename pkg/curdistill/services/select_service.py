import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import InsufficientDataError, ValidationError
from ..utils.metrics import JsonlWriter
from .dataset_service import LabeledImageSet
from .network_service import ModelCheckpoint, predict

logger = logging.getLogger(__name__)


@dataclass
class SelectionPool:
    """
    Remaining original indices with teacher/student correctness flags

    ``teacher_correct`` marks R (teacher right); ``student_correct`` is None before
    the first student exists, otherwise its complement on ``remaining`` is W.
    """

    remaining: np.ndarray
    labels: np.ndarray
    teacher_correct: np.ndarray
    student_correct: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.remaining)
        if len(self.labels) != n or len(self.teacher_correct) != n:
            raise ValidationError("pool arrays must align with the remaining indices")
        if self.student_correct is not None and len(self.student_correct) != n:
            raise ValidationError("student flags must align with the remaining indices")

    @property
    def has_student(self) -> bool:
        return self.student_correct is not None

    def feedback_set(self) -> np.ndarray:
        """R ∩ W when a student exists, otherwise R"""
        keep = self.teacher_correct.copy()
        if self.has_student:
            keep &= ~self.student_correct
        return self.remaining[keep]

    def tiers(self, class_id: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(R ∩ W, R only, any other remaining) indices of one class"""
        in_class = self.labels == class_id
        teacher = self.teacher_correct
        if self.has_student:
            first = in_class & teacher & ~self.student_correct
            second = in_class & teacher & self.student_correct
        else:
            first = in_class & teacher
            second = np.zeros_like(in_class)
        third = in_class & ~teacher
        return self.remaining[first], self.remaining[second], self.remaining[third]

    def consume(self, indices: Iterable[int]) -> None:
        drop = np.isin(self.remaining, np.fromiter(indices, dtype=np.int64))
        self.remaining = self.remaining[~drop]
        self.labels = self.labels[~drop]
        self.teacher_correct = self.teacher_correct[~drop]
        if self.student_correct is not None:
            self.student_correct = self.student_correct[~drop]


def classify_pool(
    teacher: ModelCheckpoint,
    student: Optional[ModelCheckpoint],
    ds: LabeledImageSet,
    remaining: Optional[Sequence[int]] = None,
) -> SelectionPool:
    """
    Evaluate the remaining originals with the teacher and the previous student

    Predictions use eval-mode forwards, so membership does not depend on batch order.
    """
    remaining = np.arange(len(ds)) if remaining is None else np.unique(np.asarray(remaining, dtype=np.int64))
    if remaining.size and (remaining.min() < 0 or remaining.max() >= len(ds)):
        raise ValidationError("remaining indices fall outside the dataset")
    images = ds.images[remaining]
    labels = ds.labels[remaining]
    teacher_correct = predict(teacher, images) == labels if remaining.size else np.zeros(0, dtype=bool)
    student_correct = None
    if student is not None:
        student_correct = predict(student, images) == labels if remaining.size else np.zeros(0, dtype=bool)
    pool = SelectionPool(remaining, labels, teacher_correct, student_correct)
    logger.info(
        f"Pool of {len(remaining)}: teacher-correct {int(teacher_correct.sum())}, "
        f"feedback set {len(pool.feedback_set())}"
    )
    return pool


def sample_seeds(
    pool: SelectionPool,
    sizes: Union[Mapping[int, int], Sequence[int]],
    rng_seed: int = 0,
    curriculum: Optional[int] = None,
    audit: Optional[JsonlWriter] = None,
) -> Dict[int, List[int]]:
    """
    Draw per-class seed indices without replacement, tier by tier

    Tier 1 is R ∩ W (R alone before any student), tier 2 is R only, tier 3 is any
    remaining index of the class. Drawn indices leave ``pool.remaining``.

    Raises:
        ValidationError: If a size is negative
        InsufficientDataError: If a class has fewer candidates than requested
    """
    if not isinstance(sizes, Mapping):
        sizes = dict(enumerate(sizes))
    if any(n < 0 for n in sizes.values()):
        raise ValidationError("per-class seed counts must be non-negative")

    rng = np.random.default_rng(rng_seed)
    chosen: Dict[int, List[int]] = {}
    log: List[dict] = []
    for class_id in sorted(sizes):
        need = int(sizes[class_id])
        tiers = pool.tiers(class_id)
        available = sum(len(t) for t in tiers)
        if available < need:
            raise InsufficientDataError(
                f"class {class_id}: {available} candidate seeds for {need} requested", class_id=class_id
            )
        picked: List[int] = []
        for tier_no, tier in enumerate(tiers, start=1):
            take = min(need - len(picked), len(tier))
            if take <= 0:
                continue
            draw = rng.choice(tier, size=take, replace=False).tolist()
            picked.extend(int(i) for i in draw)
            log.extend({"curriculum": curriculum, "class": class_id, "tier": tier_no, "index": int(i)} for i in draw)
        chosen[class_id] = picked

    pool.consume(i for picked in chosen.values() for i in picked)
    if audit:
        for entry in log:
            audit.write(entry)
    tier_counts = np.bincount([e["tier"] for e in log], minlength=4)[1:] if log else [0, 0, 0]
    logger.info(f"Sampled {len(log)} seeds (tier counts {list(map(int, tier_counts))})")
    return chosen
