import hashlib
import json
import logging
import shutil
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..exceptions import CurDistillError, StageError, ValidationError
from ..models import CurriculumPlan, DistillConfigs, ScheduleKind
from ..utils.metrics import JsonlWriter
from ..utils.schedule import derive_seed
from .dataset_service import (
    LabeledImageSet,
    SyntheticDataset,
    SyntheticRecord,
    load_synthetic,
    records_to_arrays,
    save_synthetic,
)
from .network_service import ModelCheckpoint, load_checkpoint, save_checkpoint, softmax_probs
from .recover_service import synthesize_subset
from .select_service import classify_pool, sample_seeds
from .train_service import train_student

logger = logging.getLogger(__name__)

# seed-derivation keys per stage
_SELECT, _RECOVER, _STUDENT = 1, 2, 3
_BASE_SIZE = 5


def curriculum_count(ipc: int) -> int:
    """J = max(0, floor(log2(ipc / 5))) + 1, in exact integer arithmetic"""
    if ipc < 1:
        raise ValidationError(f"ipc must be at least 1, got {ipc}")
    return max(0, (ipc // _BASE_SIZE).bit_length() - 1) + 1


def plan_curricula(
    ipc: int,
    schedule: Union[ScheduleKind, str] = ScheduleKind.LOGARITHMIC,
    step: int = _BASE_SIZE,
    cum_sizes: Optional[Sequence[int]] = None,
) -> CurriculumPlan:
    """
    Split an ipc budget into curricula

    logarithmic: cumulative sizes 5, 10, 20, ... with the last clamped to ipc
    uniform:     cumulative sizes step, 2*step, ... , ipc
    custom:      the given cum_sizes

    Raises:
        ValidationError: If ipc < 1 or the sizes violate the plan invariants
    """
    schedule = ScheduleKind(schedule)
    if ipc < 1:
        raise ValidationError(f"ipc must be at least 1, got {ipc}")
    if cum_sizes is not None:
        schedule = ScheduleKind.CUSTOM
        sizes = [int(s) for s in cum_sizes]
    elif schedule == ScheduleKind.LOGARITHMIC:
        J = curriculum_count(ipc)
        sizes = [min(ipc, _BASE_SIZE * 2 ** j) for j in range(J - 1)] + [ipc]
    elif schedule == ScheduleKind.UNIFORM:
        if step < 1:
            raise ValidationError("uniform step must be positive")
        sizes = list(range(step, ipc, step)) + [ipc]
    else:
        raise ValidationError("a custom schedule needs explicit cum_sizes")
    try:
        return CurriculumPlan(ipc=ipc, schedule=schedule, cum_sizes=sizes)
    except ValueError as e:
        raise ValidationError(f"invalid curriculum plan {sizes}: {e}")


class RunLayout:
    """Paths of a distillation run directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @property
    def plan(self) -> Path:
        return self.root / "plan.json"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.jsonl"

    @property
    def final(self) -> Path:
        return self.root / "final"

    def curriculum(self, j: int) -> Path:
        return self.root / f"curriculum_{j}"

    def seeds(self, j: int) -> Path:
        return self.curriculum(j) / "seeds.jsonl"

    def trace(self, j: int) -> Path:
        return self.curriculum(j) / "loss_trace.jsonl"

    def subset(self, j: int) -> Path:
        return self.curriculum(j) / "subset"

    def student(self, j: int) -> Path:
        return self.curriculum(j) / "student"

    def state(self, j: int) -> Path:
        return self.curriculum(j) / "state.json"


def _is_complete(layout: RunLayout, j: int) -> bool:
    if not layout.state(j).exists():
        return False
    return json.loads(layout.state(j).read_text(encoding="utf-8")).get("complete", False)


def run_fingerprint(cfgs: DistillConfigs) -> str:
    """Hash of every setting that shapes the curricula, run seed included"""
    payload = cfgs.model_dump(mode="json", exclude={"options": {"export_soft_labels"}})
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _prepare_run_dir(layout: RunLayout, plan: CurriculumPlan, cfgs: DistillConfigs, resume: bool) -> None:
    layout.root.mkdir(parents=True, exist_ok=True)
    plan_json = plan.to_json_dict()
    plan_json["fingerprint"] = run_fingerprint(cfgs)
    plan_json["configs"] = cfgs.model_dump(mode="json")
    if layout.plan.exists() and resume:
        stored = json.loads(layout.plan.read_text(encoding="utf-8"))
        if stored.get("cum_sizes") != plan_json["cum_sizes"]:
            raise ValidationError(f"cannot resume: run plan {stored.get('cum_sizes')} != {plan_json['cum_sizes']}")
        if stored.get("fingerprint") != plan_json["fingerprint"]:
            raise ValidationError(
                f"cannot resume {layout.root}: seed or synthesis/student settings differ from the stored run"
            )
    if not resume:
        for stale in list(layout.root.glob("curriculum_*")) + [layout.final]:
            if stale.is_dir():
                shutil.rmtree(stale)
    layout.plan.write_text(json.dumps(plan_json, indent=2), encoding="utf-8")


def _curriculum_step(
    j: int,
    ds: LabeledImageSet,
    teacher: ModelCheckpoint,
    student_prev: Optional[ModelCheckpoint],
    consumed: List[int],
    subset_size: int,
    cfgs: DistillConfigs,
    layout: Optional[RunLayout],
) -> List[SyntheticRecord]:
    seed = cfgs.options.rng_seed
    remaining = np.setdiff1d(np.arange(len(ds)), np.asarray(consumed, dtype=np.int64))
    pool = classify_pool(teacher, student_prev, ds, remaining)
    audit = JsonlWriter(layout.seeds(j) if layout else None)
    chosen = sample_seeds(
        pool,
        {c: subset_size for c in range(ds.class_count)},
        derive_seed(seed, j, _SELECT),
        curriculum=j,
        audit=audit,
    )
    indices = [i for c in sorted(chosen) for i in chosen[c]]
    synthesis_cfg = cfgs.synthesis.model_copy(update={"rng_seed": derive_seed(seed, j, _RECOVER)})
    trace = JsonlWriter(layout.trace(j) if layout else None)
    return synthesize_subset(
        teacher, student_prev, ds.subset(indices), synthesis_cfg,
        seed_indices=indices, curriculum=j, trace=trace,
    )


@torch.no_grad()
def teacher_soft_labels(teacher: ModelCheckpoint, records: Sequence[SyntheticRecord]) -> np.ndarray:
    images, _ = records_to_arrays(records)
    was_training = teacher.module.training
    teacher.module.eval()
    try:
        x = torch.as_tensor(images, device=teacher.device, dtype=teacher.dtype)
        return softmax_probs(teacher.module(x)).cpu().numpy().astype(np.float32)
    finally:
        teacher.module.train(was_training)


def run_distillation(
    ds: LabeledImageSet,
    teacher: ModelCheckpoint,
    ipc: int,
    cfgs: DistillConfigs,
    run_dir: Optional[Union[str, Path]] = None,
    resume: bool = True,
) -> Tuple[SyntheticDataset, List[ModelCheckpoint]]:
    """
    Run every curriculum: select seeds, synthesize the subset, train the next student

    With a run directory every curriculum is checkpointed (seed audit, loss trace,
    subset, student) and a resumed run continues after the last completed one,
    producing the same final dataset as an uninterrupted run.

    Returns:
        The final synthetic dataset and the student of every curriculum

    Raises:
        StageError: Wrapping any stage failure, annotated with the curriculum index
    """
    if teacher.class_count != ds.class_count or tuple(teacher.input_shape) != ds.image_shape:
        raise ValidationError("teacher does not match the dataset's classes or image shape")
    options = cfgs.options
    plan = plan_curricula(ipc, options.schedule, options.uniform_step, options.cum_sizes)
    layout = RunLayout(run_dir) if run_dir is not None else None
    if layout:
        _prepare_run_dir(layout, plan, cfgs, resume)
    metrics = JsonlWriter(layout.metrics if layout else None)
    logger.info(f"Distilling {ds.name} at ipc {ipc} over {plan.curricula} curricula {plan.cum_sizes}")

    records: List[SyntheticRecord] = []
    students: List[ModelCheckpoint] = []
    student_prev: Optional[ModelCheckpoint] = None
    for j, subset_size in enumerate(plan.subset_sizes, start=1):
        if layout and resume and _is_complete(layout, j):
            subset = load_synthetic(layout.subset(j))
            records.extend(subset.records)
            student_prev = load_checkpoint(layout.student(j), device=teacher.device)
            student_prev.module.to(dtype=teacher.dtype)
            students.append(student_prev)
            logger.info(f"Curriculum {j}: restored from {layout.curriculum(j)}")
            continue
        if layout:
            # an interrupted curriculum restarts from selection
            for stale in (layout.seeds(j), layout.trace(j)):
                stale.unlink(missing_ok=True)
        try:
            consumed = [r.seed_index for r in records if r.seed_index is not None]
            new_records = _curriculum_step(j, ds, teacher, student_prev, consumed, subset_size, cfgs, layout)
            subset = SyntheticDataset(new_records, subset_size, ds.class_count, ds.name)
            records.extend(new_records)
            student_cfg = cfgs.student.model_copy(update={"rng_seed": derive_seed(options.rng_seed, j, _STUDENT)})
            student = train_student(records, teacher, student_prev, student_cfg, metrics=metrics, stage=f"student_{j}")
            student.train_meta["curriculum"] = j
        except StageError:
            raise
        except CurDistillError as e:
            raise StageError(str(e), curriculum=j, cause=e) from e
        if layout:
            save_synthetic(subset, layout.subset(j))
            save_checkpoint(student, layout.student(j))
            layout.state(j).write_text(
                json.dumps({"curriculum": j, "complete": True, "seeds": [r.seed_index for r in new_records]}),
                encoding="utf-8",
            )
        students.append(student)
        student_prev = student

    soft = teacher_soft_labels(teacher, records) if options.export_soft_labels else None
    final = SyntheticDataset(records, ipc, ds.class_count, ds.name, curricula=plan, soft_labels=soft).validate()
    if layout:
        save_synthetic(final, layout.final)
    logger.info(f"Distillation finished: {len(final)} synthetic images")
    return final, students
