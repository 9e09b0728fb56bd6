"""
Tests for curriculum planning and the end-to-end distillation loop
"""

import json
import shutil

import numpy as np
import pytest

from curdistill.exceptions import InsufficientDataError, StageError, ValidationError
from curdistill.models import DistillOptions, ScheduleKind
from curdistill.services.curriculum_service import curriculum_count, plan_curricula, run_distillation
from curdistill.services.dataset_service import load_synthetic, subsample_per_class
from curdistill.services.network_service import build_model
from curdistill.utils.metrics import read_jsonl


class TestPlan:
    @pytest.mark.parametrize(
        "ipc, expected",
        [(1, 1), (5, 1), (6, 1), (9, 1), (10, 2), (20, 3), (40, 4), (50, 4), (100, 5), (200, 6)],
    )
    def test_curriculum_count(self, ipc, expected):
        assert curriculum_count(ipc) == expected
        assert plan_curricula(ipc).curricula == expected

    @pytest.mark.parametrize(
        "ipc, sizes",
        [(1, [1]), (10, [5, 10]), (20, [5, 10, 20]), (50, [5, 10, 20, 50]), (100, [5, 10, 20, 40, 100])],
    )
    def test_cumulative_sizes(self, ipc, sizes):
        plan = plan_curricula(ipc)
        assert plan.cum_sizes == sizes
        assert sum(plan.subset_sizes) == ipc

    def test_uniform(self):
        plan = plan_curricula(12, ScheduleKind.UNIFORM, step=5)
        assert plan.cum_sizes == [5, 10, 12]

    def test_custom(self):
        plan = plan_curricula(10, cum_sizes=[2, 7, 10])
        assert plan.schedule == ScheduleKind.CUSTOM
        assert plan.subset_sizes == [2, 5, 3]

    @pytest.mark.parametrize("sizes", [[5, 5, 10], [3, 8], [0, 10]])
    def test_custom_invalid(self, sizes):
        with pytest.raises(ValidationError):
            plan_curricula(10, cum_sizes=sizes)

    def test_ipc_zero(self):
        with pytest.raises(ValidationError):
            plan_curricula(0)

    def test_json(self):
        assert plan_curricula(10).to_json_dict()["J"] == 2


class TestRunDistillation:
    """End-to-end runs on toy2 with a few iterations per stage"""

    def test_two_curricula(self, teacher, toy_train, fast_distill_cfgs, tmp_path):
        final, students = run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path)
        assert len(final) == 20
        assert np.bincount(final.labels).tolist() == [10, 10]
        for j in (1, 2):
            counts = np.bincount([r.label for r in final.curriculum(j)], minlength=2)
            assert counts.tolist() == [5, 5]
        seeds = final.seed_indices
        assert len(set(seeds)) == 20
        assert all(toy_train.labels[s] == r.label for s, r in zip(seeds, final.records))
        assert len(students) == 2
        assert students[1].train_meta["warm_start"] is True
        assert final.images.min() >= 0.0 and final.images.max() <= 1.0

        plan = json.loads((tmp_path / "plan.json").read_text())
        assert plan["J"] == 2 and plan["cum_sizes"] == [5, 10]
        for j in (1, 2):
            assert json.loads((tmp_path / f"curriculum_{j}" / "state.json").read_text())["complete"]
            assert len(read_jsonl(tmp_path / f"curriculum_{j}" / "seeds.jsonl")) == 10
            assert len(read_jsonl(tmp_path / f"curriculum_{j}" / "loss_trace.jsonl")) == 3
        stored = load_synthetic(tmp_path / "final")
        np.testing.assert_array_equal(stored.images, final.images)
        stages = {r["stage"] for r in read_jsonl(tmp_path / "metrics.jsonl")}
        assert stages == {"student_1", "student_2"}

    def test_single_curriculum_trains_student(self, teacher, toy_train, fast_distill_cfgs):
        final, students = run_distillation(toy_train, teacher, 3, fast_distill_cfgs)
        assert len(final) == 6
        assert len(students) == 1
        assert {r.curriculum_index for r in final.records} == {1}

    def test_deterministic(self, teacher, toy_train, fast_distill_cfgs):
        a, _ = run_distillation(toy_train, teacher, 6, fast_distill_cfgs)
        b, _ = run_distillation(toy_train, teacher, 6, fast_distill_cfgs)
        np.testing.assert_array_equal(a.images, b.images)
        assert a.seed_indices == b.seed_indices

    def test_resume_matches_uninterrupted(self, teacher, toy_train, fast_distill_cfgs, tmp_path):
        full, _ = run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path / "a")
        run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path / "b")
        shutil.rmtree(tmp_path / "b" / "curriculum_2")
        shutil.rmtree(tmp_path / "b" / "final")
        resumed, students = run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path / "b")
        np.testing.assert_array_equal(resumed.images, full.images)
        assert resumed.seed_indices == full.seed_indices
        assert len(students) == 2

    def test_resume_with_other_plan(self, teacher, toy_train, fast_distill_cfgs, tmp_path):
        run_distillation(toy_train, teacher, 3, fast_distill_cfgs, run_dir=tmp_path)
        with pytest.raises(ValidationError):
            run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path)

    def test_restarted_curriculum_rewrites_audit_and_trace(self, teacher, toy_train, fast_distill_cfgs, tmp_path):
        full, _ = run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path)
        (tmp_path / "curriculum_2" / "state.json").unlink()
        resumed, _ = run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path)
        seeds = read_jsonl(tmp_path / "curriculum_2" / "seeds.jsonl")
        assert len(seeds) == 10
        assert sorted(r["index"] for r in seeds) == sorted(r.seed_index for r in resumed.curriculum(2))
        assert len(read_jsonl(tmp_path / "curriculum_2" / "loss_trace.jsonl")) == 3
        assert len(read_jsonl(tmp_path / "curriculum_1" / "seeds.jsonl")) == 10
        np.testing.assert_array_equal(resumed.images, full.images)

    def test_resume_with_other_seed(self, teacher, toy_train, fast_distill_cfgs, tmp_path):
        run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path)
        shutil.rmtree(tmp_path / "curriculum_2")
        other = fast_distill_cfgs.model_copy(update={"options": DistillOptions(rng_seed=1)})
        with pytest.raises(ValidationError):
            run_distillation(toy_train, teacher, 10, other, run_dir=tmp_path)

    def test_resume_with_other_synthesis_settings(self, teacher, toy_train, fast_distill_cfgs, tmp_path):
        run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path)
        synthesis = fast_distill_cfgs.synthesis.model_copy(update={"alpha_reg": 0.0})
        with pytest.raises(ValidationError):
            run_distillation(toy_train, teacher, 10, fast_distill_cfgs.model_copy(update={"synthesis": synthesis}),
                             run_dir=tmp_path)

    def test_fresh_run_replaces_other_settings(self, teacher, toy_train, fast_distill_cfgs, tmp_path):
        run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path)
        other = fast_distill_cfgs.model_copy(update={"options": DistillOptions(rng_seed=1)})
        run_distillation(toy_train, teacher, 10, other, run_dir=tmp_path, resume=False)
        assert json.loads((tmp_path / "plan.json").read_text())["configs"]["options"]["rng_seed"] == 1

    def test_soft_label_switch_keeps_resume(self, teacher, toy_train, fast_distill_cfgs, tmp_path):
        run_distillation(toy_train, teacher, 10, fast_distill_cfgs, run_dir=tmp_path)
        cfgs = fast_distill_cfgs.model_copy(update={"options": DistillOptions(export_soft_labels=True)})
        final, _ = run_distillation(toy_train, teacher, 10, cfgs, run_dir=tmp_path)
        assert final.soft_labels.shape == (20, 2)

    def test_first_curriculum_ignores_alpha_adv(self, teacher, toy_train, fast_distill_cfgs):
        results = []
        for alpha_adv in (0.0, 1.0, 5.0):
            synthesis = fast_distill_cfgs.synthesis.model_copy(update={"alpha_adv": alpha_adv})
            cfgs = fast_distill_cfgs.model_copy(update={"synthesis": synthesis})
            final, _ = run_distillation(toy_train, teacher, 5, cfgs)
            results.append(final)
        for other in results[1:]:
            np.testing.assert_array_equal(other.images, results[0].images)
            assert other.seed_indices == results[0].seed_indices

    def test_soft_label_export(self, teacher, toy_train, fast_distill_cfgs):
        cfgs = fast_distill_cfgs.model_copy(update={"options": DistillOptions(export_soft_labels=True)})
        final, _ = run_distillation(toy_train, teacher, 3, cfgs)
        assert final.soft_labels.shape == (6, 2)
        np.testing.assert_allclose(final.soft_labels.sum(axis=1), 1.0, rtol=1e-5)

    def test_pool_exhaustion_names_curriculum(self, teacher, toy_train, fast_distill_cfgs):
        small = subsample_per_class(toy_train, 7, rng_seed=0)
        with pytest.raises(StageError) as exc:
            run_distillation(small, teacher, 10, fast_distill_cfgs)
        assert exc.value.curriculum == 2
        assert isinstance(exc.value.cause, InsufficientDataError)
        assert str(exc.value).startswith("curriculum 2:")

    def test_teacher_mismatch(self, toy_train, fast_distill_cfgs):
        wrong = build_model("convnet-1-w4", 3, (3, 16, 16))
        with pytest.raises(ValidationError):
            run_distillation(toy_train, wrong, 5, fast_distill_cfgs)
