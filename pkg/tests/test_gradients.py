"""
Finite-difference checks of the synthesis objective in float64
"""

import torch
import torch.nn.functional as F
from torch.autograd import gradcheck
from torch.func import functional_call

from curdistill.models import RegSpace
from curdistill.services.network_service import BNStatisticsHook, BatchStats, ModelCheckpoint, bn_distance, bn_layers
from curdistill.services.recover_service import adv_loss, ce_bn_loss, reg_loss

LABELS = torch.tensor([0, 1, 1, 0])


class _Reparametrized(torch.nn.Module):
    """Classifier whose named parameters are swapped for the given tensors

    With ``live`` set, the swap only applies to that exact batch; other inputs
    see the stored weights.
    """

    def __init__(self, inner, names, weights, live=None):
        super().__init__()
        self.inner = inner
        self.overrides = dict(zip(names, weights))
        self.live = live

    def _for(self, x):
        return self.overrides if self.live is None or x is self.live else {}

    def forward(self, x):
        return functional_call(self.inner, self._for(x), (x,))

    def embed(self, x):
        features = {n[len("features."):]: w for n, w in self._for(x).items() if n.startswith("features.")}
        return functional_call(self.inner.features, features, (self.inner.normalize(x),))


def _with_weights(model, names, weights, live=None):
    return ModelCheckpoint(
        arch_id=model.arch_id,
        class_count=model.class_count,
        input_shape=model.input_shape,
        module=_Reparametrized(model.module, names, weights, live),
        mean=model.mean,
        std=model.std,
    )


def _leaf_copies(model, names):
    params = dict(model.module.named_parameters())
    return tuple(params[n].detach().clone().requires_grad_(True) for n in names)


class TestPixelGradients:
    def test_ce_bn(self, tiny_double_teacher, pixel_batch):
        x = pixel_batch.clone().requires_grad_(True)
        assert gradcheck(lambda v: ce_bn_loss(tiny_double_teacher, v, LABELS).value, (x,), eps=1e-6, atol=1e-5)

    def test_full_objective(self, tiny_double_teacher, tiny_double_student, pixel_batch):
        seeds = pixel_batch.flip(0).clone()
        gate = torch.tensor([True, False, True, True])
        x = (0.25 + 0.5 * pixel_batch).requires_grad_(True)

        def objective(v):
            total = ce_bn_loss(tiny_double_teacher, v, LABELS).value
            total = total + 0.7 * reg_loss(v, seeds)
            total = total + 1.3 * adv_loss(tiny_double_student, tiny_double_teacher, v, LABELS, gate=gate).value
            return total

        assert gradcheck(objective, (x,), eps=1e-6, atol=1e-5)


class TestParameterGradients:
    def test_ce_bn_wrt_weights(self, tiny_double_teacher, pixel_batch):
        module = tiny_double_teacher.module
        running = tiny_double_teacher.bn_running
        names = ["features.0.weight", "classifier.weight"]
        params = tuple(dict(module.named_parameters())[n].detach().clone().requires_grad_(True) for n in names)

        def objective(*weights):
            hooks = [BNStatisticsHook(bn) for bn in bn_layers(module)]
            try:
                logits = functional_call(module, dict(zip(names, weights)), (pixel_batch,))
            finally:
                for hook in hooks:
                    hook.close()
            stats = BatchStats([h.mean for h in hooks], [h.std for h in hooks])
            return F.cross_entropy(logits, LABELS) + bn_distance(stats, running)

        assert gradcheck(objective, params, eps=1e-6, atol=1e-5)

    def test_adv_wrt_student_weights(self, tiny_double_teacher, tiny_double_student, pixel_batch):
        names = ["features.0.weight", "classifier.weight", "classifier.bias"]
        params = _leaf_copies(tiny_double_student, names)
        gate = torch.tensor([True, True, False, True])

        def objective(*weights):
            student = _with_weights(tiny_double_student, names, weights)
            return adv_loss(student, tiny_double_teacher, pixel_batch, LABELS, gate=gate).value

        assert gradcheck(objective, params, eps=1e-6, atol=1e-5)

    def test_feature_reg_wrt_teacher_weights(self, tiny_double_teacher, pixel_batch):
        names = ["features.0.weight", "features.1.weight", "features.1.bias"]
        params = _leaf_copies(tiny_double_teacher, names)
        x = 0.25 + 0.5 * pixel_batch
        seeds = pixel_batch.flip(0).clone()

        def objective(*weights):
            teacher = _with_weights(tiny_double_teacher, names, weights, live=x)
            return reg_loss(x, seeds, RegSpace.FEATURE, teacher)

        assert gradcheck(objective, params, eps=1e-6, atol=1e-5)
