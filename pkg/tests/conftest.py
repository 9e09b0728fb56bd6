"""
Shared fixtures: the generated toy2 dataset, tiny networks and fast configs
"""

import os

os.environ.setdefault("CURDISTILL_PROGRESS", "0")

import pytest
import torch

from curdistill.models import DistillConfigs, DistillOptions, SynthesisConfig, TrainConfig
from curdistill.services.dataset_service import load_dataset
from curdistill.services.network_service import build_model
from curdistill.services.train_service import train_teacher

TINY_ARCH = "convnet-1-w4"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def toy_train():
    return load_dataset("toy2", "train")


@pytest.fixture(scope="session")
def toy_val():
    return load_dataset("toy2", "val")


@pytest.fixture
def fast_train_cfg():
    return TrainConfig(epochs=2, batch_size=16, learning_rate=5e-3, augmentation=False)


@pytest.fixture
def fast_synthesis_cfg():
    return SynthesisConfig(iterations=3, batch_size=4, learning_rate=0.05)


@pytest.fixture
def fast_distill_cfgs(fast_train_cfg, fast_synthesis_cfg):
    return DistillConfigs(
        synthesis=fast_synthesis_cfg,
        student=fast_train_cfg,
        options=DistillOptions(rng_seed=0),
    )


@pytest.fixture(scope="session")
def toy_teacher(toy_train):
    """Small convnet trained for a few epochs on toy2 (float32)"""
    cfg = TrainConfig(epochs=10, batch_size=32, learning_rate=1e-2, augmentation=False, label_mode="hard")
    return train_teacher(toy_train, TINY_ARCH, cfg)


@pytest.fixture
def teacher(toy_teacher):
    return toy_teacher.copy()


def double_model(arch_id=TINY_ARCH, class_count=2, input_shape=(3, 8, 8), seed=0):
    """Float64 net with non-trivial BN running statistics"""
    model = build_model(arch_id, class_count, input_shape, rng_seed=seed, mean=(0.5,) * 3, std=(0.25,) * 3)
    model.module.double()
    generator = torch.Generator().manual_seed(seed + 100)
    for bn in model.module.modules():
        if isinstance(bn, torch.nn.BatchNorm2d):
            bn.running_mean.copy_(0.1 * torch.randn(bn.num_features, generator=generator, dtype=torch.float64))
            bn.running_var.copy_(0.5 + torch.rand(bn.num_features, generator=generator, dtype=torch.float64))
    model.module.eval()
    return model


@pytest.fixture
def tiny_double_teacher():
    return double_model(seed=0)


@pytest.fixture
def tiny_double_student():
    return double_model(seed=1)


@pytest.fixture
def pixel_batch():
    generator = torch.Generator().manual_seed(7)
    return torch.rand(4, 3, 8, 8, generator=generator, dtype=torch.float64)
