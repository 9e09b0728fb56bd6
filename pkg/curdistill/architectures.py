"""
Classifier architectures

Every network takes raw [0, 1] pixels: a fixed ``Normalize`` front layer applies
the dataset statistics, ``features`` maps to the penultimate vector and
``classifier`` is the final linear layer.
"""

import re
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
from torchvision.models import resnet18

from .config import BN_EPS, BN_MOMENTUM, DEFAULT_WIDTH
from .exceptions import ArchitectureError

SUPPORTED_ARCHS = ("convnet-3", "convnet-4", "resnet18-cifar", "resnet18")

_CONVNET_PATTERN = re.compile(r"^convnet-(\d)(?:-w(\d+))?$")


@dataclass(frozen=True)
class ArchSpec:
    family: str
    depth: int = 0
    width: int = DEFAULT_WIDTH


def parse_arch(arch_id: str) -> ArchSpec:
    """Resolve an architecture id such as ``convnet-3``, ``convnet-1-w8`` or ``resnet18-cifar``"""
    match = _CONVNET_PATTERN.match(arch_id)
    if match:
        depth = int(match.group(1))
        width = int(match.group(2)) if match.group(2) else DEFAULT_WIDTH
        if not 1 <= depth <= 4 or width < 1:
            raise ArchitectureError(f"unsupported convnet depth/width in '{arch_id}'")
        return ArchSpec("convnet", depth, width)
    if arch_id in ("resnet18-cifar", "resnet18"):
        return ArchSpec(arch_id)
    raise ArchitectureError(f"unsupported architecture '{arch_id}'; choose from {SUPPORTED_ARCHS}")


class Normalize(nn.Module):
    """Per-channel (x - mean) / std with fixed buffers"""

    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(-1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(-1, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


class Classifier(nn.Module):
    def __init__(self, normalize: Normalize, features: nn.Module, classifier: nn.Linear):
        super().__init__()
        self.normalize = normalize
        self.features = features
        self.classifier = classifier

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(self.normalize(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(x))


def _convnet(spec: ArchSpec, class_count: int, input_shape: Tuple[int, int, int]) -> Tuple[nn.Module, nn.Linear]:
    channels, height, width = input_shape
    scale = 2 ** spec.depth
    if height < scale or width < scale:
        raise ArchitectureError(
            f"convnet-{spec.depth} needs inputs of at least {scale}x{scale}, got {height}x{width}"
        )
    layers = []
    in_channels = channels
    for _ in range(spec.depth):
        layers += [
            nn.Conv2d(in_channels, spec.width, kernel_size=3, padding=1),
            nn.BatchNorm2d(spec.width, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.AvgPool2d(kernel_size=2, stride=2),
        ]
        in_channels = spec.width
    layers.append(nn.Flatten(1))
    feature_dim = spec.width * (height // scale) * (width // scale)
    return nn.Sequential(*layers), nn.Linear(feature_dim, class_count)


def _resnet(spec: ArchSpec, class_count: int, input_shape: Tuple[int, int, int]) -> Tuple[nn.Module, nn.Linear]:
    channels = input_shape[0]
    net = resnet18(weights=None, num_classes=class_count)
    if spec.family == "resnet18-cifar":
        net.conv1 = nn.Conv2d(channels, 64, kernel_size=3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
    elif channels != 3:
        net.conv1 = nn.Conv2d(channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
    features = nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool,
        net.layer1, net.layer2, net.layer3, net.layer4,
        net.avgpool, nn.Flatten(1),
    )
    return features, net.fc


def create_network(
    arch_id: str,
    class_count: int,
    input_shape: Tuple[int, int, int],
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
) -> Classifier:
    """Instantiate an uninitialized-seed classifier; callers control the RNG"""
    if class_count < 1:
        raise ArchitectureError(f"class_count must be positive, got {class_count}")
    if len(input_shape) != 3:
        raise ArchitectureError(f"input_shape must be (C, H, W), got {tuple(input_shape)}")
    spec = parse_arch(arch_id)
    channels = input_shape[0]
    mean = mean if mean is not None else [0.0] * channels
    std = std if std is not None else [1.0] * channels
    if len(mean) != channels or len(std) != channels:
        raise ArchitectureError("normalization statistics must have one entry per channel")
    builder = _convnet if spec.family == "convnet" else _resnet
    features, classifier = builder(spec, class_count, tuple(input_shape))
    return Classifier(Normalize(mean, std), features, classifier)
