import math
from typing import Optional, Tuple

import torch
import torchvision.transforms.functional as TF

_LOG_RATIO = (math.log(3.0 / 4.0), math.log(4.0 / 3.0))


def sample_crop_box(
    height: int,
    width: int,
    scale: Tuple[float, float],
    generator: torch.Generator,
) -> Tuple[int, int, int, int]:
    """
    Draw a (top, left, h, w) box the way RandomResizedCrop does, from a seeded generator

    Falls back to the full image after ten rejected attempts.
    """
    area = height * width
    for _ in range(10):
        target_area = area * torch.empty(1).uniform_(scale[0], scale[1], generator=generator).item()
        aspect = math.exp(torch.empty(1).uniform_(_LOG_RATIO[0], _LOG_RATIO[1], generator=generator).item())
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(torch.randint(0, height - h + 1, (1,), generator=generator).item())
            left = int(torch.randint(0, width - w + 1, (1,), generator=generator).item())
            return top, left, h, w
    return 0, 0, height, width


class RandomResizedCropFlip:
    """
    Per-sample random-resized-crop (+ optional horizontal flip) on raw-pixel batches

    The crop is resampled back to full resolution with bilinear interpolation, so
    gradients flow from the augmented view to the underlying pixels. Every random
    draw comes from ``generator``; identical seeds give identical crop sequences.
    """

    def __init__(
        self,
        scale: Tuple[float, float] = (0.08, 1.0),
        flip: bool = True,
        generator: Optional[torch.Generator] = None,
        seed: int = 0,
    ):
        self.scale = scale
        self.flip = flip
        if generator is None:
            generator = torch.Generator()
            generator.manual_seed(seed)
        self.generator = generator

    def boxes(self, count: int, height: int, width: int):
        out = []
        for _ in range(count):
            box = sample_crop_box(height, width, self.scale, self.generator)
            flipped = self.flip and bool(torch.rand(1, generator=self.generator).item() < 0.5)
            out.append((box, flipped))
        return out

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        n, _, height, width = images.shape
        views = []
        for image, (box, flipped) in zip(images, self.boxes(n, height, width)):
            top, left, h, w = box
            view = TF.resized_crop(image, top, left, h, w, [height, width], antialias=False)
            if flipped:
                view = torch.flip(view, dims=(-1,))
            views.append(view)
        return torch.stack(views)
