import math
from typing import Callable

import numpy as np


def cosine_factor(total_steps: int) -> Callable[[int], float]:
    """
    Multiplicative cosine decay for torch.optim.lr_scheduler.LambdaLR

    The factor is 1 at step 0 and reaches 0 at the final step (total_steps - 1).
    """
    last = max(total_steps - 1, 1)

    def factor(step: int) -> float:
        return 0.5 * (1.0 + math.cos(math.pi * min(step, last) / last))

    return factor


def derive_seed(base_seed: int, *keys: int) -> int:
    """Stable 31-bit seed for a (stage, curriculum, ...) key path"""
    sequence = np.random.SeedSequence([int(base_seed), *[int(k) for k in keys]])
    return int(sequence.generate_state(1)[0] & 0x7FFFFFFF)
