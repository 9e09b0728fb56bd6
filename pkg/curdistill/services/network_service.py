import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from ..architectures import Classifier, create_network
from ..config import CHECKPOINT_BLOB, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_HEADER, EVAL_BATCH_SIZE
from ..exceptions import ArchitectureError, DataCorruptionError, DatasetLoadError, FormatError, ValidationError
from ..utils.validation import require_batch_size

logger = logging.getLogger(__name__)

_LE_FLOAT32 = np.dtype("<f4")
# floor on the captured variance before the square root
_VAR_FLOOR = 1e-12


@dataclass
class ModelCheckpoint:
    """Architecture id, parameter state and BN running statistics of a classifier"""

    arch_id: str
    class_count: int
    input_shape: Tuple[int, int, int]
    module: Classifier
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    train_meta: Dict[str, object] = field(default_factory=dict)

    @property
    def device(self) -> torch.device:
        return next(self.module.parameters()).device

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    @property
    def params(self) -> Dict[str, torch.Tensor]:
        return {name: p.detach() for name, p in self.module.named_parameters()}

    @property
    def bn_running(self) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        """(mu, sigma) per BN layer; sigma is the standard deviation"""
        return [(bn.running_mean.detach(), bn.running_var.detach().sqrt()) for bn in bn_layers(self)]

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(
            arch_id=self.arch_id,
            class_count=self.class_count,
            input_shape=tuple(self.input_shape),
            module=copy.deepcopy(self.module),
            mean=tuple(self.mean),
            std=tuple(self.std),
            train_meta=dict(self.train_meta),
        )

    def frozen(self) -> "ModelCheckpoint":
        """Eval-mode copy whose parameters do not require gradients"""
        clone = self.copy()
        clone.module.eval()
        clone.module.requires_grad_(False)
        return clone

    def to(self, device: Union[str, torch.device]) -> "ModelCheckpoint":
        self.module.to(device)
        return self


@dataclass
class BatchStats:
    """Per-BN-layer mean and standard deviation of the current batch, before each BN layer"""

    means: List[torch.Tensor]
    stds: List[torch.Tensor]

    def __len__(self) -> int:
        return len(self.means)


def bn_layers(model: Union[ModelCheckpoint, nn.Module]) -> List[nn.BatchNorm2d]:
    module = model.module if isinstance(model, ModelCheckpoint) else model
    return [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def build_model(
    arch_id: str,
    class_count: int,
    input_shape: Sequence[int],
    rng_seed: int = 0,
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
    device: Union[str, torch.device] = "cpu",
) -> ModelCheckpoint:
    """
    Build a freshly initialized classifier

    Initialization is deterministic in rng_seed and leaves the global RNG untouched.
    BN running statistics start at mu = 0, sigma = 1.

    Raises:
        ArchitectureError: If the architecture or input shape is unsupported
    """
    input_shape = tuple(int(s) for s in input_shape)
    channels = input_shape[0] if input_shape else 0
    mean = tuple(mean) if mean is not None else (0.0,) * channels
    std = tuple(std) if std is not None else (1.0,) * channels
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng_seed)
        module = create_network(arch_id, class_count, input_shape, mean, std)
    module.to(device)
    return ModelCheckpoint(
        arch_id=arch_id,
        class_count=class_count,
        input_shape=input_shape,
        module=module,
        mean=mean,
        std=std,
        train_meta={"init_seed": rng_seed},
    )


def _check_batch(model: ModelCheckpoint, batch: torch.Tensor) -> None:
    if batch.dim() != 4 or tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ValidationError(
            f"batch shape {tuple(batch.shape)} does not match model input {tuple(model.input_shape)}"
        )


def forward(model: ModelCheckpoint, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """
    Logits for a raw-pixel batch

    Eval mode uses running BN statistics and never mutates them; train mode uses
    batch statistics and updates the running buffers like any training step.
    """
    _check_batch(model, batch)
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got '{mode}'")
    was_training = model.module.training
    model.module.train(mode == "train")
    try:
        return model.module(batch)
    finally:
        model.module.train(was_training)


class BNStatisticsHook:
    """Forward pre-hook capturing per-channel mean/std of a BN layer's input"""

    def __init__(self, module: nn.Module):
        self.mean: Optional[torch.Tensor] = None
        self.std: Optional[torch.Tensor] = None
        self.handle = module.register_forward_pre_hook(self.hook_fn)

    def hook_fn(self, module, inputs):
        x = inputs[0]
        dims = [0] + list(range(2, x.dim()))
        self.mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        self.std = var.clamp_min(_VAR_FLOOR).sqrt()

    def close(self):
        self.handle.remove()


def forward_with_bn_capture(model: ModelCheckpoint, batch: torch.Tensor) -> Tuple[torch.Tensor, BatchStats]:
    """
    Eval-mode logits plus the batch statistics entering every BN layer

    The captured tensors stay in the autograd graph so BN-matching losses can
    differentiate through them.

    Raises:
        ValidationError: If the batch holds fewer than two samples
    """
    _check_batch(model, batch)
    require_batch_size(batch.shape[0])
    hooks = [BNStatisticsHook(bn) for bn in bn_layers(model)]
    was_training = model.module.training
    model.module.eval()
    try:
        logits = model.module(batch)
    finally:
        model.module.train(was_training)
        for hook in hooks:
            hook.close()
    return logits, BatchStats([h.mean for h in hooks], [h.std for h in hooks])


def bn_distance(stats: BatchStats, running: List[Tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Sum over layers of ||mu_l - mu_running||_2 + ||sigma_l - sigma_running||_2"""
    if len(stats) != len(running):
        raise ValidationError(f"{len(stats)} captured layers vs {len(running)} running entries")
    terms = [
        torch.linalg.vector_norm(mu - run_mu) + torch.linalg.vector_norm(sigma - run_sigma)
        for mu, sigma, (run_mu, run_sigma) in zip(stats.means, stats.stds, running)
    ]
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    """
    Row-wise softmax with max subtraction

    Raises:
        ValidationError: On NaN input
    """
    if torch.isnan(logits).any():
        raise ValidationError("logits contain NaN")
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    exp = shifted.exp()
    return exp / exp.sum(dim=-1, keepdim=True)


def penultimate_features(model: ModelCheckpoint, batch: torch.Tensor) -> torch.Tensor:
    """Eval-mode penultimate (pooled / flattened) features"""
    _check_batch(model, batch)
    was_training = model.module.training
    model.module.eval()
    try:
        return model.module.embed(batch)
    finally:
        model.module.train(was_training)


@torch.no_grad()
def predict(model: ModelCheckpoint, images: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    """Eval-mode argmax predictions for an array of raw-pixel images"""
    out = []
    for start in range(0, len(images), batch_size):
        batch = torch.as_tensor(images[start:start + batch_size], device=model.device, dtype=model.dtype)
        out.append(forward(model, batch, mode="eval").argmax(dim=1).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------

def save_checkpoint(model: ModelCheckpoint, directory: Union[str, Path]) -> Path:
    """
    Write checkpoint.json (header) + weights.bin (little-endian float32 tensors)

    Returns:
        Path of the header file
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, tensor in model.module.state_dict().items():
        values = tensor.detach().cpu().numpy().astype(_LE_FLOAT32)
        data = np.ascontiguousarray(values).tobytes()
        tensors.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": str(tensor.dtype).replace("torch.", ""),
            "offset": offset,
        })
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch_id": model.arch_id,
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "mean": list(model.mean),
        "std": list(model.std),
        "train_meta": model.train_meta,
        "tensors": tensors,
        "blob": {"file": CHECKPOINT_BLOB, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()},
    }
    tmp = directory / (CHECKPOINT_BLOB + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, directory / CHECKPOINT_BLOB)
    header_path = directory / CHECKPOINT_HEADER
    header_path.write_text(json.dumps(header, indent=2, default=str), encoding="utf-8")
    return header_path


def load_checkpoint(directory: Union[str, Path], device: Union[str, torch.device] = "cpu") -> ModelCheckpoint:
    """
    Rebuild a checkpoint written by save_checkpoint

    Raises:
        DatasetLoadError: If the header or blob is missing
        DataCorruptionError: If the blob fails its checksum
        FormatError: If the tensors do not fit the architecture
    """
    directory = Path(directory)
    header_path = directory / CHECKPOINT_HEADER
    if not header_path.exists():
        raise DatasetLoadError(f"checkpoint not found: {header_path}", path=str(header_path))
    header = json.loads(header_path.read_text(encoding="utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {header.get('format_version')}")
    blob_path = directory / header["blob"]["file"]
    if not blob_path.exists():
        raise DatasetLoadError(f"checkpoint weights not found: {blob_path}", path=str(blob_path))
    blob = blob_path.read_bytes()
    if len(blob) != header["blob"]["bytes"] or hashlib.sha256(blob).hexdigest() != header["blob"]["sha256"]:
        raise DataCorruptionError(f"checksum mismatch for {blob_path}")

    try:
        model = build_model(
            header["arch_id"], header["class_count"], header["input_shape"],
            mean=header["mean"], std=header["std"],
        )
    except ArchitectureError as e:
        raise FormatError(f"{header_path}: {e}")
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        values = np.frombuffer(blob, dtype=_LE_FLOAT32, count=count, offset=entry["offset"])
        tensor = torch.from_numpy(values.copy()).reshape(entry["shape"])
        state[entry["name"]] = tensor.to(getattr(torch, entry["dtype"]))
    try:
        model.module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise FormatError(f"{header_path}: tensors do not match {header['arch_id']}: {e}")
    model.train_meta = header.get("train_meta", {})
    return model.to(device)
