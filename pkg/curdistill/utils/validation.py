from typing import Sequence

import numpy as np

from ..exceptions import DataCorruptionError, ValidationError


def validate_images(images: np.ndarray, expected_shape: Sequence[int] = None) -> np.ndarray:
    """
    Validate an image array in raw pixel range

    Args:
        images: Array of shape N x C x H x W
        expected_shape: Optional per-image (C, H, W) shape to enforce

    Returns:
        The images as a contiguous float32 array

    Raises:
        ValidationError: If the array is malformed or leaves [0, 1]
    """
    if images.ndim != 4:
        raise ValidationError(f"images must be N x C x H x W, got shape {images.shape}")
    if expected_shape is not None and tuple(images.shape[1:]) != tuple(expected_shape):
        raise ValidationError(
            f"image shape {tuple(images.shape[1:])} does not match {tuple(expected_shape)}"
        )
    if images.size and (not np.isfinite(images).all() or images.min() < 0.0 or images.max() > 1.0):
        raise ValidationError("pixel values must be finite and lie in [0, 1]")
    return np.ascontiguousarray(images, dtype=np.float32)


def validate_labels(labels: np.ndarray, class_count: int, count: int = None) -> np.ndarray:
    """
    Validate integer labels against the class count

    Raises:
        ValidationError: If the length does not match
        DataCorruptionError: If a label falls outside [0, class_count)
    """
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValidationError(f"labels must be one-dimensional, got shape {labels.shape}")
    if count is not None and labels.shape[0] != count:
        raise ValidationError(f"{labels.shape[0]} labels for {count} images")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        bad = labels[(labels < 0) | (labels >= class_count)][0]
        raise DataCorruptionError(f"label {int(bad)} outside [0, {class_count})")
    return labels.astype(np.int64)


def require_all_classes(labels: np.ndarray, class_count: int) -> None:
    """Raise ValidationError if any class has no sample"""
    counts = np.bincount(labels, minlength=class_count)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValidationError(f"classes without samples: {missing.tolist()}")


def require_batch_size(n: int, minimum: int = 2) -> None:
    """Batch statistics need at least two samples"""
    if n < minimum:
        raise ValidationError(f"batch size {n} < {minimum}: batch statistics are undefined")
