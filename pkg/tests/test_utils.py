"""
Tests for augmentation, JSON-lines writers and validation helpers
"""

import numpy as np
import pytest
import torch

from curdistill.exceptions import DataCorruptionError, ValidationError
from curdistill.utils.augment import RandomResizedCropFlip, sample_crop_box
from curdistill.utils.metrics import JsonlWriter, load_metrics, read_jsonl
from curdistill.utils.validation import require_batch_size, validate_images, validate_labels


class TestAugment:
    def test_boxes_inside_image(self):
        generator = torch.Generator().manual_seed(0)
        for _ in range(50):
            top, left, h, w = sample_crop_box(16, 12, (0.08, 1.0), generator)
            assert 0 <= top and top + h <= 16
            assert 0 <= left and left + w <= 12
            assert h > 0 and w > 0

    def test_same_seed_same_views(self):
        images = torch.rand(3, 3, 16, 16)
        a = RandomResizedCropFlip(seed=4)(images)
        b = RandomResizedCropFlip(seed=4)(images)
        c = RandomResizedCropFlip(seed=5)(images)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)
        assert a.shape == images.shape

    def test_gradient_reaches_pixels(self):
        images = torch.rand(2, 3, 16, 16, requires_grad=True)
        RandomResizedCropFlip(scale=(0.5, 1.0), seed=0)(images).sum().backward()
        assert images.grad is not None
        assert images.grad.abs().sum().item() > 0

    def test_no_flip(self):
        augment = RandomResizedCropFlip(flip=False, seed=0)
        assert not any(flipped for _, flipped in augment.boxes(20, 16, 16))


class TestMetrics:
    def test_writer_appends(self, tmp_path):
        writer = JsonlWriter(tmp_path / "sub" / "m.jsonl")
        writer.write({"epoch": 0, "loss": 1.5})
        writer.write({"epoch": 1, "loss": 0.5})
        assert read_jsonl(tmp_path / "sub" / "m.jsonl") == [{"epoch": 0, "loss": 1.5}, {"epoch": 1, "loss": 0.5}]
        assert load_metrics(tmp_path / "sub" / "m.jsonl")["loss"].tolist() == [1.5, 0.5]

    def test_pathless_writer_is_noop(self):
        writer = JsonlWriter()
        writer.write({"a": 1})
        assert not writer

    def test_missing_file(self, tmp_path):
        assert read_jsonl(tmp_path / "none.jsonl") == []
        assert load_metrics(tmp_path / "none.jsonl").empty


class TestValidation:
    def test_images_cast_to_float32(self):
        images = validate_images(np.zeros((2, 1, 2, 2), dtype=np.float64))
        assert images.dtype == np.float32

    def test_images_need_four_dims(self):
        with pytest.raises(ValidationError):
            validate_images(np.zeros((2, 2, 2)))

    def test_images_non_finite(self):
        images = np.zeros((1, 1, 2, 2))
        images[0, 0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            validate_images(images)

    def test_expected_shape(self):
        with pytest.raises(ValidationError):
            validate_images(np.zeros((1, 3, 4, 4)), expected_shape=(3, 8, 8))

    def test_labels_out_of_range(self):
        with pytest.raises(DataCorruptionError):
            validate_labels(np.array([0, 3]), 3)

    def test_labels_count(self):
        with pytest.raises(ValidationError):
            validate_labels(np.array([0, 1]), 3, count=3)

    def test_batch_size(self):
        require_batch_size(2)
        with pytest.raises(ValidationError):
            require_batch_size(1)
