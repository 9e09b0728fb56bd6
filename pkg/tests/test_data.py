"""
Tests for dataset loading, class-indexed access and synthetic persistence
"""

import json
import pickle

import numpy as np
import pytest

from curdistill.exceptions import DataCorruptionError, DatasetLoadError, FormatError, ValidationError
from curdistill.models import CurriculumPlan
from curdistill.services.dataset_service import (
    LabeledImageSet,
    SyntheticDataset,
    SyntheticRecord,
    class_indices,
    download_dataset,
    load_dataset,
    load_synthetic,
    random_real_subset,
    save_synthetic,
    select_records,
    subsample_per_class,
)


def _write_cifar10(root, bad_label=False):
    directory = root / "cifar-10-batches-py"
    directory.mkdir(parents=True)
    rng = np.random.default_rng(0)
    names = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
    for name in names:
        labels = list(range(10))
        if bad_label and name == "data_batch_3":
            labels[4] = 10
        batch = {b"data": rng.integers(0, 256, size=(10, 3072), dtype=np.uint8), b"labels": labels}
        with open(directory / name, "wb") as f:
            pickle.dump(batch, f)
    return directory


def _synthetic(ipc=2, class_count=2, shape=(3, 4, 4), with_seeds=True):
    rng = np.random.default_rng(1)
    records = [
        SyntheticRecord(
            image=rng.random(shape).astype(np.float32),
            label=c,
            seed_index=(c * ipc + k) if with_seeds else None,
            curriculum_index=1 + (k % 2),
        )
        for c in range(class_count)
        for k in range(ipc)
    ]
    plan = CurriculumPlan(ipc=ipc, cum_sizes=[1, ipc]) if ipc > 1 else None
    return SyntheticDataset(records, ipc, class_count, "toy", curricula=plan)


class TestLoadDataset:
    """Loading the registered datasets"""

    def test_toy2_shapes_and_range(self, toy_train, toy_val):
        assert toy_train.images.shape == (200, 3, 16, 16)
        assert toy_val.images.shape == (100, 3, 16, 16)
        assert toy_train.images.dtype == np.float32
        assert toy_train.images.min() >= 0.0 and toy_train.images.max() <= 1.0
        assert np.bincount(toy_train.labels).tolist() == [100, 100]

    def test_toy2_is_deterministic(self, toy_train):
        again = load_dataset("toy2", "train")
        np.testing.assert_array_equal(again.images, toy_train.images)
        np.testing.assert_array_equal(again.labels, toy_train.labels)

    def test_toy2_splits_differ(self, toy_train, toy_val):
        assert not np.array_equal(toy_train.images[:100], toy_val.images)

    def test_cifar10_from_pickle_batches(self, tmp_path):
        _write_cifar10(tmp_path)
        train = load_dataset("cifar10", "train", root=tmp_path)
        val = load_dataset("cifar10", "val", root=tmp_path)
        assert train.images.shape == (50, 3, 32, 32)
        assert val.images.shape == (10, 3, 32, 32)
        assert train.class_count == 10
        assert train.images.max() <= 1.0

    def test_missing_file_names_path(self, tmp_path):
        directory = _write_cifar10(tmp_path)
        (directory / "data_batch_2").unlink()
        with pytest.raises(DatasetLoadError) as exc:
            load_dataset("cifar10", "train", root=tmp_path)
        assert "data_batch_2" in str(exc.value)
        assert exc.value.path.endswith("data_batch_2")

    def test_label_out_of_range(self, tmp_path):
        _write_cifar10(tmp_path, bad_label=True)
        with pytest.raises(DataCorruptionError):
            load_dataset("cifar10", "train", root=tmp_path)

    def test_unknown_dataset(self):
        with pytest.raises(DatasetLoadError):
            load_dataset("imagenet-42")

    def test_bad_split(self):
        with pytest.raises(ValidationError):
            load_dataset("toy2", "test")

    def test_generated_dataset_has_no_archive(self, tmp_path):
        with pytest.raises(DatasetLoadError):
            download_dataset("toy2", root=tmp_path)


class TestLabeledImageSet:
    """Validation on construction and subsets"""

    def test_pixels_outside_range_rejected(self):
        images = np.full((2, 1, 2, 2), 1.5, dtype=np.float32)
        with pytest.raises(ValidationError):
            LabeledImageSet(images, np.array([0, 1]), 2, (0.5,), (0.25,), "x", "val")

    def test_train_split_needs_every_class(self):
        images = np.zeros((2, 1, 2, 2), dtype=np.float32)
        with pytest.raises(ValidationError):
            LabeledImageSet(images, np.array([0, 0]), 2, (0.5,), (0.25,), "x", "train")

    def test_subset_keeps_metadata(self, toy_train):
        part = toy_train.subset([0, 5, 7])
        assert len(part) == 3
        assert part.mean == toy_train.mean
        np.testing.assert_array_equal(part.images[1], toy_train.images[5])


class TestClassAccess:
    """Per-class indexing and sampling helpers"""

    def test_class_indices_partition(self, toy_train):
        groups = class_indices(toy_train)
        assert sorted(i for idx in groups.values() for i in idx) == list(range(len(toy_train)))
        for c, idx in groups.items():
            assert (toy_train.labels[idx] == c).all()

    def test_subsample_per_class(self, toy_train):
        small = subsample_per_class(toy_train, 10, rng_seed=3)
        assert np.bincount(small.labels).tolist() == [10, 10]
        assert small.split == "train"

    def test_subsample_too_many(self, toy_train):
        with pytest.raises(ValidationError):
            subsample_per_class(toy_train, 101)

    def test_random_real_subset(self, toy_train):
        sds = random_real_subset(toy_train, 4, rng_seed=0)
        assert len(sds) == 8
        for record in sds.records:
            np.testing.assert_array_equal(record.image, toy_train.images[record.seed_index])
            assert toy_train.labels[record.seed_index] == record.label

    def test_select_records(self):
        sds = _synthetic(ipc=2, class_count=3)
        kept = select_records(sds, [0, 2])
        assert {r.label for r in kept} == {0, 2}
        assert len(kept) == 4


class TestSyntheticPersistence:
    """manifest.json + images.bin layout"""

    def test_save_and_load(self, tmp_path):
        sds = _synthetic()
        save_synthetic(sds, tmp_path)
        loaded = load_synthetic(tmp_path)
        np.testing.assert_array_equal(loaded.images, sds.images)
        assert loaded.labels.tolist() == sds.labels.tolist()
        assert loaded.seed_indices == sds.seed_indices
        assert [r.curriculum_index for r in loaded.records] == [r.curriculum_index for r in sds.records]
        assert loaded.curricula.cum_sizes == [1, 2]

    def test_manifest_layout(self, tmp_path):
        save_synthetic(_synthetic(), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["image_shape"] == [3, 4, 4]
        assert manifest["images"]["bytes"] == 4 * 3 * 4 * 4 * 4
        assert [r["offset"] for r in manifest["records"]] == [0, 192, 384, 576]

    def test_seedless_records(self, tmp_path):
        save_synthetic(_synthetic(with_seeds=False), tmp_path)
        assert load_synthetic(tmp_path).seed_indices == [None] * 4

    def test_soft_labels_stored(self, tmp_path):
        sds = _synthetic()
        sds.soft_labels = np.full((4, 2), 0.5, dtype=np.float32)
        save_synthetic(sds, tmp_path)
        np.testing.assert_array_equal(load_synthetic(tmp_path).soft_labels, sds.soft_labels)

    def test_corrupted_blob(self, tmp_path):
        save_synthetic(_synthetic(), tmp_path)
        blob = bytearray((tmp_path / "images.bin").read_bytes())
        blob[10] ^= 0xFF
        (tmp_path / "images.bin").write_bytes(bytes(blob))
        with pytest.raises(DataCorruptionError):
            load_synthetic(tmp_path)

    def test_record_count_mismatch(self, tmp_path):
        save_synthetic(_synthetic(), tmp_path)
        manifest_path = tmp_path / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["records"] = manifest["records"][:-1]
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_synthetic(tmp_path)

    @pytest.mark.parametrize("key", ["label", "offset", "curriculum_index", "seed_index"])
    def test_record_missing_field(self, tmp_path, key):
        save_synthetic(_synthetic(), tmp_path)
        manifest_path = tmp_path / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        del manifest["records"][1][key]
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_synthetic(tmp_path)

    def test_record_with_bad_label(self, tmp_path):
        save_synthetic(_synthetic(), tmp_path)
        manifest_path = tmp_path / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["records"][0]["label"] = "cat"
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_synthetic(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetLoadError):
            load_synthetic(tmp_path)

    def test_duplicate_seed_rejected(self):
        sds = _synthetic()
        sds.records[1].seed_index = sds.records[0].seed_index
        with pytest.raises(ValidationError):
            sds.validate()

    def test_uneven_classes_rejected(self):
        sds = _synthetic()
        sds.records[0].label = 1
        with pytest.raises(ValidationError):
            sds.validate()
