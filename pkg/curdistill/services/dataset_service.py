import hashlib
import json
import logging
import os
import pickle
import tarfile
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import requests

from ..config import (
    DATA_DIR,
    DATASETS,
    IMAGES_BLOB,
    MANIFEST_NAME,
    SOFTLABELS_BLOB,
    SYNTHETIC_FORMAT_VERSION,
    get_data_path,
)
from ..exceptions import DataCorruptionError, DatasetLoadError, FormatError, ValidationError
from ..models import CurriculumPlan
from ..utils.validation import require_all_classes, validate_images, validate_labels

logger = logging.getLogger(__name__)

_LE_FLOAT32 = np.dtype("<f4")
TOY_SEED = 20240117


@dataclass
class LabeledImageSet:
    """Original images (raw [0, 1] pixels) with integer labels and normalization metadata"""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    name: str = ""
    split: str = "train"

    def __post_init__(self):
        self.images = validate_images(self.images)
        self.labels = validate_labels(self.labels, self.class_count, count=len(self.images))
        if len(self.mean) != self.images.shape[1] or len(self.std) != self.images.shape[1]:
            raise ValidationError("normalization needs one mean/std per channel")
        if any(s <= 0 for s in self.std):
            raise ValidationError("normalization std must be positive")
        if self.split == "train":
            require_all_classes(self.labels, self.class_count)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(
            images=self.images[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            mean=self.mean,
            std=self.std,
            name=self.name,
            split=split or "subset",
        )


@dataclass
class SyntheticRecord:
    image: np.ndarray
    label: int
    seed_index: Optional[int]
    curriculum_index: int = 1


@dataclass
class SyntheticDataset:
    """Curriculum-partitioned synthetic images with seed provenance"""

    records: List[SyntheticRecord]
    ipc: int
    class_count: int
    dataset_id: str
    curricula: Optional[CurriculumPlan] = None
    soft_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records]).astype(np.float32, copy=False)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def seed_indices(self) -> List[Optional[int]]:
        return [r.seed_index for r in self.records]

    def curriculum(self, j: int) -> List[SyntheticRecord]:
        return [r for r in self.records if r.curriculum_index == j]

    def validate(self) -> "SyntheticDataset":
        """
        Check the dataset invariants

        Raises:
            ValidationError: On count, label, shape or provenance violations
        """
        if len(self.records) != self.ipc * self.class_count:
            raise ValidationError(
                f"{len(self.records)} records != ipc {self.ipc} x classes {self.class_count}"
            )
        labels = self.labels
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValidationError("record label outside the class range")
        counts = np.bincount(labels, minlength=self.class_count)
        if (counts != self.ipc).any():
            raise ValidationError(f"per-class counts {counts.tolist()} differ from ipc {self.ipc}")
        shapes = {r.image.shape for r in self.records}
        if len(shapes) > 1:
            raise ValidationError(f"records have mixed shapes {sorted(shapes)}")
        seeds = [s for s in self.seed_indices if s is not None]
        if len(seeds) != len(set(seeds)):
            raise ValidationError("seed_index values must be unique")
        if any(r.curriculum_index < 1 for r in self.records):
            raise ValidationError("curriculum_index starts at 1")
        if self.soft_labels is not None and self.soft_labels.shape != (len(self.records), self.class_count):
            raise ValidationError("soft labels must be records x classes")
        return self


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

Loader = Callable[[str, Path, dict], Tuple[np.ndarray, np.ndarray]]
LOADERS: Dict[str, Loader] = {}


def register_loader(name: str):
    """Register a loader ``fn(split, root, entry) -> (images, labels)`` under a dataset id"""

    def decorator(fn: Loader) -> Loader:
        LOADERS[name] = fn
        return fn

    return decorator


def _read_pickle_batch(path: Path, label_key: bytes) -> Tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise DatasetLoadError(f"dataset file not found: {path}", path=str(path))
    try:
        with open(path, "rb") as f:
            batch = pickle.load(f, encoding="bytes")
    except (OSError, pickle.UnpicklingError, EOFError) as e:
        raise DatasetLoadError(f"failed to read {path}: {e}", path=str(path))
    data = np.asarray(batch[b"data"], dtype=np.uint8)
    labels = np.asarray(batch[label_key], dtype=np.int64)
    return data, labels


@register_loader("cifar10")
@register_loader("cifar100")
def _load_cifar(split: str, root: Path, entry: dict) -> Tuple[np.ndarray, np.ndarray]:
    directory = Path(root) / entry["directory"]
    files = entry["train_files"] if split == "train" else entry["val_files"]
    chunks, labels = [], []
    for name in files:
        data, batch_labels = _read_pickle_batch(directory / name, entry["label_key"])
        chunks.append(data)
        labels.append(batch_labels)
    channels, height, width = entry["shape"]
    raw = np.concatenate(chunks).reshape(-1, channels, height, width)
    return raw.astype(np.float32) / 255.0, np.concatenate(labels)


@register_loader("toy2")
def _load_toy2(split: str, root: Path, entry: dict) -> Tuple[np.ndarray, np.ndarray]:
    """
    Two linearly separable classes: faint horizontal vs. vertical stripes

    Each image also carries a label-independent diagonal distractor and pixel noise.
    Noise has no component along the class patterns, so the pattern difference
    separates the classes (up to clipping) while a few examples leave the stripes hard to see.
    """
    per_class = entry["train_per_class"] if split == "train" else entry["val_per_class"]
    channels, height, width = entry["shape"]
    rng = np.random.default_rng([TOY_SEED, 0 if split == "train" else 1])
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    tint = np.array([1.0, 0.6, 0.3])[:channels].reshape(-1, 1, 1)
    patterns = np.stack([tint * np.sin(2 * np.pi * ys / 8.0), tint * np.sin(2 * np.pi * xs / 8.0)])
    labels = np.repeat(np.arange(2), per_class)
    n = len(labels)

    amplitude = rng.uniform(0.03, 0.09, size=(n, 1, 1, 1))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n, 1, 1, 1))
    distractor = rng.uniform(0.0, 0.2, size=(n, 1, 1, 1)) * np.sin(2 * np.pi * (xs + ys) / 4.0 + phase)

    # remove the noise component along the class patterns
    basis = patterns.reshape(2, -1)
    basis = basis / np.linalg.norm(basis, axis=1, keepdims=True)
    noise = rng.normal(0.0, 0.12, size=(n, channels * height * width))
    noise -= (noise @ basis.T) @ basis
    noise = noise.reshape(n, channels, height, width)

    images = np.clip(0.5 + amplitude * patterns[labels] + distractor + noise, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(n)
    return images[order], labels[order]


def load_dataset(name: str, split: str = "train", root: Optional[Union[str, Path]] = None) -> LabeledImageSet:
    """
    Load a labeled image dataset in raw [0, 1] pixel range

    Args:
        name: Dataset id ('cifar10', 'cifar100', 'toy2' or any registered loader)
        split: 'train' or 'val'
        root: Data root (defaults to CURDISTILL_DATA_ROOT)

    Returns:
        Validated LabeledImageSet in file order, then index order

    Raises:
        DatasetLoadError: If files are missing or the dataset is unknown
        DataCorruptionError: If a label is out of range
    """
    key = name.lower()
    if split not in ("train", "val"):
        raise ValidationError(f"split must be 'train' or 'val', got '{split}'")
    if key not in LOADERS or key not in DATASETS:
        raise DatasetLoadError(f"Dataset '{name}' not found or not available")
    entry = DATASETS[key]
    root = Path(root) if root else DATA_DIR
    logger.info(f"Loading {key}/{split} from {get_data_path(key, root) or 'generator'}")
    images, labels = LOADERS[key](split, root, entry)
    if labels.size and (labels.min() < 0 or labels.max() >= entry["class_count"]):
        raise DataCorruptionError(f"{key}/{split}: label outside [0, {entry['class_count']})")
    ds = LabeledImageSet(
        images=images,
        labels=labels,
        class_count=entry["class_count"],
        mean=tuple(entry["mean"]),
        std=tuple(entry["std"]),
        name=key,
        split=split,
    )
    logger.info(f"Loaded {key}/{split}: {len(ds)} images of shape {ds.image_shape}")
    return ds


def download_dataset(name: str, root: Optional[Union[str, Path]] = None, timeout: float = 60.0) -> Path:
    """
    Fetch and extract a dataset archive into the documented layout

    Raises:
        DatasetLoadError: If the dataset has no archive or the download fails
    """
    key = name.lower()
    entry = DATASETS.get(key)
    if entry is None or not entry.get("url"):
        raise DatasetLoadError(f"Dataset '{name}' has no downloadable archive")
    root = Path(root) if root else DATA_DIR
    target = root / entry["directory"]
    if target.exists():
        logger.info(f"{key} already present at {target}")
        return target
    root.mkdir(parents=True, exist_ok=True)
    logger.info(f"Downloading {key} from {entry['url']}")
    try:
        with requests.get(entry["url"], stream=True, timeout=timeout) as response:
            response.raise_for_status()
            with tempfile.NamedTemporaryFile(suffix=".tar.gz", dir=root, delete=False) as tmp:
                for chunk in response.iter_content(chunk_size=1 << 20):
                    tmp.write(chunk)
                archive = Path(tmp.name)
    except requests.RequestException as e:
        raise DatasetLoadError(f"Download of {key} failed: {e}", path=entry["url"])
    try:
        with tarfile.open(archive, "r:gz") as tar:
            tar.extractall(root)
    finally:
        archive.unlink(missing_ok=True)
    return target


# ---------------------------------------------------------------------------
# Class-indexed access
# ---------------------------------------------------------------------------

def class_indices(ds: LabeledImageSet, require_all: bool = True) -> Dict[int, List[int]]:
    """
    Map each class to the sorted list of its sample indices

    Raises:
        ValidationError: If require_all and a class has no sample
    """
    result = {c: [] for c in range(ds.class_count)}
    for index, label in enumerate(ds.labels.tolist()):
        result[label].append(index)
    if require_all:
        empty = [c for c, idx in result.items() if not idx]
        if empty:
            raise ValidationError(f"classes without samples: {empty}")
    return result


def subsample_per_class(ds: LabeledImageSet, n_per_class: int, rng_seed: int = 0) -> LabeledImageSet:
    """Uniformly draw n_per_class images of every class, keeping index order"""
    rng = np.random.default_rng(rng_seed)
    chosen = []
    for c, indices in class_indices(ds).items():
        if len(indices) < n_per_class:
            raise ValidationError(f"class {c} has {len(indices)} < {n_per_class} images")
        chosen.extend(rng.choice(indices, size=n_per_class, replace=False).tolist())
    return ds.subset(sorted(chosen), split=ds.split)


def random_real_subset(ds: LabeledImageSet, ipc: int, rng_seed: int = 0) -> SyntheticDataset:
    """Baseline set of ipc randomly drawn real images per class"""
    rng = np.random.default_rng(rng_seed)
    records = []
    for c, indices in class_indices(ds).items():
        if len(indices) < ipc:
            raise ValidationError(f"class {c} has {len(indices)} < {ipc} images")
        for index in rng.choice(indices, size=ipc, replace=False).tolist():
            records.append(SyntheticRecord(ds.images[index].copy(), c, int(index), 1))
    return SyntheticDataset(records, ipc, ds.class_count, ds.name).validate()


def select_records(sds: SyntheticDataset, classes: Iterable[int]) -> List[SyntheticRecord]:
    keep = set(int(c) for c in classes)
    return [r for r in sds.records if r.label in keep]


def records_to_arrays(records: Sequence[SyntheticRecord]) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([r.image for r in records]).astype(np.float32, copy=False)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# Synthetic dataset persistence
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_synthetic(sds: SyntheticDataset, directory: Union[str, Path]) -> Path:
    """
    Persist a synthetic dataset as manifest.json + images.bin (+ softlabels.bin)

    Pixels are little-endian float32, record-major, channel-height-width order.

    Returns:
        Path of the written manifest
    """
    sds.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(sds.images, dtype=_LE_FLOAT32)
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValidationError("synthetic pixels must be stored clamped to [0, 1]")
    image_shape = list(images.shape[1:])
    record_bytes = int(np.prod(image_shape)) * _LE_FLOAT32.itemsize
    blob = images.tobytes()

    manifest = {
        "format_version": SYNTHETIC_FORMAT_VERSION,
        "dataset_id": sds.dataset_id,
        "ipc": sds.ipc,
        "class_count": sds.class_count,
        "image_shape": image_shape,
        "dtype": "float32-le",
        "curricula": sds.curricula.to_json_dict() if sds.curricula else None,
        "images": {"file": IMAGES_BLOB, "bytes": len(blob), "sha256": _sha256(blob)},
        "softlabels": None,
        "records": [
            {
                "label": int(r.label),
                "seed_index": None if r.seed_index is None else int(r.seed_index),
                "curriculum_index": int(r.curriculum_index),
                "offset": i * record_bytes,
            }
            for i, r in enumerate(sds.records)
        ],
    }
    _atomic_write(directory / IMAGES_BLOB, blob)
    if sds.soft_labels is not None:
        soft_blob = np.ascontiguousarray(sds.soft_labels, dtype=_LE_FLOAT32).tobytes()
        _atomic_write(directory / SOFTLABELS_BLOB, soft_blob)
        manifest["softlabels"] = {"file": SOFTLABELS_BLOB, "bytes": len(soft_blob), "sha256": _sha256(soft_blob)}
    elif (directory / SOFTLABELS_BLOB).exists():
        (directory / SOFTLABELS_BLOB).unlink()
    manifest_path = directory / MANIFEST_NAME
    _atomic_write(manifest_path, json.dumps(manifest, indent=2).encode("utf-8"))
    logger.info(f"Saved {len(sds)} synthetic records to {directory}")
    return manifest_path


def _read_blob(directory: Path, meta: dict) -> bytes:
    path = directory / meta["file"]
    if not path.exists():
        raise DatasetLoadError(f"blob not found: {path}", path=str(path))
    data = path.read_bytes()
    if len(data) != meta["bytes"] or _sha256(data) != meta["sha256"]:
        raise DataCorruptionError(f"checksum mismatch for {path}")
    return data


def load_synthetic(directory: Union[str, Path]) -> SyntheticDataset:
    """
    Load a synthetic dataset written by save_synthetic

    Raises:
        DatasetLoadError: If the manifest or blob is missing
        DataCorruptionError: If a blob fails its checksum
        FormatError: If the manifest disagrees with the blob or the invariants
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetLoadError(f"manifest not found: {manifest_path}", path=str(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        version = manifest["format_version"]
        ipc, class_count = int(manifest["ipc"]), int(manifest["class_count"])
        image_shape = tuple(manifest["image_shape"])
        entries = manifest["records"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed manifest {manifest_path}: {e}")
    if version != SYNTHETIC_FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version}")
    if len(entries) != ipc * class_count:
        raise FormatError(f"manifest lists {len(entries)} records, expected {ipc} x {class_count}")

    blob = _read_blob(directory, manifest["images"])
    record_size = int(np.prod(image_shape))
    if len(blob) != len(entries) * record_size * _LE_FLOAT32.itemsize:
        raise FormatError("image blob size does not match manifest shape")
    images = np.frombuffer(blob, dtype=_LE_FLOAT32).reshape((len(entries),) + image_shape)

    records = []
    for i, entry in enumerate(entries):
        try:
            offset = entry["offset"]
            label, curriculum_index = int(entry["label"]), int(entry["curriculum_index"])
            seed_index = entry["seed_index"]
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise FormatError(f"malformed manifest record {i} in {manifest_path}: {e!r}")
        if offset != i * record_size * _LE_FLOAT32.itemsize:
            raise FormatError(f"record {i} offset {offset} is not record-major")
        records.append(
            SyntheticRecord(
                image=images[i].astype(np.float32),
                label=label,
                seed_index=seed_index,
                curriculum_index=curriculum_index,
            )
        )

    soft_labels = None
    if manifest.get("softlabels"):
        soft_blob = _read_blob(directory, manifest["softlabels"])
        if len(soft_blob) != len(entries) * class_count * _LE_FLOAT32.itemsize:
            raise FormatError("soft-label blob size does not match manifest")
        soft_labels = np.frombuffer(soft_blob, dtype=_LE_FLOAT32).reshape(len(entries), class_count).astype(np.float32)

    curricula = CurriculumPlan(
        ipc=manifest["curricula"]["ipc"],
        schedule=manifest["curricula"]["schedule"],
        cum_sizes=manifest["curricula"]["cum_sizes"],
    ) if manifest.get("curricula") else None
    sds = SyntheticDataset(records, ipc, class_count, manifest["dataset_id"], curricula, soft_labels)
    try:
        return sds.validate()
    except ValidationError as e:
        raise FormatError(f"{manifest_path}: {e}")
