import os
from pathlib import Path
from typing import Optional

# Local data paths - override with CURDISTILL_DATA_ROOT / CURDISTILL_RUNS_ROOT
BASE_DIR = Path(__file__).parent
DATA_DIR = Path(os.getenv("CURDISTILL_DATA_ROOT", str(BASE_DIR / "data")))
RUNS_DIR = Path(os.getenv("CURDISTILL_RUNS_ROOT", "runs"))

# Runtime settings
DEFAULT_DEVICE = os.getenv("CURDISTILL_DEVICE", "cpu")
LOG_LEVEL = os.getenv("CURDISTILL_LOG_LEVEL", "INFO")
SHOW_PROGRESS = os.getenv("CURDISTILL_PROGRESS", "1") != "0"

# On-disk formats
SYNTHETIC_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
IMAGES_BLOB = "images.bin"
SOFTLABELS_BLOB = "softlabels.bin"
CHECKPOINT_HEADER = "checkpoint.json"
CHECKPOINT_BLOB = "weights.bin"

# Network settings
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DEFAULT_WIDTH = 128
EVAL_BATCH_SIZE = 256
ADV_PROB_CEILING = 1.0 - 1e-6

# Dataset registry. Layouts follow the python-pickle CIFAR archives.
DATASETS = {
    "cifar10": {
        "directory": "cifar-10-batches-py",
        "url": "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",
        "train_files": [f"data_batch_{i}" for i in range(1, 6)],
        "val_files": ["test_batch"],
        "label_key": b"labels",
        "class_count": 10,
        "shape": (3, 32, 32),
        "mean": (0.4914, 0.4822, 0.4465),
        "std": (0.2470, 0.2435, 0.2616),
    },
    "cifar100": {
        "directory": "cifar-100-python",
        "url": "https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz",
        "train_files": ["train"],
        "val_files": ["test"],
        "label_key": b"fine_labels",
        "class_count": 100,
        "shape": (3, 32, 32),
        "mean": (0.5071, 0.4865, 0.4409),
        "std": (0.2673, 0.2564, 0.2762),
    },
    "toy2": {
        "directory": None,
        "url": None,
        "class_count": 2,
        "shape": (3, 16, 16),
        "train_per_class": 100,
        "val_per_class": 50,
        "mean": (0.5, 0.5, 0.5),
        "std": (0.25, 0.25, 0.25),
    },
}

# Data synthesis presets, one row per hyper-parameter table entry
SYNTHESIS_PRESETS = {
    "cifar10": {
        "optimizer": "adam",
        "momentum": [0.5, 0.9],
        "weight_decay": 1e-4,
        "lr_schedule": "cosine",
        "augmentation": "random_resized_crop",
        "alpha_adv": 1.0,
        "alpha_reg": 1.0,
        "learning_rate": 0.25,
        "batch_size": 10,
        "iteration": 1000,
    },
    "cifar100": {
        "optimizer": "adam",
        "momentum": [0.5, 0.9],
        "weight_decay": 1e-4,
        "lr_schedule": "cosine",
        "augmentation": "random_resized_crop",
        "alpha_adv": 1.0,
        "alpha_reg": 1.0,
        "learning_rate": 0.25,
        "batch_size": 100,
        "iteration": 1000,
    },
    "toy2": {
        "optimizer": "adam",
        "momentum": [0.5, 0.9],
        "weight_decay": 1e-4,
        "lr_schedule": "cosine",
        "augmentation": "random_resized_crop",
        "alpha_adv": 1.0,
        "alpha_reg": 1.0,
        "learning_rate": 0.05,
        "batch_size": 10,
        "iteration": 100,
    },
}

# Downstream (student / evaluation) training presets
EVALUATION_PRESETS = {
    "cifar10": {
        "optimizer": "adamw",
        "momentum": [0.9, 0.999],
        "learning_rate": 1e-3,
        "weight_decay": 1e-2,
        "lr_schedule": "cosine",
        "augmentation": "random_resized_crop",
        "batch_size": 16,
        "epoch": 1000,
    },
    "cifar100": {
        "optimizer": "adamw",
        "momentum": [0.9, 0.999],
        "learning_rate": 1e-3,
        "weight_decay": 1e-2,
        "lr_schedule": "cosine",
        "augmentation": "random_resized_crop",
        "batch_size": 64,
        "epoch": 1000,
    },
    "toy2": {
        "optimizer": "adamw",
        "momentum": [0.9, 0.999],
        "learning_rate": 2e-3,
        "weight_decay": 1e-2,
        "lr_schedule": "cosine",
        "augmentation": "random_resized_crop",
        "batch_size": 16,
        "epoch": 100,
    },
}


# Teacher pre-training on the full training split (hard labels)
TEACHER_PRESETS = {
    "cifar10": {
        "optimizer": "sgd",
        "momentum": 0.9,
        "learning_rate": 0.1,
        "weight_decay": 5e-4,
        "lr_schedule": "cosine",
        "augmentation": "random_resized_crop",
        "batch_size": 128,
        "epoch": 200,
        "crop_scale": [0.35, 1.0],
    },
    "cifar100": {
        "optimizer": "sgd",
        "momentum": 0.9,
        "learning_rate": 0.1,
        "weight_decay": 5e-4,
        "lr_schedule": "cosine",
        "augmentation": "random_resized_crop",
        "batch_size": 128,
        "epoch": 200,
        "crop_scale": [0.35, 1.0],
    },
    "toy2": {
        "optimizer": "adamw",
        "momentum": [0.9, 0.999],
        "learning_rate": 1e-3,
        "weight_decay": 1e-2,
        "lr_schedule": "cosine",
        "augmentation": "none",
        "batch_size": 32,
        "epoch": 40,
    },
}


def get_data_path(dataset_name: str, root: Optional[Path] = None) -> Optional[Path]:
    """Get the on-disk directory of a dataset, or None for generated fixtures"""
    entry = DATASETS.get(dataset_name.lower())
    if entry is None or entry["directory"] is None:
        return None
    return Path(root or DATA_DIR) / entry["directory"]


def is_dataset_available(dataset_name: str, root: Optional[Path] = None) -> bool:
    """Check if dataset is available locally"""
    entry = DATASETS.get(dataset_name.lower())
    if entry is None:
        return False
    if entry["directory"] is None:
        return True
    path = get_data_path(dataset_name, root)
    return path is not None and path.exists()
