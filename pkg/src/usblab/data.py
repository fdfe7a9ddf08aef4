"""Dataset ingestion and calibration sampling.

Images are held as float32 tensors in ``[0, 1]`` with layout ``[K, C, H, W]``;
any normalization lives inside the model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

# name -> (num_classes, (C, H, W), {split: size})
DATASETS = {
    "mnist": (10, (1, 28, 28), {"train": 60000, "test": 10000}),
    "cifar10": (10, (3, 32, 32), {"train": 50000, "test": 10000}),
}

_LAYOUT = {
    "mnist": (
        "MNIST/raw/",
        ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
         "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"],
    ),
    "cifar10": (
        "cifar-10-batches-py/",
        ["data_batch_1", "data_batch_2", "data_batch_3", "data_batch_4",
         "data_batch_5", "test_batch"],
    ),
}


class DatasetError(RuntimeError):
    pass


@dataclass
class LabeledDataset:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    name: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [K, C, H, W], got {tuple(self.images.shape)}")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


@dataclass
class CalibrationSet:
    """Small clean sample handed to the detector."""

    images: torch.Tensor
    labels: torch.Tensor
    source: str
    indices: np.ndarray

    def __len__(self):
        return len(self.labels)


def _check_layout(name: str, root: Path):
    subdir, files = _LAYOUT[name]
    missing = [f for f in files if not (root / subdir / f).is_file()]
    if missing:
        raise DatasetError(
            f"{name} not found under {root}: missing {', '.join(missing)}. "
            f"Expected layout: {root}/{subdir}{{{','.join(files)}}}"
        )


def load_dataset(name: str, root, split: str = "train") -> LabeledDataset:
    """Load one split of a supported dataset from local files.

    Nothing is downloaded. MNIST expects the raw IDX files under
    ``<root>/MNIST/raw/``; CIFAR-10 expects the python pickles under
    ``<root>/cifar-10-batches-py/``.

    :param name: ``"mnist"`` or ``"cifar10"``.
    :param root: Directory containing the dataset layout.
    :param split: ``"train"`` or ``"test"``.
    :return: The split in file order, pixels scaled to ``[0, 1]``.
    """
    name = name.lower()
    if name not in DATASETS:
        raise DatasetError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    if split not in ("train", "test"):
        raise DatasetError(f"unknown split {split!r}")
    root = Path(root).expanduser()
    _check_layout(name, root)

    from torchvision import datasets

    train = split == "train"
    try:
        if name == "mnist":
            ds = datasets.MNIST(str(root), train=train, download=False)
            raw = ds.data.numpy()[:, None, :, :]
        else:
            ds = datasets.CIFAR10(str(root), train=train, download=False)
            raw = ds.data.transpose(0, 3, 1, 2)
        labels = np.asarray(ds.targets, dtype=np.int64)
    except Exception as exc:  # torchvision raises a mix of types on corrupt files
        raise DatasetError(f"failed to read {name} {split} from {root}: {exc}") from exc

    num_classes, shape, sizes = DATASETS[name]
    if raw.shape[1:] != shape or len(raw) != sizes[split]:
        raise DatasetError(
            f"{name} {split} has shape {raw.shape}, expected {(sizes[split],) + shape}"
        )
    images = torch.from_numpy(np.ascontiguousarray(raw)).float().div_(255.0)
    return LabeledDataset(images, torch.from_numpy(labels), num_classes, name)


def sample_calibration(dataset: LabeledDataset, n: int = 300, seed: int = 0) -> CalibrationSet:
    """Draw ``n`` samples without replacement, stratified per class when ``n >= N``.

    Per-class quotas are ``n // N`` with the remainder spread over classes in
    a seeded order; a class too small for its quota hands the shortfall to
    the others. The returned order is a seeded shuffle of the selection.
    """
    k = len(dataset)
    if n > k:
        raise ValueError(f"cannot draw {n} samples from a dataset of {k}")
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    labels = dataset.labels.numpy()
    n_cls = dataset.num_classes

    if n < n_cls:
        chosen = rng.choice(k, size=n, replace=False)
    else:
        pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(n_cls)]
        quota = np.full(n_cls, n // n_cls)
        quota[rng.permutation(n_cls)[: n % n_cls]] += 1
        avail = np.array([len(p) for p in pools])
        # redistribute quota from under-populated classes
        while np.any(quota > avail):
            excess = int(np.sum(np.maximum(quota - avail, 0)))
            quota = np.minimum(quota, avail)
            for c in rng.permutation(np.flatnonzero(quota < avail)):
                if excess == 0:
                    break
                take = min(excess, avail[c] - quota[c])
                quota[c] += take
                excess -= take
        chosen = np.concatenate([p[:q] for p, q in zip(pools, quota)])
        chosen = rng.permutation(chosen)

    idx = torch.from_numpy(chosen.astype(np.int64))
    return CalibrationSet(
        images=dataset.images[idx].clone(),
        labels=dataset.labels[idx].clone(),
        source=dataset.name,
        indices=chosen.astype(np.int64),
    )
