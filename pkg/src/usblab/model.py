"""The basic two-conv classifier, its training loop, and checkpoint I/O."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .data import LabeledDataset

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "usblab-checkpoint"
CHECKPOINT_VERSION = 1

# per-dataset (mean, std), applied inside the model so callers work in pixel space
NORMALIZATION = {
    "mnist": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"training loss became non-finite at epoch {epoch} (step {step})")
        self.epoch = epoch
        self.step = step


class CheckpointError(RuntimeError):
    pass


class BasicCNN(nn.Module):
    """Two conv blocks (conv, ReLU, 2x2 average pool) followed by two linear layers."""

    arch = "basic_cnn"

    def __init__(self, num_classes: int = 10, input_shape=(1, 28, 28),
                 mean=(0.1307,), std=(0.3081,)):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {num_classes}")
        c, h, w = input_shape
        flat = basic_cnn_flatten_size(input_shape)
        if flat != 512:
            raise ValueError(
                f"input shape {tuple(input_shape)} flattens to {flat} features; "
                "the basic model needs 512"
            )
        self.num_classes = num_classes
        self.input_shape = (c, h, w)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))
        self.features = nn.Sequential(
            nn.Conv2d(c, 16, 5), nn.ReLU(), nn.AvgPool2d(2, 2),
            nn.Conv2d(16, 32, 5), nn.ReLU(), nn.AvgPool2d(2, 2),
        )
        self.classifier = nn.Sequential(
            nn.Linear(512, 512), nn.ReLU(), nn.Linear(512, num_classes),
        )

    def forward(self, x):
        x = (x - self.mean) / self.std
        return self.classifier(self.features(x).flatten(1))

    @property
    def normalization(self):
        return self.mean.flatten().tolist(), self.std.flatten().tolist()


def basic_cnn_flatten_size(input_shape) -> int:
    _, h, w = input_shape
    for _ in range(2):
        h, w = (h - 4) // 2, (w - 4) // 2
    if h <= 0 or w <= 0:
        return 0
    return 32 * h * w


def build_basic_cnn(num_classes: int = 10, input_shape=(1, 28, 28), dataset: str = "mnist",
                    seed: int | None = None) -> BasicCNN:
    """Build the basic model; when ``seed`` is given, initialization is reproducible."""
    mean, std = NORMALIZATION.get(dataset, ((0.0,) * input_shape[0], (1.0,) * input_shape[0]))
    if seed is None:
        return BasicCNN(num_classes, input_shape, mean, std)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return BasicCNN(num_classes, input_shape, mean, std)


ARCHITECTURES = {BasicCNN.arch: BasicCNN}


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.01
    epochs: int = 40
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 1000) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = torch.cat([model(images[i:i + batch_size]).argmax(1)
                     for i in range(0, len(images), batch_size)])
    model.train(was_training)
    return out


def accuracy(model: nn.Module, dataset: LabeledDataset, batch_size: int = 1000) -> float:
    return (predict(model, dataset.images, batch_size) == dataset.labels).float().mean().item()


def train(model: nn.Module, dataset: LabeledDataset, cfg: TrainConfig,
          testset: LabeledDataset | None = None, log_every: int = 1):
    """Train ``model`` in place with momentum SGD.

    :param model: Classifier taking ``[B, C, H, W]`` pixels in ``[0, 1]``.
    :param dataset: Training split (possibly poisoned).
    :param cfg: Optimizer, schedule and seed.
    :param testset: Split used for the reported accuracy; defaults to ``dataset``.
    :return: ``(model, accuracy)`` where accuracy is measured on ``testset``.
    :raises TrainingDiverged: if the loss turns NaN or infinite.
    """
    if tuple(dataset.input_shape) != tuple(getattr(model, "input_shape", dataset.input_shape)):
        raise ValueError(f"dataset shape {dataset.input_shape} does not match model "
                         f"input {model.input_shape}")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    sched = None
    if cfg.cosine and cfg.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs * steps_per_epoch)

    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(dataset), generator=gen)
        total = 0.0
        for i in range(0, len(dataset), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss = F.cross_entropy(model(dataset.images[idx]), dataset.labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            total += loss.item() * len(idx)
            step += 1
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, total / len(dataset))
    model.eval()
    acc = accuracy(model, testset if testset is not None else dataset)
    return model, acc


def save_checkpoint(model: nn.Module, path, metadata: dict | None = None) -> Path:
    """Write parameters and JSON metadata into a single file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mean, std = model.normalization
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "normalization": {"mean": mean, "std": std},
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "metadata": json.dumps(metadata or {}, sort_keys=True),
    }
    torch.save(blob, path)
    return path


def load_checkpoint(path, arch: str | None = None):
    """Load a checkpoint written by :func:`save_checkpoint`.

    :param arch: Expected architecture id; a mismatch raises ``CheckpointError``.
    :return: ``(model, metadata)``; the model is in eval mode.
    """
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {blob['version']} in {path}, this library reads version "
            f"{CHECKPOINT_VERSION}"
        )
    if arch is not None and blob["arch"] != arch:
        raise CheckpointError(f"checkpoint holds architecture {blob['arch']!r}, expected {arch!r}")
    if blob["arch"] not in ARCHITECTURES:
        raise CheckpointError(f"unknown architecture {blob['arch']!r}")
    norm = blob["normalization"]
    model = ARCHITECTURES[blob["arch"]](blob["num_classes"], tuple(blob["input_shape"]),
                                        tuple(norm["mean"]), tuple(norm["std"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, json.loads(blob["metadata"])

