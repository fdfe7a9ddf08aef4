"""BadNet-style patch triggers: stamping, poisoning and attack success rate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import LabeledDataset
from .model import predict

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass
class TriggerSpec:
    """A rectangular patch stamped into images.

    ``position`` is either a ``(row, col)`` anchor of the patch's top-left
    pixel or one of :data:`CORNERS`, resolved with a one-pixel margin.
    """

    height: int
    width: int
    pattern: torch.Tensor
    target: int
    position: tuple[int, int] | str = "bottom-right"
    alpha: float = 1.0

    def __post_init__(self):
        self.pattern = torch.as_tensor(self.pattern, dtype=torch.float32)
        if self.pattern.ndim != 3 or tuple(self.pattern.shape[1:]) != (self.height, self.width):
            raise ValueError(f"pattern must be [C, {self.height}, {self.width}], "
                             f"got {tuple(self.pattern.shape)}")
        if self.pattern.min() < 0 or self.pattern.max() > 1:
            raise ValueError("pattern values must lie in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if isinstance(self.position, str):
            if self.position not in CORNERS:
                raise ValueError(f"unknown corner {self.position!r}")
        else:
            self.position = tuple(int(p) for p in self.position)

    def anchor(self, image_hw) -> tuple[int, int]:
        h, w = image_hw
        if isinstance(self.position, str):
            top = self.position.startswith("top")
            left = self.position.endswith("left")
            row = 1 if top else h - 1 - self.height
            col = 1 if left else w - 1 - self.width
        else:
            row, col = self.position
        if row < 0 or col < 0 or row + self.height > h or col + self.width > w:
            raise ValueError(f"{self.height}x{self.width} patch at ({row}, {col}) "
                             f"does not fit a {h}x{w} image")
        return row, col

    def mask(self, image_shape) -> torch.Tensor:
        """Binary ``[H, W]`` mask of the patch region."""
        _, h, w = image_shape
        row, col = self.anchor((h, w))
        m = torch.zeros(h, w)
        m[row:row + self.height, col:col + self.width] = 1.0
        return m

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "position": list(self.position) if not isinstance(self.position, str) else self.position,
            "pattern": self.pattern.tolist(),
            "alpha": self.alpha,
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        pos = d.get("position", "bottom-right")
        return cls(
            height=d["height"], width=d["width"], pattern=torch.tensor(d["pattern"]),
            target=d["target"], position=pos if isinstance(pos, str) else tuple(pos),
            alpha=d.get("alpha", 1.0),
        )


def random_trigger(size: int, image_shape, target: int, seed: int,
                   position: str | tuple[int, int] = "random", low: float = 0.5) -> TriggerSpec:
    """Square trigger with a seeded random pattern.

    Pattern values are uniform in ``[low, 1]`` so the patch stays visible on
    dark backgrounds. ``position="random"`` picks a seeded anchor anywhere in
    the image, keeping a one-pixel margin.
    """
    c, h, w = image_shape
    rng = np.random.default_rng(seed)
    pattern = rng.uniform(low, 1.0, size=(c, size, size)).astype(np.float32)
    if position == "random":
        position = (int(rng.integers(1, h - size)), int(rng.integers(1, w - size)))
    return TriggerSpec(size, size, torch.from_numpy(pattern), target, position)


def apply_trigger(x: torch.Tensor, spec: TriggerSpec) -> torch.Tensor:
    """Stamp the trigger into one image ``[C, H, W]`` or a batch ``[B, C, H, W]``.

    Inside the patch the result is ``(1 - alpha) * x + alpha * pattern``;
    outside it ``x`` is returned untouched.
    """
    row, col = spec.anchor(x.shape[-2:])
    if spec.pattern.shape[0] not in (1, x.shape[-3]):
        raise ValueError(f"pattern has {spec.pattern.shape[0]} channels, image has {x.shape[-3]}")
    out = x.clone()
    region = out[..., row:row + spec.height, col:col + spec.width]
    region.mul_(1.0 - spec.alpha).add_(spec.alpha * spec.pattern.to(x.dtype))
    return out


@dataclass
class PoisonedDataset:
    base: LabeledDataset
    spec: TriggerSpec
    rate: float
    indices: np.ndarray
    dataset: LabeledDataset

    def __len__(self):
        return len(self.dataset)


def poison_count(rate: float, k: int) -> int:
    # half-up rounding; Python's round() would send 0.5 to the even neighbour
    return int(np.floor(rate * k + 0.5))


def poison(dataset: LabeledDataset, spec: TriggerSpec, rate: float, seed: int = 0) -> PoisonedDataset:
    """Stamp and relabel ``round(rate * K)`` seeded-random samples to the target class."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"poison rate must lie in [0, 1], got {rate}")
    if not 0 <= spec.target < dataset.num_classes:
        raise ValueError(f"target {spec.target} outside [0, {dataset.num_classes})")
    spec.anchor(dataset.images.shape[-2:])
    k = len(dataset)
    n = poison_count(rate, k)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(k, size=n, replace=False)).astype(np.int64)
    images = dataset.images.clone()
    labels = dataset.labels.clone()
    if n:
        t = torch.from_numpy(idx)
        images[t] = apply_trigger(images[t], spec)
        labels[t] = spec.target
    out = LabeledDataset(images, labels, dataset.num_classes, f"{dataset.name}+badnet")
    return PoisonedDataset(dataset, spec, rate, idx, out)


def attack_success_rate(model, testset: LabeledDataset, spec: TriggerSpec,
                        batch_size: int = 1000) -> float:
    """Fraction of stamped test samples, excluding those labelled ``target``, predicted as ``target``."""
    keep = testset.labels != spec.target
    if not keep.any():
        raise ValueError("no test samples outside the target class")
    stamped = apply_trigger(testset.images[keep], spec)
    return (predict(model, stamped, batch_size) == spec.target).float().mean().item()


def save_pattern_png(spec: TriggerSpec, path, scale: int = 8):
    from .viz import save_png

    return save_png(spec.pattern, path, scale=scale, normalize=False)
