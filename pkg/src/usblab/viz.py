"""PNG export for patterns, perturbations and reversed-trigger galleries."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def _to_uint8(img, normalize: bool) -> np.ndarray:
    a = torch.as_tensor(img).detach().float().cpu().numpy()
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
        if a.shape[2] == 1:
            a = a[:, :, 0]
    if normalize:
        lo, hi = float(a.min()), float(a.max())
        a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    return (np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img, path, scale: int = 4, normalize: bool = True) -> Path:
    """Save ``[C, H, W]`` or ``[H, W]`` data; ``normalize`` applies min-max scaling."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im = Image.fromarray(_to_uint8(img, normalize))
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    im.save(path)
    return path


def save_gallery(images, path, scale: int = 4, normalize: bool = True, pad: int = 2) -> Path:
    """Lay out a sequence of same-sized images in one row."""
    tiles = [_to_uint8(im, normalize) for im in images]
    h, w = tiles[0].shape[:2]
    shape = (h, len(tiles) * (w + pad) - pad) + tiles[0].shape[2:]
    canvas = np.full(shape, 255, dtype=np.uint8)
    for i, t in enumerate(tiles):
        canvas[:, i * (w + pad):i * (w + pad) + w] = t
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im = Image.fromarray(canvas)
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    im.save(path)
    return path
