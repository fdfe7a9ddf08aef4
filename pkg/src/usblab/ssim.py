"""Differentiable windowed SSIM with a Gaussian window."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def gaussian_kernel_1d(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def gaussian_window(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    g = gaussian_kernel_1d(size, sigma, dtype)
    return torch.outer(g, g)


def ssim(x: torch.Tensor, y: torch.Tensor, cfg: SSIMConfig = SSIMConfig()) -> torch.Tensor:
    """Mean SSIM over valid windows, channels and batch of ``[B, C, H, W]`` inputs."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    c, h, w = x.shape[1:]
    if h < cfg.window or w < cfg.window:
        raise ValueError(f"image {h}x{w} is smaller than the {cfg.window}x{cfg.window} window")
    # the Gaussian window is separable: filter rows then columns, all five maps in one pass
    g = gaussian_kernel_1d(cfg.window, cfg.sigma, x.dtype).to(x.device)
    stacked = torch.cat([x, y, x * x, y * y, x * y], dim=1)
    k = 5 * c
    out = F.conv2d(stacked, g.view(1, 1, 1, -1).expand(k, 1, 1, cfg.window), groups=k)
    out = F.conv2d(out, g.view(1, 1, -1, 1).expand(k, 1, cfg.window, 1), groups=k)
    mu_x, mu_y, exx, eyy, exy = out.split(c, dim=1)
    sxx = exx - mu_x ** 2
    syy = eyy - mu_y ** 2
    sxy = exy - mu_x * mu_y
    c1, c2 = cfg.c1, cfg.c2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return (num / den).mean()
