"""Targeted universal adversarial perturbations built from targeted DeepFool steps."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .model import predict

logger = logging.getLogger(__name__)


@dataclass
class UAPConfig:
    theta: float = 0.6
    p: float = math.inf
    radius: float = 0.2
    max_passes: int = 10
    overshoot: float = 0.02
    deepfool_iters: int = 10

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.overshoot < 0:
            raise ValueError("overshoot must be non-negative")
        if self.p not in (2, math.inf):
            raise ValueError(f"unsupported norm order {self.p}; use 2 or inf")
        if self.max_passes < 0 or self.deepfool_iters < 1:
            raise ValueError("max_passes must be >= 0 and deepfool_iters >= 1")


@dataclass
class TargetedUAP:
    v: torch.Tensor
    target: int
    rate: float
    passes: int
    complete: bool
    history: list = field(default_factory=list)

    def norms(self) -> dict:
        return {"l1": self.v.abs().sum().item(), "l2": self.v.norm().item(),
                "linf": self.v.abs().max().item()}


def project(v: torch.Tensor, radius: float, p: float = math.inf) -> torch.Tensor:
    """Project ``v`` onto the l_p ball of the given radius."""
    if p == math.inf:
        return v.clamp(-radius, radius)
    if p == 2:
        n = v.norm()
        return v * (radius / n) if n > radius else v
    raise ValueError(f"unsupported norm order {p}")


def targeted_error_rate(model, images: torch.Tensor, v: torch.Tensor | None, target: int) -> float:
    """Fraction of ``clip(x + v)`` classified as ``target``."""
    x = images if v is None else (images + v).clamp(0.0, 1.0)
    return (predict(model, x) == target).float().mean().item()


def targeted_deepfool(model, x: torch.Tensor, target: int, overshoot: float = 0.02,
                      max_iter: int = 10):
    """Smallest-step linearized push of one input ``[C, H, W]`` into ``target``.

    Each step moves along ``g_t - g_k`` (difference of input gradients of the
    target and current logits) by the distance to the linearized boundary.

    :return: ``(r, converged)`` where ``r`` already includes the overshoot
        factor ``1 + overshoot``.
    """
    x0 = x.detach().unsqueeze(0)
    r_tot = torch.zeros_like(x0)
    scale = 1.0 + overshoot
    for _ in range(max_iter + 1):
        xi = (x0 + scale * r_tot).requires_grad_(True)
        logits = model(xi)[0]
        k = int(logits.argmax())
        if k == target:
            return (scale * r_tot)[0].detach(), True
        if _ == max_iter:
            break
        f = logits[target] - logits[k]
        (w,) = torch.autograd.grad(f, xi)
        wn = w.norm()
        if wn == 0 or not torch.isfinite(wn):
            break
        # DeepFool's 1e-4 pad keeps steps from landing exactly on the boundary
        step = (f.detach().abs() / wn + 1e-4) * w / wn
        r_tot = r_tot + step
    return (scale * r_tot)[0].detach(), False


def compute_targeted_uap(model, images: torch.Tensor, target: int,
                         cfg: UAPConfig | None = None) -> TargetedUAP:
    """Accumulate DeepFool steps over ``images`` into one perturbation toward ``target``.

    Passes run in the given order until the targeted rate reaches ``theta``
    or ``max_passes`` is exhausted. After every update the perturbation is
    projected back onto the configured l_p ball.
    """
    cfg = cfg or UAPConfig()
    if len(images) == 0:
        raise ValueError("calibration set is empty")
    model.eval()
    v = torch.zeros_like(images[0])
    rate = targeted_error_rate(model, images, v, target)
    history = [rate]
    passes = 0
    while rate < cfg.theta and passes < cfg.max_passes:
        for x in images:
            xv = (x + v).clamp(0.0, 1.0)
            with torch.no_grad():
                if int(model(xv.unsqueeze(0)).argmax()) == target:
                    continue
            r, _ = targeted_deepfool(model, xv, target, cfg.overshoot, cfg.deepfool_iters)
            v = project(v + r, cfg.radius, cfg.p)
        passes += 1
        rate = targeted_error_rate(model, images, v, target)
        history.append(rate)
        logger.debug("uap target %d pass %d rate %.3f", target, passes, rate)
    complete = rate >= cfg.theta
    if not complete:
        logger.warning("targeted UAP for class %d reached rate %.3f < %.2f after %d passes",
                       target, rate, cfg.theta, passes)
    return TargetedUAP(v, target, rate, passes, complete, history)


def save_uap(uap: TargetedUAP, path) -> Path:
    """Write ``<path>.pt`` and a JSON sidecar ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(uap.v.clone(), path.with_suffix(".pt"))
    meta = {"t": uap.target, "rate": uap.rate, "passes": uap.passes,
            "complete": uap.complete, "history": uap.history, "norms": uap.norms()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path.with_suffix(".pt")


def load_uap(path) -> TargetedUAP:
    path = Path(path)
    v = torch.load(path.with_suffix(".pt"), weights_only=True)
    meta = json.loads(path.with_suffix(".json").read_text())
    return TargetedUAP(v, meta["t"], meta["rate"], meta["passes"], meta["complete"],
                       meta.get("history", []))
