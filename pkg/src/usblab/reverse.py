"""Trigger/mask reverse engineering seeded by a targeted UAP, plus a Neural Cleanse-style baseline.

Both optimizers work on unconstrained parameters mapped into ``[0, 1]`` by
``(tanh(p) + 1) / 2``, so trigger and mask never leave the box.
"""
from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .ssim import SSIMConfig, ssim

logger = logging.getLogger(__name__)

EPS = 1e-3


class ReverseDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"reverse-engineering loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class ReverseConfig:
    iterations: int = 500
    lr: float = 0.1
    betas: tuple[float, float] = (0.5, 0.9)
    w_ce: float = 1.0
    w_ssim: float = 1.0
    # the literal weight of 1 on the summed mask L1 collapses every mask to zero on MNIST
    w_l1: float = 0.01
    mask_free: bool = False
    batch_size: int = 32

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if min(self.w_ce, self.w_ssim, self.w_l1) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class NCConfig:
    """Fixed-lambda Neural Cleanse: random init, full training data."""

    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1
    betas: tuple[float, float] = (0.5, 0.9)
    lam: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.lam < 0:
            raise ValueError(f"invalid NC config {self}")


@dataclass
class ReversedTrigger:
    trigger: torch.Tensor
    mask: torch.Tensor
    target: int
    method: str
    loss_terms: dict
    iterations: int
    history: list = field(default_factory=list, repr=False)
    degenerate_init: bool = False
    initial: tuple | None = field(default=None, repr=False)

    @property
    def perturbation(self) -> torch.Tensor:
        return self.trigger * self.mask

    @property
    def l1(self) -> float:
        return self.perturbation.abs().sum().item()

    def stamp(self, x: torch.Tensor) -> torch.Tensor:
        return stamp(x, self.trigger, self.mask)

    def to_dict(self) -> dict:
        return {"t": self.target, "l1": self.l1, "method": self.method,
                "loss_terms": self.loss_terms, "iterations": self.iterations,
                "degenerate_init": self.degenerate_init}

    def save(self, path) -> Path:
        """Write ``<path>.pt`` (trigger, mask) and ``<path>.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"trigger": self.trigger.clone(), "mask": self.mask.clone()},
                   path.with_suffix(".pt"))
        path.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path.with_suffix(".pt")

    @classmethod
    def load(cls, path) -> "ReversedTrigger":
        path = Path(path)
        tensors = torch.load(path.with_suffix(".pt"), weights_only=True)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(tensors["trigger"], tensors["mask"], meta["t"], meta["method"],
                   meta["loss_terms"], meta["iterations"],
                   degenerate_init=meta.get("degenerate_init", False))

    def save_pngs(self, prefix):
        from .viz import save_png

        prefix = Path(prefix)
        save_png(self.trigger, prefix.with_name(prefix.name + "_trigger.png"), normalize=False)
        save_png(self.mask, prefix.with_name(prefix.name + "_mask.png"), normalize=False)
        save_png(self.perturbation, prefix.with_name(prefix.name + "_v.png"), normalize=False)


def to_box(p: torch.Tensor) -> torch.Tensor:
    return (torch.tanh(p) + 1.0) / 2.0


def from_box(v: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return torch.atanh(2.0 * v.clamp(eps, 1.0 - eps) - 1.0)


def stamp(x: torch.Tensor, trigger: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x * (1.0 - mask) + trigger * mask


def factorize_uap(v: torch.Tensor, eps: float = EPS):
    """Split a perturbation ``[C, H, W]`` into ``(trigger, mask, degenerate)``.

    The mask is the per-pixel channel-max magnitude scaled by its global max
    and clamped to ``[eps, 1 - eps]``; the trigger is ``v / mask`` clamped to
    ``[0, 1]``, so ``trigger * mask`` recovers the positive part of ``v``.
    """
    if not torch.isfinite(v).all():
        raise ValueError("perturbation contains non-finite values")
    mag = v.abs().amax(dim=0)
    peak = mag.max()
    if peak == 0:
        return torch.zeros_like(v), torch.full_like(mag, eps), True
    mask = (mag / peak).clamp(eps, 1.0 - eps)
    trigger = (v / mask).clamp(0.0, 1.0)
    return trigger, mask, False


def usb_loss_terms(model, x, target: int, trigger, mask, cfg: ReverseConfig,
                   ssim_cfg: SSIMConfig = SSIMConfig()) -> dict:
    """Cross-entropy to ``target``, SSIM to the clean batch, mask L1, and their weighted total."""
    xs = stamp(x, trigger, mask)
    labels = torch.full((len(x),), target, dtype=torch.long)
    ce = F.cross_entropy(model(xs), labels)
    sim = ssim(x, xs, ssim_cfg)
    l1 = mask.abs().sum()
    total = cfg.w_ce * ce - cfg.w_ssim * sim
    if not cfg.mask_free:
        total = total + cfg.w_l1 * l1
    return {"ce": ce, "ssim": sim, "l1_mask": l1, "total": total}


def _batches(n: int, size: int):
    while True:
        for i in range(0, n, size):
            yield slice(i, min(i + size, n))


@contextmanager
def _frozen(model):
    """Eval mode with parameter gradients off; restores both on exit."""
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)


def optimize_trigger(model, images: torch.Tensor, target: int, v: torch.Tensor | None = None,
                     cfg: ReverseConfig | None = None) -> ReversedTrigger:
    """Refine a targeted UAP into a trigger and mask by Adam on the combined loss.

    Batches are taken from ``images`` in order, cycling, with the last
    partial batch kept.

    :param v: Initial perturbation ``[C, H, W]``; ``None`` means zero.
    :raises ReverseDiverged: if the loss becomes non-finite.
    """
    cfg = cfg or ReverseConfig()
    if len(images) == 0:
        raise ValueError("calibration set is empty")
    if v is None:
        v = torch.zeros_like(images[0])
    trig0, mask0, degenerate = factorize_uap(v)
    p_trig = from_box(trig0).requires_grad_(True)
    p_mask = from_box(mask0).requires_grad_(True)
    opt = torch.optim.Adam([p_trig, p_mask], lr=cfg.lr, betas=cfg.betas)

    history = []
    batches = _batches(len(images), cfg.batch_size)
    with _frozen(model):
        for it in range(cfg.iterations):
            x = images[next(batches)]
            terms = usb_loss_terms(model, x, target, to_box(p_trig), to_box(p_mask), cfg)
            if not torch.isfinite(terms["total"]):
                raise ReverseDiverged(it)
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            history.append({k: t.item() for k, t in terms.items()})

        trigger, mask = to_box(p_trig).detach(), to_box(p_mask).detach()
        with torch.no_grad():
            final = usb_loss_terms(model, images, target, trigger, mask, cfg)
    return ReversedTrigger(trigger, mask, target, "usb", {k: t.item() for k, t in final.items()},
                           cfg.iterations, history, degenerate)


def nc_loss_terms(model, x, target: int, pattern, mask, lam: float) -> dict:
    xs = stamp(x, pattern, mask)
    labels = torch.full((len(x),), target, dtype=torch.long)
    ce = F.cross_entropy(model(xs), labels)
    l1 = mask.abs().sum()
    return {"ce": ce, "l1_mask": l1, "total": ce + lam * l1}


def reverse_nc_baseline(model, images: torch.Tensor, target: int,
                        cfg: NCConfig | None = None) -> ReversedTrigger:
    """Simplified Neural Cleanse over the full training images with a fixed lambda.

    Pattern and mask start from seeded uniform noise; the data order is a
    seeded shuffle per epoch.
    """
    cfg = cfg or NCConfig()
    c, h, w = images.shape[1:]
    rng = np.random.default_rng([cfg.seed, target])
    pattern0 = torch.from_numpy(rng.uniform(0, 1, (c, h, w)).astype(np.float32))
    mask0 = torch.from_numpy(rng.uniform(0, 1, (h, w)).astype(np.float32))
    p_pat = from_box(pattern0).requires_grad_(True)
    p_mask = from_box(mask0).requires_grad_(True)
    initial = (to_box(p_pat).detach(), to_box(p_mask).detach())
    opt = torch.optim.Adam([p_pat, p_mask], lr=cfg.lr, betas=cfg.betas)
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))

    history = []
    it = 0
    with _frozen(model):
        for _ in range(cfg.epochs):
            perm = torch.randperm(len(images), generator=gen)
            for i in range(0, len(images), cfg.batch_size):
                x = images[perm[i:i + cfg.batch_size]]
                terms = nc_loss_terms(model, x, target, to_box(p_pat), to_box(p_mask), cfg.lam)
                if not torch.isfinite(terms["total"]):
                    raise ReverseDiverged(it)
                opt.zero_grad()
                terms["total"].backward()
                opt.step()
                history.append({k: t.item() for k, t in terms.items()})
                it += 1

    pattern, mask = to_box(p_pat).detach(), to_box(p_mask).detach()
    final = dict(history[-1]) if history else {}
    return ReversedTrigger(pattern, mask, target, "nc", final, it, history, initial=initial)


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    if "betas" in d:
        d["betas"] = list(d["betas"])
    return d
