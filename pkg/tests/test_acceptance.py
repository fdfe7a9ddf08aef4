"""End-to-end acceptance checks on MNIST.

Trained checkpoints and UAPs are cached under ``$USBLAB_ACCEPT_DIR``
(default ``~/.cache/usblab/acceptance``) keyed by a config hash, so a re-run
only repeats the detection stages. Delete the directory for a cold run.
A cold run takes about an hour on one CPU core.
"""
import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from conftest import ACCEPTANCE_LINES, DATA_ROOT, needs_mnist
from usblab import detect as det
from usblab import harness
from usblab.harness import ExperimentConfig
from usblab.model import load_checkpoint
from usblab.detect import NormProfile, anomaly_indices, detect
from usblab.ssim import ssim
from usblab.uap import targeted_deepfool

CACHE = Path(os.environ.get("USBLAB_ACCEPT_DIR", Path.home() / ".cache" / "usblab" / "acceptance"))


def record(n: int, ok: bool, what: str):
    ACCEPTANCE_LINES.append(f"AC {n}: {'PASS' if ok else 'FAIL'}  {what}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, what


@pytest.fixture(scope="module")
def splits():
    from usblab.data import load_dataset

    return load_dataset("mnist", DATA_ROOT, "train"), load_dataset("mnist", DATA_ROOT, "test")


# --- clean and backdoored training at full length -------------------------------------------

@pytest.fixture(scope="module")
def full_pair(splits):
    cfg = ExperimentConfig(data_root=str(DATA_ROOT), out_dir=str(CACHE), n_clean=1, n_backdoored=1,
                           trigger_position="bottom-right", seed=100)
    zoo = harness.build_zoo(cfg, splits)
    return cfg, zoo


@needs_mnist
def test_ac1_clean_training(full_pair):
    cfg, zoo = full_pair
    clean = zoo[0]
    _, meta = load_checkpoint(cfg.run_dir() / clean.checkpoint)
    acc, secs = clean.metrics["accuracy"], meta["train_seconds"]
    record(1, cfg.train.epochs == 40 and acc >= 0.975 and secs <= 15 * 60,
           f"clean basic CNN, {cfg.train.epochs} epochs: test accuracy {acc:.4f} (>= 0.975), "
           f"training {secs / 60:.1f} min (<= 15)")


@needs_mnist
def test_ac2_backdoor_injection(full_pair):
    cfg, zoo = full_pair
    clean, bd = zoo
    asr, acc, ref = bd.metrics["asr"], bd.metrics["accuracy"], clean.metrics["accuracy"]
    gap = abs(acc - ref) * 100
    record(2, bd.trigger_size == 3 and cfg.poison_rate == 0.05 and asr >= 0.95 and gap <= 1.5,
           f"BadNet 3x3 at rate 0.05: ASR {asr:.4f} (>= 0.95), accuracy {acc:.4f} vs clean "
           f"{ref:.4f}, gap {gap:.2f} points (<= 1.5)")


# --- the desk zoo ---------------------------------------------------------------------------

ZOO_EPOCHS = 5


@pytest.fixture(scope="module")
def desk_zoo(splits):
    cfg = ExperimentConfig(data_root=str(DATA_ROOT), out_dir=str(CACHE), n_clean=3, n_backdoored=3,
                           seed=0, train={"epochs": ZOO_EPOCHS})
    zoo = harness.build_zoo(cfg, splits)
    assert all(e.status == "ok" for e in zoo)
    reports = harness.run_detection(zoo, "usb", cfg, splits)
    assert len(reports) == len(zoo)
    by_id = {e.model_id: e for e in zoo}
    return cfg, zoo, [(by_id[r.model_id], r) for r in reports]


@needs_mnist
def test_ac3_end_to_end_detection(desk_zoo):
    _, zoo, pairs = desk_zoo
    lines, correct, targets_ok = [], 0, True
    for e, r in pairs:
        right = r.verdict == e.condition
        correct += right
        if right and e.condition == det.BACKDOORED:
            targets_ok &= e.target in r.flagged
        lines.append(f"{e.model_id}: verdict {r.verdict} flagged {r.flagged} target {e.target}")
    print("\n".join(lines))
    seeds = {e.seed for e in zoo}
    positions = {e.trigger.position for e in zoo if e.trigger is not None}
    record(3, correct >= 5 and targets_ok and len(seeds) == 6 and len(positions) == 3,
           f"desk zoo 3 clean + 3 backdoored: {correct}/6 correct verdicts (>= 5), true target "
           f"in every correctly flagged set: {targets_ok}")


@needs_mnist
def test_ac4_norm_separation(desk_zoo):
    _, _, pairs = desk_zoo
    ratios = []
    for e, r in pairs:
        if e.condition == det.BACKDOORED and r.verdict == det.BACKDOORED:
            others = [n for c, n in enumerate(r.norms) if c != e.target]
            ratios.append(r.norms[e.target] / float(np.median(others)))
    shown = ", ".join(f"{x:.3f}" for x in ratios)
    record(4, bool(ratios) and max(ratios) <= 0.5,
           f"target norm / median of other classes on detected backdoored models: [{shown}] (<= 0.5)")


@needs_mnist
def test_ac5_uap_contract(desk_zoo):
    cfg, _, pairs = desk_zoo
    rates = [r.extra["uap"][e.target]["rate"] for e, r in pairs if e.condition == det.BACKDOORED]
    shown = ", ".join(f"{x:.3f}" for x in rates)
    record(5, len(rates) == 3 and min(rates) >= cfg.uap.theta,
           f"targeted UAP rate at the true target on calibration set: [{shown}] (>= {cfg.uap.theta})")


@needs_mnist
def test_ac9_timing_direction(desk_zoo, splits):
    cfg, _, pairs = desk_zoo
    e, _ = next((e, r) for e, r in pairs if e.condition == det.BACKDOORED)
    others = [c for c in range(10) if c != e.target]
    out = harness.bench([e], ["usb", "nc"], cfg, splits, classes=[e.target, others[0]])
    usb, nc = out["methods"]["usb"], out["methods"]["nc"]
    configured = (usb["iterations"] == 500 and usb["samples"] == 300
                  and nc["samples"] == len(splits[0]))
    record(9, configured and usb["reverse_per_class_s"] < nc["reverse_per_class_s"],
           f"per-class reverse time USB {usb['reverse_per_class_s']:.1f}s "
           f"({usb['iterations']} iterations, {usb['samples']} samples) vs NC "
           f"{nc['reverse_per_class_s']:.1f}s ({nc['samples']} samples); "
           f"UAP {usb['uap_per_class_s']:.1f}s per class reported separately")


# --- oracles --------------------------------------------------------------------------------

def test_ac6_deepfool_linear_oracle():
    errors = []
    for seed in range(10):
        g = torch.Generator().manual_seed(seed)
        lin = nn.Linear(30, 2)
        with torch.no_grad():
            lin.weight.copy_(torch.randn(2, 30, generator=g))
            lin.bias.copy_(torch.randn(2, generator=g))
        x = torch.randn(30, generator=g)
        t = 1 - int(lin(x[None]).argmax())
        w = (lin.weight[1] - lin.weight[0]).detach()
        dist = abs(float(w @ x) + (lin.bias[1] - lin.bias[0]).item()) / w.norm().item()
        for eta in (0.02, 0.1):
            r, _ = targeted_deepfool(lin, x, t, overshoot=eta, max_iter=50)
            expected = dist * (1 + eta)
            errors.append(abs(r.norm().item() - expected) / expected)
    record(6, max(errors) <= 0.05,
           f"targeted DeepFool on 10 linear binary classifiers: worst relative error "
           f"{max(errors):.2e} vs distance x (1 + eta) (<= 0.05)")


def test_ac7_ssim_suite():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    y = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    ident = abs(ssim(x, x).item() - 1)
    sym = abs(ssim(x, y).item() - ssim(y, x).item())
    c1 = 0.01 ** 2
    flat = max(abs(ssim(torch.full((1, 1, 12, 12), a, dtype=torch.float64),
                        torch.full((1, 1, 12, 12), b, dtype=torch.float64)).item()
                   - (2 * a * b + c1) / (a * a + b * b + c1))
               for a, b in [(0.2, 0.7), (0.0, 1.0), (0.5, 0.5)])
    yg = y[:1, :1].clone().requires_grad_(True)
    ssim(x[:1, :1], yg).backward()
    grad_err, h = 0.0, 1e-4
    for _ in range(10):
        i, j = torch.randint(0, 16, (2,), generator=g).tolist()
        up, dn = yg.detach().clone(), yg.detach().clone()
        up[0, 0, i, j] += h
        dn[0, 0, i, j] -= h
        fd = (ssim(x[:1, :1], up) - ssim(x[:1, :1], dn)).item() / (2 * h)
        grad_err = max(grad_err, abs(yg.grad[0, 0, i, j].item() - fd) / max(abs(fd), 1e-8))
    record(7, ident < 1e-6 and sym < 1e-6 and flat < 1e-6 and grad_err <= 1e-2,
           f"SSIM identity {ident:.1e}, symmetry {sym:.1e}, flat closed form {flat:.1e} (< 1e-6); "
           f"gradient vs finite differences {grad_err:.1e} (<= 1e-2)")


def test_ac8_mad_oracle():
    equal = anomaly_indices([7.0] * 10)
    single = [4.49, 50, 52, 54, 51, 53, 50, 52, 55, 51]  # median 51.5, MAD 1.5
    s = 1.4826 * 1.5
    single_expected = [47.01 / s, 1.5 / s, 0, 0, 0.5 / s, 0, 1.5 / s, 0, 0, 0.5 / s]
    two = [3.0, 5.0, 40, 42, 41, 43, 40, 44, 41, 42]  # median 41, MAD 1
    two_expected = [38 / 1.4826, 36 / 1.4826, 1 / 1.4826, 0, 0, 0, 1 / 1.4826, 0, 0, 0]
    err = max(float(np.max(np.abs(equal.values))),
              float(np.max(np.abs(anomaly_indices(single).values - single_expected))),
              float(np.max(np.abs(anomaly_indices(two).values - two_expected))))
    invariant = all(detect(NormProfile([lam * v for v in prof])).flagged
                    == detect(NormProfile(prof)).flagged
                    for prof in (single, two) for lam in (0.1, 10.0))
    record(8, err <= 1e-9 and invariant,
           f"MAD anomaly indices on all-equal, one-outlier and two-outlier profiles: max error "
           f"{err:.1e} (<= 1e-9); flagged set unchanged under scale 0.1 and 10: {invariant}")


# --- determinism ----------------------------------------------------------------------------

@needs_mnist
def test_ac10_determinism(tmp_path, splits):
    small = dict(data_root=str(DATA_ROOT), n_clean=1, n_backdoored=1, train_limit=3000,
                 train={"epochs": 1}, calibration_size=100, uap={"max_passes": 2},
                 reverse={"iterations": 100}, nc={"batch_size": 256}, methods=["usb", "nc"])
    dirs = []
    for name in ("first", "second"):
        cfg = ExperimentConfig.from_dict({**small, "out_dir": str(tmp_path / name)})
        zoo = harness.build_zoo(cfg, None)
        for m in cfg.methods:
            harness.run_detection(zoo, m, cfg, None)
        dirs.append(cfg.detection_dir() / "reports")
    a, b = (sorted(d.iterdir()) for d in dirs)
    same = len(a) == 4 and [p.name for p in a] == [p.name for p in b] and all(
        pa.read_bytes() == pb.read_bytes() for pa, pb in zip(a, b))
    no_timing = all("time" not in json.loads(p.read_text()) for p in a)
    record(10, same and no_timing,
           f"two runs of one config in separate directories: {len(a)} report files, "
           f"byte-identical: {same}")
