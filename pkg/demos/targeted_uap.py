"""Targeted universal perturbations for every class of one model.

Uses the checkpoint from ``train_and_poison.py``. The backdoor target needs
a much smaller perturbation than the other classes::

    python demos/targeted_uap.py --checkpoint demo_out/badnet.ckpt
"""
import argparse
from pathlib import Path

from usblab.data import load_dataset, sample_calibration
from usblab.model import load_checkpoint
from usblab.uap import UAPConfig, compute_targeted_uap, targeted_error_rate
from usblab.viz import save_gallery

parser = argparse.ArgumentParser()
parser.add_argument("--checkpoint", default="demo_out/badnet.ckpt")
parser.add_argument("--data-root", default="~/data")
parser.add_argument("--n", type=int, default=100, help="calibration images")
parser.add_argument("--passes", type=int, default=3)
args = parser.parse_args()

model, meta = load_checkpoint(args.checkpoint)
cal = sample_calibration(load_dataset("mnist", args.data_root, "train"), args.n, seed=7)
cfg = UAPConfig(max_passes=args.passes)
if "trigger" in meta:
    print(f"true backdoor target: {meta['trigger']['target']}")

uaps = []
for t in range(model.num_classes):
    u = compute_targeted_uap(model, cal.images, t, cfg)
    uaps.append(u.v)
    norms = u.norms()
    print(f"class {t}: rate {u.rate:.2f} after {u.passes} passes, "
          f"l1 {norms['l1']:7.2f}, linf {norms['linf']:.3f}")

# a perturbation found on the calibration set transfers to unseen images
test = load_dataset("mnist", args.data_root, "test")
target = min(range(len(uaps)), key=lambda t: uaps[t].abs().sum().item())
print(f"smallest UAP is class {target}; rate on 2000 test images "
      f"{targeted_error_rate(model, test.images[:2000], uaps[target], target):.2f}")
save_gallery(uaps, Path(args.checkpoint).with_name("uap_gallery.png"))
