"""Reverse-engineer a trigger per class and run the MAD outlier test.

Optionally also runs the mask-optimization baseline for comparison::

    python demos/reverse_and_detect.py --checkpoint demo_out/badnet.ckpt --baseline
"""
import argparse
import time
from pathlib import Path

from usblab.data import load_dataset, sample_calibration
from usblab.detect import NormProfile, detect, score_outcome
from usblab.model import load_checkpoint
from usblab.reverse import NCConfig, ReverseConfig, optimize_trigger, reverse_nc_baseline
from usblab.uap import UAPConfig, compute_targeted_uap
from usblab.viz import save_gallery

parser = argparse.ArgumentParser()
parser.add_argument("--checkpoint", default="demo_out/badnet.ckpt")
parser.add_argument("--data-root", default="~/data")
parser.add_argument("--n", type=int, default=300)
parser.add_argument("--iterations", type=int, default=500)
parser.add_argument("--baseline", action="store_true")
args = parser.parse_args()

model, meta = load_checkpoint(args.checkpoint)
train_set = load_dataset("mnist", args.data_root, "train")
cal = sample_calibration(train_set, args.n, seed=7)
target = meta["trigger"]["target"] if "trigger" in meta else None
out = Path(args.checkpoint).with_name("reversed")

# Each class starts from its targeted UAP, split into a pattern and a mask,
# then both are refined on the calibration images.
triggers, t0 = [], time.perf_counter()
for t in range(model.num_classes):
    u = compute_targeted_uap(model, cal.images, t, UAPConfig())
    rt = optimize_trigger(model, cal.images, t, u.v, ReverseConfig(iterations=args.iterations))
    rt.save_pngs(out / f"usb_{t}")
    triggers.append(rt)
    print(f"class {t}: l1 {rt.l1:7.2f}  ce {rt.loss_terms['ce']:.3f}  ssim {rt.loss_terms['ssim']:.3f}")
print(f"reverse engineering took {time.perf_counter() - t0:.0f}s")
save_gallery([rt.perturbation for rt in triggers], out / "usb_gallery.png")

report = detect(NormProfile([rt.l1 for rt in triggers], "usb", args.checkpoint))
score_outcome(report, target)
print("anomaly index:", " ".join(f"{a:.2f}" for a in report.anomaly))
print(f"verdict {report.verdict}, flagged {report.flagged}, outcome {report.outcome}")

if args.baseline:
    # the baseline optimizes a mask from random init over the whole training set
    t0 = time.perf_counter()
    nc = [reverse_nc_baseline(model, train_set.images, t, NCConfig()) for t in range(model.num_classes)]
    rep = detect(NormProfile([rt.l1 for rt in nc], "nc", args.checkpoint))
    print(f"baseline: {time.perf_counter() - t0:.0f}s, flagged {rep.flagged}, "
          f"norms {[round(rt.l1, 1) for rt in nc]}")
