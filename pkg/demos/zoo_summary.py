"""A small seeded zoo, detected end to end and summarised as a table.

The same flow is available as ``usblab zoo`` followed by ``usblab detect``.
Defaults finish in under ten minutes on one CPU core::

    python demos/zoo_summary.py --epochs 4

Such short training leaves some backdoors only partly implanted and the
small calibration set makes verdicts noisier; the acceptance suite's zoo
(5 epochs, 300 calibration images, 500 iterations) is the reference setting.
"""
import argparse
import logging

from usblab import harness

parser = argparse.ArgumentParser()
parser.add_argument("--data-root", default="~/data")
parser.add_argument("--out-dir", default="demo_out/runs")
parser.add_argument("--epochs", type=int, default=4)
parser.add_argument("--train-limit", type=int, default=None, help="train on the first N images only")
parser.add_argument("--iterations", type=int, default=200)
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(name)s %(message)s")

cfg = harness.ExperimentConfig.from_dict({
    "data_root": args.data_root, "out_dir": args.out_dir,
    "n_clean": 2, "n_backdoored": 2, "train_limit": args.train_limit,
    "train": {"epochs": args.epochs}, "calibration_size": 100,
    "uap": {"max_passes": 3}, "reverse": {"iterations": args.iterations},
})
zoo = harness.build_zoo(cfg)
for e in zoo:
    print(e.model_id, e.metrics, "" if e.trigger is None else f"target {e.target}")

reports = harness.run_detection(zoo, "usb", cfg)
for r in reports:
    print(f"{r.model_id}: {r.verdict:10s} flagged {r.flagged} outcome {r.outcome}")

rows = harness.aggregate(reports, zoo)
harness.write_summary(rows, cfg.detection_dir())
print(harness.format_table(rows))
print("artifacts in", cfg.detection_dir())
