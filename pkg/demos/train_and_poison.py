"""Train a clean and a BadNet-poisoned basic CNN on MNIST and compare them.

Run from the repository root::

    python demos/train_and_poison.py --data-root ~/data --epochs 3

Writes ``demo_out/clean.ckpt``, ``demo_out/badnet.ckpt`` and a PNG of a
stamped test digit.
"""
import argparse
import logging
from pathlib import Path

from usblab.backdoor import apply_trigger, attack_success_rate, poison, random_trigger
from usblab.data import load_dataset
from usblab.model import TrainConfig, build_basic_cnn, save_checkpoint, train
from usblab.viz import save_png

parser = argparse.ArgumentParser()
parser.add_argument("--data-root", default="~/data")
parser.add_argument("--epochs", type=int, default=3)
parser.add_argument("--out", default="demo_out")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(args.out)

train_set = load_dataset("mnist", args.data_root, "train")
test_set = load_dataset("mnist", args.data_root, "test")
cfg = TrainConfig(epochs=args.epochs, seed=0)

# A clean reference model.
clean = build_basic_cnn(10, train_set.input_shape, "mnist", seed=0)
clean, clean_acc = train(clean, train_set, cfg, test_set)
save_checkpoint(clean, out / "clean.ckpt", {"accuracy": clean_acc})
print(f"clean accuracy {clean_acc:.4f}")

# A 3x3 patch of random bright pixels in the bottom-right corner,
# relabelling 5% of the training set to class 7.
spec = random_trigger(3, train_set.input_shape, target=7, seed=1, position="bottom-right")
poisoned = poison(train_set, spec, rate=0.05, seed=1)
print(f"poisoned {len(poisoned.indices)} of {len(train_set)} training images, patch at {spec.position}")

bd = build_basic_cnn(10, train_set.input_shape, "mnist", seed=1)
bd, bd_acc = train(bd, poisoned.dataset, cfg, test_set)
asr = attack_success_rate(bd, test_set, spec)
save_checkpoint(bd, out / "badnet.ckpt", {"accuracy": bd_acc, "asr": asr, "trigger": spec.to_dict()})
print(f"backdoored accuracy {bd_acc:.4f}, attack success rate {asr:.4f}")

# The clean model ignores the patch; the backdoored one does not.
print(f"clean model on stamped inputs: {attack_success_rate(clean, test_set, spec):.4f}")
save_png(apply_trigger(test_set.images[0], spec), out / "stamped_digit.png", scale=8, normalize=False)
