"""Command line entry point: ``usblab <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (YAML) plus flags that override
the corresponding :class:`~usblab.harness.ExperimentConfig` fields.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import harness
from .backdoor import TriggerSpec, attack_success_rate, poison, random_trigger, save_pattern_png
from .data import sample_calibration
from .detect import NormProfile, detect
from .model import build_basic_cnn, load_checkpoint, save_checkpoint, train
from .uap import compute_targeted_uap, save_uap
from .viz import save_gallery, save_png

logger = logging.getLogger("usblab")


def _config(args) -> harness.ExperimentConfig:
    d = {}
    if getattr(args, "config", None):
        d = harness.ExperimentConfig.load(args.config).to_dict()
    top = {"dataset", "data_root", "n_clean", "n_backdoored", "poison_rate", "trigger_position", "seed",
           "train_limit", "calibration_size", "calibration_seed", "threshold", "out_dir"}
    for k in top:
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    if getattr(args, "trigger_sizes", None):
        d["trigger_sizes"] = args.trigger_sizes
    if getattr(args, "methods", None):
        d["methods"] = args.methods
    for sub, keys in {"train": ("epochs", "batch_size", "lr"),
                      "uap": ("theta", "radius", "max_passes"),
                      "reverse": ("iterations",)}.items():
        for k in keys:
            v = getattr(args, k, None)
            if v is not None:
                d.setdefault(sub, {})
                if not isinstance(d[sub], dict):
                    d[sub] = dataclasses.asdict(d[sub])
                d[sub][k] = v
    return harness.ExperimentConfig.from_dict(d)


def _add_common(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--dataset")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-limit", dest="train_limit", type=int)


def _add_zoo(p):
    p.add_argument("--n-clean", dest="n_clean", type=int)
    p.add_argument("--n-backdoored", dest="n_backdoored", type=int)
    p.add_argument("--trigger-sizes", dest="trigger_sizes", type=int, nargs="+")
    p.add_argument("--poison-rate", dest="poison_rate", type=float)
    p.add_argument("--trigger-position", dest="trigger_position",
                   help="'random' (seeded per model) or a corner name")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)


def _add_detect(p):
    p.add_argument("--calibration-size", dest="calibration_size", type=int)
    p.add_argument("--calibration-seed", dest="calibration_seed", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--radius", type=float)
    p.add_argument("--max-passes", dest="max_passes", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--methods", nargs="+", choices=harness.METHODS)


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set, test_set = harness._load_splits(cfg)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    data, spec = train_set, None
    if args.trigger:
        spec = TriggerSpec.from_dict(json.loads(Path(args.trigger).read_text()))
        data = poison(train_set, spec, cfg.poison_rate, seed=cfg.seed).dataset
    model = build_basic_cnn(train_set.num_classes, train_set.input_shape, cfg.dataset, seed=cfg.seed)
    model, acc = train(model, data, tcfg, test_set)
    metrics = {"accuracy": acc}
    if spec is not None:
        metrics["asr"] = attack_success_rate(model, test_set, spec)
    save_checkpoint(model, args.out, {"seed": cfg.seed, "cfg": dataclasses.asdict(tcfg),
                                      "dataset": cfg.dataset, "metrics": metrics,
                                      "trigger": None if spec is None else spec.to_dict()})
    print(json.dumps(metrics))
    return 0


def cmd_poison(args) -> int:
    cfg = _config(args)
    train_set, _ = harness._load_splits(cfg)
    position = args.position
    if position not in ("random", "top-left", "top-right", "bottom-left", "bottom-right"):
        position = tuple(int(x) for x in position.split(","))
    spec = random_trigger(args.size, train_set.input_shape, args.target, cfg.seed, position)
    pd = poison(train_set, spec, cfg.poison_rate, seed=cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(spec.to_dict(), indent=2))
    save_pattern_png(spec, out.with_suffix(".png"))
    save_png(pd.dataset.images[pd.indices[0]] if len(pd.indices) else spec.pattern,
             out.with_name(out.stem + "_example.png"))
    print(json.dumps({"trigger": str(out), "poisoned": len(pd.indices), "total": len(train_set)}))
    return 0


def cmd_zoo(args) -> int:
    cfg = _config(args)
    zoo = harness.build_zoo(cfg)
    print(cfg.run_dir())
    for e in zoo:
        print(e.model_id, e.status, json.dumps(e.metrics))
    return int(any(e.status != "ok" for e in zoo))


def _classes(args, n):
    return args.targets if args.targets else list(range(n))


def cmd_uap(args) -> int:
    cfg = _config(args)
    model, _ = load_checkpoint(args.checkpoint)
    train_set, _ = harness._load_splits(cfg)
    cal = sample_calibration(train_set, cfg.calibration_size, cfg.calibration_seed)
    out = Path(args.out)
    for t in _classes(args, model.num_classes):
        u = compute_targeted_uap(model, cal.images, t, cfg.uap)
        save_uap(u, out / f"class_{t}")
        save_png(u.v, out / f"class_{t}.png")
        print(json.dumps({"t": t, "rate": u.rate, "passes": u.passes, **u.norms()}))
    return 0


def cmd_reverse(args) -> int:
    cfg = _config(args)
    model, _ = load_checkpoint(args.checkpoint)
    train_set, _ = harness._load_splits(cfg)
    cal = sample_calibration(train_set, cfg.calibration_size, cfg.calibration_seed)
    out = Path(args.out)
    classes = _classes(args, model.num_classes)
    triggers, _, timings = harness.reverse_all_classes(
        model, cal.images, args.method, cfg, train_set.images, artifact_dir=out,
        uap_dir=out / "uaps" if args.method == "usb" else None, classes=classes)
    for rt, dt in zip(triggers, timings["reverse"]):
        rt.save_pngs(out / f"{args.method}_{rt.target}")
        print(json.dumps({**rt.to_dict(), "seconds": dt}))
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args)
    if args.checkpoint:
        model, meta = load_checkpoint(args.checkpoint)
        train_set, _ = harness._load_splits(cfg)
        cal = sample_calibration(train_set, cfg.calibration_size, cfg.calibration_seed)
        for method in cfg.methods:
            triggers, _, _ = harness.reverse_all_classes(model, cal.images, method, cfg,
                                                         train_set.images)
            rep = detect(NormProfile([rt.l1 for rt in triggers], method, str(args.checkpoint)),
                         cfg.threshold)
            if args.out:
                save_gallery([rt.perturbation for rt in triggers],
                             Path(args.out) / f"{method}_gallery.png")
                harness._write(Path(args.out) / f"report_{method}.json", rep.to_json())
            print(rep.to_json())
        return 0
    run_dir = cfg.run_dir()
    zoo = harness.load_manifest(run_dir) if (run_dir / "manifest.json").is_file() else harness.build_zoo(cfg)
    failed = any(e.status != "ok" for e in zoo)
    for method in cfg.methods:
        reports = harness.run_detection(zoo, method, cfg)
        failed |= len(reports) < sum(e.status == "ok" for e in zoo)
    rows = harness.aggregate(harness.load_reports(cfg.detection_dir()), zoo)
    harness.write_summary(rows, cfg.detection_dir())
    print(cfg.detection_dir())
    print(harness.format_table(rows))
    return int(failed)


def cmd_bench(args) -> int:
    cfg = _config(args)
    run_dir = cfg.run_dir()
    zoo = harness.load_manifest(run_dir) if (run_dir / "manifest.json").is_file() else harness.build_zoo(cfg)
    out = harness.bench(zoo, cfg.methods, cfg, classes=args.targets, max_models=args.max_models)
    print(json.dumps(out, indent=2))
    return 0


def cmd_report(args) -> int:
    det_dir = Path(args.detection_dir) if args.detection_dir else _config(args).detection_dir()
    zoo_dir = det_dir.parent.parent
    zoo = harness.load_manifest(zoo_dir) if (zoo_dir / "manifest.json").is_file() else None
    rows = harness.aggregate(harness.load_reports(det_dir), zoo)
    harness.write_summary(rows, det_dir)
    print(harness.format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usblab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=1, help="torch CPU threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one clean or backdoored model")
    _add_common(p)
    _add_zoo(p)
    p.add_argument("--trigger", help="TriggerSpec JSON; poisons the training set when given")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("poison", help="create a random patch trigger and report poisoning stats")
    _add_common(p)
    p.add_argument("--size", type=int, default=3)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--position", default="bottom-right", help="corner name, 'random' or 'row,col'")
    p.add_argument("--poison-rate", dest="poison_rate", type=float)
    p.add_argument("--out", required=True, help="TriggerSpec JSON path")
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("zoo", help="train the seeded clean/backdoored model zoo")
    _add_common(p)
    _add_zoo(p)
    p.set_defaults(func=cmd_zoo)

    for name, func, help_ in (("uap", cmd_uap, "targeted UAPs for one checkpoint"),
                              ("reverse", cmd_reverse, "reverse-engineer triggers for one checkpoint")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        _add_detect(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--targets", type=int, nargs="+")
        p.add_argument("--out", required=True, help="output directory")
        if name == "reverse":
            p.add_argument("--method", choices=harness.METHODS, default="usb")
        p.set_defaults(func=func)

    p = sub.add_parser("detect", help="detect one checkpoint, or every model of a zoo")
    _add_common(p)
    _add_zoo(p)
    _add_detect(p)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="time USB against the NC baseline")
    _add_common(p)
    _add_zoo(p)
    _add_detect(p)
    p.add_argument("--targets", type=int, nargs="+")
    p.add_argument("--max-models", dest="max_models", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="aggregate saved reports into summary tables")
    _add_common(p)
    _add_zoo(p)
    _add_detect(p)
    p.add_argument("--detection-dir", dest="detection_dir",
                   help="a <run>/detect/<id> directory (default: derived from the config)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except Exception as exc:
        logger.error("%s", exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
