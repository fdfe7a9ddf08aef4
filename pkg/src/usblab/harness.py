"""Seeded model zoos, end-to-end detection runs, verdict summary tables and timing.

Run directory layout. The zoo directory is keyed by the training settings
only, so changing a detection setting reuses the trained models::

    <out_dir>/<run_id>/
        config.yaml  manifest.json
        checkpoints/<model_id>.ckpt
        triggers/<model_id>/true_pattern.png
        detect/<detection_id>/
            config.yaml
            uaps/<model_id>/class_<t>.{pt,json}
            triggers/<model_id>/<method>_<t>.{pt,json}   gallery PNGs next to them
            reports/<model_id>_<method>.json             deterministic content only
            timings/<model_id>_<method>.json
            summary.csv  summary.json  bench.json
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import detect as det
from .backdoor import CORNERS, TriggerSpec, attack_success_rate, poison, random_trigger, save_pattern_png
from .data import LabeledDataset, load_dataset, sample_calibration
from .model import TrainConfig, TrainingDiverged, build_basic_cnn, load_checkpoint, save_checkpoint, train
from .reverse import NCConfig, ReverseConfig, optimize_trigger, reverse_nc_baseline
from .uap import UAPConfig, compute_targeted_uap, load_uap, save_uap
from .viz import save_gallery

logger = logging.getLogger(__name__)

METHODS = ("usb", "nc")
# fields that decide which models get trained
_ZOO_FIELDS = ("dataset", "arch", "n_clean", "n_backdoored", "trigger_sizes", "poison_rate",
               "trigger_position", "seed", "train", "train_limit")
# fields that decide what detection computes on those models
_DETECTION_FIELDS = ("calibration_size", "calibration_seed", "uap", "reverse", "nc", "threshold")


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_root: str = "~/data"
    arch: str = "basic_cnn"
    n_clean: int = 3
    n_backdoored: int = 3
    trigger_sizes: list = field(default_factory=lambda: [3])
    poison_rate: float = 0.05
    # "random" (seeded per model) or a corner name
    trigger_position: str = "random"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    train_limit: int | None = None
    calibration_size: int = 300
    calibration_seed: int = 7
    uap: UAPConfig = field(default_factory=UAPConfig)
    reverse: ReverseConfig = field(default_factory=ReverseConfig)
    nc: NCConfig = field(default_factory=NCConfig)
    threshold: float = 2.0
    methods: list = field(default_factory=lambda: ["usb"])
    out_dir: str = "runs"

    def __post_init__(self):
        subs = {"train": TrainConfig, "uap": UAPConfig, "reverse": ReverseConfig, "nc": NCConfig}
        for k, typ in subs.items():
            v = getattr(self, k)
            if isinstance(v, dict):
                v = dict(v)
                if k == "uap" and isinstance(v.get("p"), str):
                    v["p"] = float(v["p"])
                setattr(self, k, typ(**v))
        if self.trigger_position != "random" and self.trigger_position not in CORNERS:
            raise ValueError(f"trigger_position must be 'random' or one of {CORNERS}")
        if self.n_clean < 0 or self.n_backdoored < 0:
            raise ValueError("zoo sizes must be non-negative")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in [0, 1]")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.arch != "basic_cnn":
            raise ValueError(f"unsupported architecture {self.arch!r}")
        self.trigger_sizes = [int(s) for s in self.trigger_sizes]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("uap",):
            if math.isinf(d[k]["p"]):
                d[k]["p"] = "inf"
        for k in ("reverse", "nc"):
            d[k]["betas"] = list(d[k]["betas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = {k: ({} if v is None and k in ("train", "uap", "reverse", "nc") else v)
             for k, v in d.items()}
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def snapshot(self) -> dict:
        """Result-relevant settings only (no filesystem locations, no method list)."""
        d = self.to_dict()
        return {k: d[k] for k in _ZOO_FIELDS + _DETECTION_FIELDS}

    @staticmethod
    def _digest(d: dict) -> str:
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def run_id(self) -> str:
        d = self.to_dict()
        return self._digest({k: d[k] for k in _ZOO_FIELDS})

    @property
    def detection_id(self) -> str:
        d = self.to_dict()
        return self._digest({k: d[k] for k in _DETECTION_FIELDS})

    def run_dir(self) -> Path:
        """Zoo directory."""
        return Path(self.out_dir).expanduser() / self.run_id

    def detection_dir(self) -> Path:
        return self.run_dir() / "detect" / self.detection_id


@dataclass
class ZooEntry:
    model_id: str
    condition: str
    seed: int
    checkpoint: str
    trigger: TriggerSpec | None = None
    metrics: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None

    def __post_init__(self):
        if (self.condition == det.BACKDOORED) != (self.trigger is not None):
            raise ValueError("backdoored entries carry a trigger, clean entries none")

    @property
    def target(self) -> int | None:
        return None if self.trigger is None else self.trigger.target

    @property
    def trigger_size(self) -> int | None:
        return None if self.trigger is None else self.trigger.height

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "condition": self.condition, "seed": self.seed,
                "checkpoint": self.checkpoint,
                "trigger": None if self.trigger is None else self.trigger.to_dict(),
                "metrics": self.metrics, "status": self.status, "error": self.error}

    @classmethod
    def from_dict(cls, d: dict) -> "ZooEntry":
        d = dict(d)
        if d.get("trigger") is not None:
            d["trigger"] = TriggerSpec.from_dict(d["trigger"])
        return cls(**d)


def plan_zoo(cfg: ExperimentConfig, input_shape, num_classes: int) -> list[ZooEntry]:
    """Deterministic model ids, seeds, targets and trigger placements; nothing is trained."""
    rng = np.random.default_rng(cfg.seed)
    # one distinct seed per model
    n_total = cfg.n_clean + cfg.n_backdoored * len(cfg.trigger_sizes)
    seeds = rng.choice(2**31 - 1, size=n_total, replace=False).tolist()
    entries = []
    for i in range(cfg.n_clean):
        mid = f"clean_{i:02d}"
        entries.append(ZooEntry(mid, det.CLEAN, int(seeds.pop(0)), f"checkpoints/{mid}.ckpt"))
    for size in cfg.trigger_sizes:
        for i in range(cfg.n_backdoored):
            mid = f"badnet{size}x{size}_{i:02d}"
            seed = int(seeds.pop(0))
            target = int(rng.integers(num_classes))
            spec = random_trigger(size, input_shape, target, seed=seed, position=cfg.trigger_position)
            entries.append(ZooEntry(mid, det.BACKDOORED, seed, f"checkpoints/{mid}.ckpt", spec))
    return entries


def _load_splits(cfg: ExperimentConfig):
    train_set = load_dataset(cfg.dataset, cfg.data_root, "train")
    test_set = load_dataset(cfg.dataset, cfg.data_root, "test")
    if cfg.train_limit:
        train_set = train_set.subset(np.arange(min(cfg.train_limit, len(train_set))))
    return train_set, test_set


def train_entry(entry: ZooEntry, cfg: ExperimentConfig, train_set: LabeledDataset,
                test_set: LabeledDataset, run_dir: Path) -> ZooEntry:
    tcfg = dataclasses.replace(cfg.train, seed=entry.seed)
    data = train_set
    if entry.trigger is not None:
        data = poison(train_set, entry.trigger, cfg.poison_rate, seed=entry.seed).dataset
    model = build_basic_cnn(train_set.num_classes, train_set.input_shape, cfg.dataset, seed=entry.seed)
    t0 = time.perf_counter()
    model, acc = train(model, data, tcfg, test_set, log_every=0)
    seconds = time.perf_counter() - t0
    entry.metrics = {"accuracy": acc}
    if entry.trigger is not None:
        entry.metrics["asr"] = attack_success_rate(model, test_set, entry.trigger)
        save_pattern_png(entry.trigger, run_dir / "triggers" / entry.model_id / "true_pattern.png")
    save_checkpoint(model, run_dir / entry.checkpoint, {
        "model_id": entry.model_id, "seed": entry.seed, "cfg": dataclasses.asdict(tcfg),
        "dataset": cfg.dataset, "metrics": entry.metrics, "condition": entry.condition,
        "train_seconds": seconds,
        "trigger": None if entry.trigger is None else entry.trigger.to_dict(),
    })
    return entry


def build_zoo(cfg: ExperimentConfig, splits=None) -> list[ZooEntry]:
    """Train (or reuse cached) clean and backdoored models and write ``manifest.json``.

    A model whose checkpoint already exists in the run directory is not
    retrained. Divergent training marks the entry failed and the zoo continues.
    """
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    if cfg.n_clean + cfg.n_backdoored == 0:
        _write_manifest(run_dir, [])
        return []
    train_set, test_set = splits or _load_splits(cfg)
    entries = plan_zoo(cfg, train_set.input_shape, train_set.num_classes)
    for e in entries:
        ckpt = run_dir / e.checkpoint
        if ckpt.is_file():
            _, meta = load_checkpoint(ckpt)
            e.metrics = meta.get("metrics", {})
            logger.info("reusing %s", ckpt)
            continue
        t0 = time.perf_counter()
        try:
            train_entry(e, cfg, train_set, test_set, run_dir)
        except TrainingDiverged as exc:
            e.status, e.error = "failed", str(exc)
            logger.error("%s: %s", e.model_id, exc)
        logger.info("trained %s in %.1fs %s", e.model_id, time.perf_counter() - t0, e.metrics)
    _write_manifest(run_dir, entries)
    return entries


def _write_manifest(run_dir: Path, entries):
    (run_dir / "manifest.json").write_text(
        json.dumps([e.to_dict() for e in entries], indent=2, sort_keys=True))


def load_manifest(run_dir) -> list[ZooEntry]:
    return [ZooEntry.from_dict(d) for d in json.loads((Path(run_dir) / "manifest.json").read_text())]


def reverse_all_classes(model, cal_images: torch.Tensor, method: str, cfg: ExperimentConfig,
                        train_images: torch.Tensor | None = None, artifact_dir: Path | None = None,
                        uap_dir: Path | None = None, classes=None):
    """Reverse-engineer one trigger per class (or per class in ``classes``).

    :return: ``(triggers, uaps, timings)``; ``uaps`` is empty for ``nc``.
        UAPs found in ``uap_dir`` are reused instead of recomputed.
    """
    classes = range(model.num_classes) if classes is None else classes
    triggers, uaps = [], []
    timings = {"uap": [], "reverse": []}
    for t in classes:
        if method == "usb":
            t0 = time.perf_counter()
            cached = uap_dir / f"class_{t}" if uap_dir is not None else None
            if cached is not None and cached.with_suffix(".pt").is_file():
                u = load_uap(cached)
                timings.setdefault("uap_cached", []).append(t)
            else:
                u = compute_targeted_uap(model, cal_images, t, cfg.uap)
                if cached is not None:
                    save_uap(u, cached)
            timings["uap"].append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            rt = optimize_trigger(model, cal_images, t, u.v, cfg.reverse)
            timings["reverse"].append(time.perf_counter() - t0)
            uaps.append(u)
        elif method == "nc":
            if train_images is None:
                raise ValueError("the nc baseline needs the training images")
            t0 = time.perf_counter()
            rt = reverse_nc_baseline(model, train_images, t, cfg.nc)
            timings["reverse"].append(time.perf_counter() - t0)
        else:
            raise ValueError(f"unknown method {method!r}")
        triggers.append(rt)
        if artifact_dir is not None:
            rt.save(artifact_dir / f"{method}_{t}")
    if artifact_dir is not None and triggers:
        save_gallery([rt.perturbation for rt in triggers], artifact_dir / f"{method}_gallery.png")
    return triggers, uaps, timings


def detect_entry(entry: ZooEntry, method: str, cfg: ExperimentConfig,
                 cal_images: torch.Tensor, train_images: torch.Tensor | None):
    model, _ = load_checkpoint(cfg.run_dir() / entry.checkpoint, arch=cfg.arch)
    out = cfg.detection_dir()
    triggers, uaps, timings = reverse_all_classes(
        model, cal_images, method, cfg, train_images,
        artifact_dir=out / "triggers" / entry.model_id,
        uap_dir=out / "uaps" / entry.model_id if method == "usb" else None,
    )
    profile = det.NormProfile([rt.l1 for rt in triggers], method, entry.model_id)
    t0 = time.perf_counter()
    report = det.detect(profile, cfg.threshold)
    det.score_outcome(report, entry.target)
    timings["detect"] = time.perf_counter() - t0
    report.config = cfg.snapshot()
    report.extra = {
        "loss_terms": [rt.loss_terms for rt in triggers],
        "metrics": entry.metrics,
    }
    if uaps:
        report.extra["uap"] = [{"rate": u.rate, "passes": u.passes, "complete": u.complete,
                                "l1": u.norms()["l1"]} for u in uaps]
    return report, timings


def run_detection(zoo: list[ZooEntry], method: str, cfg: ExperimentConfig, splits=None,
                  only=None) -> list[det.DetectionReport]:
    """Detect every zoo model with ``method`` and persist reports and timings.

    Per-model failures are logged into ``failures.json`` and skipped.

    :param only: Optional condition filter (``"clean"`` or ``"backdoored"``).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    out = cfg.detection_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    todo = [e for e in zoo if e.status == "ok" and (only is None or e.condition == only)]
    if not todo:
        return []
    train_set, _ = splits or _load_splits(cfg)
    cal = sample_calibration(train_set, cfg.calibration_size, cfg.calibration_seed)
    train_images = train_set.images if method == "nc" else None

    reports, failures = [], []
    for e in todo:
        try:
            report, timings = detect_entry(e, method, cfg, cal.images, train_images)
        except Exception as exc:  # isolate per-model failures
            logger.exception("detection failed for %s", e.model_id)
            failures.append({"model_id": e.model_id, "method": method, "error": repr(exc)})
            continue
        _write(out / "reports" / f"{e.model_id}_{method}.json", report.to_json())
        _write(out / "timings" / f"{e.model_id}_{method}.json",
               json.dumps(timings, indent=2, sort_keys=True))
        logger.info("%s %s: verdict %s flagged %s outcome %s", e.model_id, method,
                    report.verdict, report.flagged, report.outcome)
        reports.append(report)
    if failures:
        _write(out / f"failures_{method}.json", json.dumps(failures, indent=2))
    return reports


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def load_reports(detection_dir, method: str | None = None) -> list[det.DetectionReport]:
    pattern = f"*_{method}.json" if method else "*.json"
    return [det.DetectionReport.from_dict(json.loads(p.read_text()))
            for p in sorted((Path(detection_dir) / "reports").glob(pattern))]


def report_l1(report: det.DetectionReport) -> float:
    """Smallest norm among flagged classes, or the class-mean norm when nothing is flagged."""
    if report.flagged:
        return min(report.norms[c] for c in report.flagged)
    return float(np.mean(report.norms))


SUMMARY_COLUMNS = ["model", "trigger", "method", "n", "accuracy", "asr", "l1",
                   "clean", "backdoored", "correct", "correct_set", "wrong"]


def aggregate(reports: list[det.DetectionReport], zoo: list[ZooEntry] | None = None) -> list[dict]:
    """Count verdicts and target-class outcomes per (condition, trigger size, method).

    Accuracy and ASR come from the zoo metrics (or the report's copy of them).
    Target-class columns are ``"N/A"`` for clean rows.
    """
    meta = {e.model_id: e for e in zoo or []}
    groups: dict = {}
    for r in reports:
        gt = r.ground_truth or {}
        cond = gt.get("condition", det.CLEAN)
        entry = meta.get(r.model_id)
        size = entry.trigger_size if entry is not None else r.extra.get("trigger_size")
        if size is None and cond == det.BACKDOORED:
            size = _size_from_id(r.model_id)
        key = (cond, size, r.method)
        groups.setdefault(key, []).append(r)

    rows = []
    for (cond, size, method), rs in sorted(groups.items(), key=lambda kv: (kv[0][0] != det.CLEAN,
                                                                             kv[0][1] or 0, kv[0][2])):
        metrics = [(meta[r.model_id].metrics if r.model_id in meta else r.extra.get("metrics", {}))
                   for r in rs]
        accs = [m["accuracy"] for m in metrics if "accuracy" in m]
        asrs = [m["asr"] for m in metrics if "asr" in m]
        outcomes = [r.outcome for r in rs]
        na = cond == det.CLEAN
        rows.append({
            "model": cond,
            "trigger": "N/A" if size is None else f"{size}x{size}",
            "method": method,
            "n": len(rs),
            "accuracy": float(np.mean(accs)) if accs else None,
            "asr": float(np.mean(asrs)) if asrs else None,
            "l1": float(np.mean([report_l1(r) for r in rs])),
            "clean": sum(r.verdict == det.CLEAN for r in rs),
            "backdoored": sum(r.verdict == det.BACKDOORED for r in rs),
            "correct": "N/A" if na else outcomes.count(det.CORRECT),
            "correct_set": "N/A" if na else outcomes.count(det.CORRECT_SET),
            "wrong": "N/A" if na else outcomes.count(det.WRONG),
        })
    return rows


def _size_from_id(model_id: str):
    if model_id.startswith("badnet") and "x" in model_id:
        try:
            return int(model_id[len("badnet"):].split("x")[0])
        except ValueError:
            return None
    return None


def write_summary(rows: list[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "summary.csv", out_dir / "summary.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in SUMMARY_COLUMNS})
    json_path.write_text(json.dumps(rows, indent=2))
    return csv_path, json_path


def format_table(rows: list[dict]) -> str:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    table = [SUMMARY_COLUMNS] + [[fmt(r[c]) for c in SUMMARY_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(SUMMARY_COLUMNS))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in table)


def bench(zoo: list[ZooEntry], methods, cfg: ExperimentConfig, splits=None,
          classes=None, max_models: int | None = 1) -> dict:
    """Wall-clock per class and per model for each method on the same models.

    UAP generation is timed separately from the USB reverse stage because a
    UAP can be computed once and reused.

    :param classes: Subset of classes to time (default: all).
    :param max_models: Number of zoo models to time (``None`` for all).
    """
    models = [e for e in zoo if e.status == "ok"]
    if not models:
        raise ValueError("bench needs at least one trained model")
    if max_models is not None:
        models = models[:max_models]
    run_dir = cfg.run_dir()
    train_set, _ = splits or _load_splits(cfg)
    cal = sample_calibration(train_set, cfg.calibration_size, cfg.calibration_seed)

    out = {"models": [e.model_id for e in models], "methods": {}}
    for method in methods:
        per_class, per_model, uap_times = [], [], []
        for e in models:
            model, _ = load_checkpoint(run_dir / e.checkpoint, arch=cfg.arch)
            model_total = 0.0
            for t in (classes if classes is not None else range(model.num_classes)):
                if method == "usb":
                    t0 = time.perf_counter()
                    u = compute_targeted_uap(model, cal.images, t, cfg.uap)
                    uap_times.append(time.perf_counter() - t0)
                    t0 = time.perf_counter()
                    optimize_trigger(model, cal.images, t, u.v, cfg.reverse)
                else:
                    t0 = time.perf_counter()
                    reverse_nc_baseline(model, train_set.images, t, cfg.nc)
                dt = time.perf_counter() - t0
                per_class.append(dt)
                model_total += dt
            per_model.append(model_total)
        entry = {
            "reverse_per_class_s": float(np.mean(per_class)),
            "reverse_per_model_s": float(np.mean(per_model)),
            "samples": cfg.calibration_size if method == "usb" else len(train_set),
            "iterations": (cfg.reverse.iterations if method == "usb"
                           else cfg.nc.epochs * math.ceil(len(train_set) / cfg.nc.batch_size)),
            "batch_size": cfg.reverse.batch_size if method == "usb" else cfg.nc.batch_size,
        }
        if method == "usb":
            entry["uap_per_class_s"] = float(np.mean(uap_times))
            entry["total_per_class_s"] = entry["uap_per_class_s"] + entry["reverse_per_class_s"]
        out["methods"][method] = entry
    if "usb" in out["methods"] and "nc" in out["methods"]:
        out["nc_over_usb_reverse"] = (out["methods"]["nc"]["reverse_per_class_s"]
                                      / out["methods"]["usb"]["reverse_per_class_s"])
    _write(cfg.detection_dir() / "bench.json", json.dumps(out, indent=2))
    return out

