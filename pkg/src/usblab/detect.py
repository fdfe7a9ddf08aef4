"""Turn per-class reversed-trigger norms into a verdict and a set of suspected targets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CONSISTENCY = 1.4826

CLEAN, BACKDOORED = "clean", "backdoored"
CORRECT, CORRECT_SET, WRONG, MISSED, NA = "Correct", "CorrectSet", "Wrong", "Missed", "N/A"


@dataclass
class NormProfile:
    norms: list
    method: str = "usb"
    model_id: str = ""

    def __post_init__(self):
        self.norms = [float(x) for x in self.norms]
        if any(x < 0 or not np.isfinite(x) for x in self.norms):
            raise ValueError("norms must be finite and non-negative")


@dataclass
class AnomalyIndices:
    values: np.ndarray
    median: float
    mad: float
    degenerate: bool


def anomaly_indices(profile: NormProfile | list) -> AnomalyIndices:
    """One-sided MAD anomaly index per class.

    ``index_c = max(median - l1_c, 0) / (1.4826 * MAD)``; classes at or above
    the median score 0. A zero MAD yields all-zero indices with the
    ``degenerate`` flag set.
    """
    norms = np.asarray(profile.norms if isinstance(profile, NormProfile) else profile, dtype=float)
    if len(norms) < 3:
        raise ValueError(f"need at least 3 classes, got {len(norms)}")
    med = float(np.median(norms))
    mad = float(np.median(np.abs(norms - med)))
    if mad == 0:
        return AnomalyIndices(np.zeros_like(norms), med, mad, True)
    idx = np.maximum(med - norms, 0.0) / (CONSISTENCY * mad)
    return AnomalyIndices(idx, med, mad, False)


@dataclass
class DetectionReport:
    model_id: str
    method: str
    norms: list
    anomaly: list
    flagged: list
    verdict: str
    threshold: float
    degenerate: bool = False
    outcome: str | None = None
    ground_truth: dict | None = None
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id, "method": self.method,
            "norms": [float(x) for x in self.norms],
            "anomaly": [float(x) for x in self.anomaly],
            "flagged": [int(c) for c in self.flagged], "verdict": self.verdict,
            "threshold": self.threshold, "degenerate": self.degenerate,
            "outcome": self.outcome, "ground_truth": self.ground_truth,
            "config": self.config, "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def detect(profile: NormProfile, threshold: float = 2.0) -> DetectionReport:
    """Flag classes whose anomaly index exceeds ``threshold``."""
    a = anomaly_indices(profile)
    flagged = [int(c) for c in np.flatnonzero(a.values > threshold)]
    return DetectionReport(
        model_id=profile.model_id, method=profile.method, norms=list(profile.norms),
        anomaly=a.values.tolist(), flagged=flagged,
        verdict=BACKDOORED if flagged else CLEAN, threshold=threshold, degenerate=a.degenerate,
    )


def score_outcome(report: DetectionReport, target: int | None) -> str:
    """Target-class outcome against ground truth; ``target=None`` means the model is clean.

    Also stores the label and ground truth on ``report``.
    """
    flagged = set(report.flagged)
    if target is None:
        outcome = NA
    elif flagged == {target}:
        outcome = CORRECT
    elif target in flagged:
        outcome = CORRECT_SET
    elif flagged:
        outcome = WRONG
    else:
        outcome = MISSED
    report.outcome = outcome
    report.ground_truth = ({"condition": CLEAN} if target is None
                           else {"condition": BACKDOORED, "target": int(target)})
    return outcome
