"""
Detection metrics: accuracy, TPR, TNR, EER and HTER, the ROC sweep behind
them, and EER threshold calibration.

Label 1 (fake) is the positive class and a sample is called fake iff its
score is >= tau, the same inclusive rule ``heads.predict`` uses.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import roc_curve

from errors import ContractError, InvalidValueError
from heads import ThresholdPolicy

logger = logging.getLogger(__name__)

UPPER_SENTINEL = 1.0 + 1e-6


@dataclass
class ScoreSet:
    """Scores in [0, 1] with their 0/1 labels and method/source tags."""

    scores: np.ndarray
    labels: np.ndarray
    methods: list = None
    sources: list = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ContractError(f"{self.scores.size} scores but {self.labels.size} labels")
        if not np.all(np.isfinite(self.scores)):
            raise InvalidValueError("scores contain non-finite values")
        if self.scores.size and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ContractError("scores must lie in [0, 1]")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ContractError("labels must be 0 or 1")
        count = self.scores.size
        self.methods = list(self.methods) if self.methods is not None else ["unknown"] * count
        self.sources = list(self.sources) if self.sources is not None else ["unknown"] * count
        if len(self.methods) != count or len(self.sources) != count:
            raise ContractError("method and source tags must match the number of scores")

    def __len__(self):
        return int(self.scores.size)

    @property
    def positives(self):
        return int(self.labels.sum())

    @property
    def negatives(self):
        return len(self) - self.positives

    def require_both_classes(self):
        if self.positives == 0 or self.negatives == 0:
            raise ContractError(
                f"need both classes, got {self.positives} fake and {self.negatives} real scores"
            )


@dataclass
class RocCurve:
    """Ascending thresholds with the rates at each (label 1 iff score >= threshold)."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    false_positives: np.ndarray
    true_positives: np.ndarray
    positives: int
    negatives: int

    def __len__(self):
        return int(self.thresholds.size)

    def points(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def roc(scores):
    """ROC over every distinct score plus the sentinels 0 and 1 + 1e-6."""
    scores.require_both_classes()
    fpr, tpr, thresholds = roc_curve(scores.labels, scores.scores, drop_intermediate=False)
    # sklearn sweeps downward from +inf; flip to ascending and pin the sentinels
    thresholds, fpr, tpr = thresholds[::-1].copy(), fpr[::-1].copy(), tpr[::-1].copy()
    thresholds[-1] = UPPER_SENTINEL
    if thresholds[0] > 0.0:
        thresholds = np.concatenate([[0.0], thresholds])
        fpr = np.concatenate([[1.0], fpr])
        tpr = np.concatenate([[1.0], tpr])
    positives, negatives = scores.positives, scores.negatives
    return RocCurve(
        thresholds=thresholds,
        fpr=fpr,
        tpr=tpr,
        false_positives=np.rint(fpr * negatives).astype(np.int64),
        true_positives=np.rint(tpr * positives).astype(np.int64),
        positives=positives,
        negatives=negatives,
    )


def eer(scores):
    """(equal error rate, threshold) as fractions.

    The sweep stops at the first threshold where FNR >= FPR. An exact tie gives
    that rate, with tau halfway back to the previous threshold; otherwise both
    rate and threshold are interpolated linearly between the two ROC points.
    """
    curve = roc(scores)
    positives, negatives = curve.positives, curve.negatives
    # sign of fnr - fpr from integer counts, so exact crossings are detected exactly
    gap = (positives - curve.true_positives) * negatives - curve.false_positives * positives
    i = int(np.argmax(gap >= 0))
    fnr = 1.0 - curve.tpr
    if gap[i] == 0:
        rate = curve.false_positives[i] / negatives
        tau = 0.5 * (curve.thresholds[i - 1] + curve.thresholds[i])
        return float(rate), float(tau)
    before = fnr[i - 1] - curve.fpr[i - 1]
    after = fnr[i] - curve.fpr[i]
    w = -before / (after - before)
    rate = curve.fpr[i - 1] + w * (curve.fpr[i] - curve.fpr[i - 1])
    tau = curve.thresholds[i - 1] + w * (curve.thresholds[i] - curve.thresholds[i - 1])
    return float(rate), float(tau)


@dataclass
class MetricReport:
    """Rates in percent at threshold ``tau``, with per-method and per-source accuracy."""

    accuracy: float
    tpr: float
    tnr: float
    eer: float
    hter: float
    tau: float
    count: int
    per_method: dict = field(default_factory=dict)
    per_source: dict = field(default_factory=dict)
    eer_tau: float = None
    policy: str = "fixed_half"
    split: str = None

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "tpr": self.tpr,
            "tnr": self.tnr,
            "eer": self.eer,
            "hter": self.hter,
            "tau": self.tau,
            "eer_tau": self.eer_tau,
            "count": self.count,
            "policy": self.policy,
            "split": self.split,
            "per_method": self.per_method,
            "per_source": self.per_source,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        lines = [
            f"split: {self.split or '-'}",
            f"policy: {self.policy}",
            f"tau: {self.tau:.4f}",
            f"samples: {self.count}",
            f"accuracy: {self.accuracy:.2f}",
            f"tpr: {self.tpr:.2f}",
            f"tnr: {self.tnr:.2f}",
            f"eer: {self.eer:.2f}",
            f"hter: {self.hter:.2f}",
        ]
        for title, table in (("method", self.per_method), ("source", self.per_source)):
            lines.append("")
            lines.append(f"{title:<16}{'count':>8}{'accuracy':>10}")
            for tag in sorted(table):
                row = table[tag]
                lines.append(f"{tag:<16}{row['count']:>8}{row['accuracy']:>10.2f}")
        return "\n".join(lines) + "\n"


def _breakdown(tags, correct):
    table = {}
    tags = np.asarray(tags, dtype=object)
    for tag in sorted(set(tags.tolist())):
        hits = correct[tags == tag]
        table[tag] = {"count": int(hits.size), "accuracy": 100.0 * float(hits.mean())}
    return table


def resolve_tau(policy):
    if isinstance(policy, ThresholdPolicy):
        return policy.resolve(), policy.kind, policy.split
    return float(policy), "fixed", None


def evaluate(scores, policy, split=None):
    """Confusion-matrix metrics at the policy's tau plus the set's own EER."""
    tau, kind, provenance = resolve_tau(policy)
    scores.require_both_classes()
    called_fake = scores.scores >= tau
    truth = scores.labels == 1
    correct = called_fake == truth
    tpr = float(called_fake[truth].mean())
    tnr = float((~called_fake[~truth]).mean())
    rate, eer_tau = eer(scores)
    report = MetricReport(
        accuracy=100.0 * float(correct.mean()),
        tpr=100.0 * tpr,
        tnr=100.0 * tnr,
        eer=100.0 * rate,
        hter=100.0 * ((1.0 - tnr) + (1.0 - tpr)) / 2.0,
        tau=float(tau),
        count=len(scores),
        per_method=_breakdown(scores.methods, correct),
        per_source=_breakdown(scores.sources, correct),
        eer_tau=eer_tau,
        policy=kind,
        split=split,
    )
    logger.info(
        "evaluated %d scores at tau=%.4f: accuracy %.2f, eer %.2f",
        report.count, report.tau, report.accuracy, report.eer,
    )
    return report


def calibrate(scores, split="val"):
    """validation_eer policy whose tau is the EER threshold of ``scores``.

    A crossing past the top score interpolates toward the upper sentinel; any tau
    between the top score and 1 makes the same calls, so it is pulled back below 1.
    A top score of exactly 1 is then called fake, since no tau inside (0, 1) exceeds it.
    """
    rate, tau = eer(scores)
    if tau >= 1.0:
        tau = 0.5 * (float(scores.scores.max()) + 1.0)
        if tau >= 1.0:
            tau = float(np.nextafter(1.0, 0.0))
    logger.info("calibrated on %s: tau=%.4f (eer %.2f%%)", split, tau, 100.0 * rate)
    return ThresholdPolicy("validation_eer", tau, split)
