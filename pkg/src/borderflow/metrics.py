"""Detection and segmentation metrics.

Ranking metrics treat outliers as the positive class and assume higher
scores mean more outlier-like. Thresholding uses >= semantics over the
unique score values; tied scores share one threshold. Entries labelled
ignore are dropped before anything is counted. All accumulation over
per-threshold terms uses exact summation so results are independent of
evaluation order and bit-identical to definition-level re-computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INLIER = 0
OUTLIER = 1
IGNORE = -1


@dataclass
class ScoreSet:
    """Paired (score, label) samples; labels in {INLIER, OUTLIER, IGNORE}."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must have equal length")
        known = np.isin(self.labels, (INLIER, OUTLIER, IGNORE))
        if not known.all():
            raise ValueError("labels must be inlier (0), outlier (1) or ignore (-1)")

    def valid(self) -> tuple[np.ndarray, np.ndarray]:
        keep = self.labels != IGNORE
        return self.scores[keep], self.labels[keep]

    def _ranking_valid(self) -> tuple[np.ndarray, np.ndarray]:
        scores, labels = self.valid()
        if not np.any(labels == OUTLIER):
            raise ValueError("ranking metrics need at least one outlier")
        if not np.any(labels == INLIER):
            raise ValueError("ranking metrics need at least one inlier")
        return scores, labels


def from_inliers_outliers(inlier_scores, outlier_scores) -> ScoreSet:
    scores = np.concatenate([np.asarray(inlier_scores, np.float64).reshape(-1),
                             np.asarray(outlier_scores, np.float64).reshape(-1)])
    labels = np.concatenate([np.full(np.size(inlier_scores), INLIER),
                             np.full(np.size(outlier_scores), OUTLIER)])
    return ScoreSet(scores, labels)


def _threshold_counts(scores: np.ndarray, labels: np.ndarray):
    """tp/fp counts at each unique descending threshold (>= semantics)."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ends = np.nonzero(np.append(np.diff(s) != 0, True))[0]
    cum_tp = np.cumsum(y == OUTLIER)
    cum_fp = np.cumsum(y == INLIER)
    return s[ends], cum_tp[ends], cum_fp[ends]


def auroc(score_set: ScoreSet) -> float:
    """P(outlier score > inlier score) + half credit for ties."""
    scores, labels = score_set._ranking_valid()
    neg = np.sort(scores[labels == INLIER])
    pos = scores[labels == OUTLIER]
    lo = np.searchsorted(neg, pos, side="left")
    hi = np.searchsorted(neg, pos, side="right")
    greater = int(lo.sum())
    equal = int((hi - lo).sum())
    return (greater + 0.5 * equal) / (len(pos) * len(neg))


def average_precision(score_set: ScoreSet) -> float:
    """Recall-weighted precision over descending unique thresholds."""
    scores, labels = score_set.valid()
    n_pos = int((labels == OUTLIER).sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one outlier")
    _, tp, fp = _threshold_counts(scores, labels)
    terms = []
    prev = 0
    for tp_k, fp_k in zip(tp.tolist(), fp.tolist()):
        if tp_k != prev:
            terms.append(((tp_k - prev) / n_pos) * (tp_k / (tp_k + fp_k)))
        prev = tp_k
    return math.fsum(terms)


def fpr_at_tpr(score_set: ScoreSet, tpr_target: float) -> float:
    """Minimum FPR among thresholds reaching the requested TPR."""
    if not (0.0 < tpr_target <= 1.0):
        raise ValueError("tpr_target must lie in (0, 1]")
    scores, labels = score_set._ranking_valid()
    n_pos = int((labels == OUTLIER).sum())
    n_neg = int((labels == INLIER).sum())
    _, tp, fp = _threshold_counts(scores, labels)
    best = None
    for tp_k, fp_k in zip(tp.tolist(), fp.tolist()):
        if tp_k / n_pos >= tpr_target:
            rate = fp_k / n_neg
            if best is None or rate < best:
                best = rate
    return best  # the lowest threshold always reaches TPR = 1


def tnr_at_tpr(score_set: ScoreSet, tpr_target: float) -> float:
    return 1.0 - fpr_at_tpr(score_set, tpr_target)


def detection_accuracy(score_set: ScoreSet) -> float:
    """Balanced accuracy at the best threshold, including reject-all."""
    scores, labels = score_set._ranking_valid()
    n_pos = int((labels == OUTLIER).sum())
    n_neg = int((labels == INLIER).sum())
    _, tp, fp = _threshold_counts(scores, labels)
    best = 0.5  # threshold above every score: TPR 0, TNR 1
    for tp_k, fp_k in zip(tp.tolist(), fp.tolist()):
        acc = 0.5 * (tp_k / n_pos + (n_neg - fp_k) / n_neg)
        if acc > best:
            best = acc
    return best


def per_image_mean_ap(score_sets: list[ScoreSet]) -> float:
    """Unweighted mean of per-image average precision; images without
    outlier pixels are skipped."""
    aps = []
    for s in score_sets:
        _, labels = s.valid()
        if np.any(labels == OUTLIER):
            aps.append(average_precision(s))
    if not aps:
        raise ValueError("no image has outlier pixels")
    return math.fsum(aps) / len(aps)


class ConfusionAccumulator:
    """Per-class intersection / union / pixel counts; merge is elementwise."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.pixel_count = np.zeros(num_classes, dtype=np.int64)

    def update(self, prediction: np.ndarray, target: np.ndarray, ignore_label: int = 255) -> None:
        pred = np.asarray(prediction).reshape(-1)
        tgt = np.asarray(target).reshape(-1)
        if pred.shape != tgt.shape:
            raise ValueError("prediction and target shapes differ")
        keep = tgt != ignore_label
        pred = pred[keep]
        tgt = tgt[keep]
        if np.any((pred < 0) | (pred >= self.num_classes)) or np.any((tgt < 0) | (tgt >= self.num_classes)):
            raise ValueError("class index out of range")
        c = self.num_classes
        cm = np.bincount(tgt * c + pred, minlength=c * c).reshape(c, c)
        diag = np.diag(cm)
        self.intersection += diag
        self.union += cm.sum(axis=0) + cm.sum(axis=1) - diag
        self.pixel_count += cm.sum(axis=1)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        out = ConfusionAccumulator(self.num_classes)
        out.intersection = self.intersection + other.intersection
        out.union = self.union + other.union
        out.pixel_count = self.pixel_count + other.pixel_count
        return out


def miou(acc: ConfusionAccumulator) -> float:
    """Mean IoU over classes that appear in prediction or ground truth."""
    present = acc.union > 0
    if not present.any():
        raise ValueError("no class has non-zero union")
    ious = [int(i) / int(u) for i, u in zip(acc.intersection[present], acc.union[present])]
    return math.fsum(ious) / len(ious)


# -- report -------------------------------------------------------------------

REPORT_FIELDS = ("auroc", "ap", "fpr95", "tnr95", "det_acc", "miou", "per_image_ap", "accuracy")


def ranking_metrics(score_set: ScoreSet, tpr_target: float = 0.95) -> dict[str, float]:
    return {
        "auroc": auroc(score_set),
        "ap": average_precision(score_set),
        "fpr95": fpr_at_tpr(score_set, tpr_target),
        "tnr95": tnr_at_tpr(score_set, tpr_target),
        "det_acc": detection_accuracy(score_set),
    }


def format_report(blocks: dict[str, dict[str, float]]) -> str:
    lines = ["# metrics report"]
    for name, fields in blocks.items():
        lines.append("")
        lines.append(f"[{name}]")
        for key, value in fields.items():
            if key not in REPORT_FIELDS:
                raise ValueError(f"unknown report field {key!r}")
            lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, dict[str, float]]:
    blocks: dict[str, dict[str, float]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            blocks[current] = {}
            continue
        key, _, value = line.partition("=")
        if current is None or not _:
            raise ValueError(f"malformed report line: {raw!r}")
        blocks[current][key.strip()] = float(value.strip())
    return blocks
