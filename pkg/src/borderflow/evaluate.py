"""Evaluation protocols reused by the CLI and the experiment scripts."""

from __future__ import annotations

import numpy as np

from . import metrics
from .classifier import (SCORING_FUNCTIONS, predict_logits, softmax_with_temperature)
from .data import IGNORE_LABEL


def _block_name(scoring: str, temperature: float) -> str:
    return f"{scoring} T={temperature:g}"


def evaluate_imagewide(model, points_in: np.ndarray, labels_in: np.ndarray,
                       points_out: np.ndarray, temperatures, scorings) -> dict:
    """One ranking-metric block per (scoring, temperature) pair, plus the
    closed-set accuracy on the inlier split."""
    logits_in = predict_logits(model, points_in)
    logits_out = predict_logits(model, points_out)
    blocks: dict[str, dict[str, float]] = {}
    for scoring in scorings:
        score_fn = SCORING_FUNCTIONS[scoring]
        for t in temperatures:
            s_in = score_fn(softmax_with_temperature(logits_in, t))
            s_out = score_fn(softmax_with_temperature(logits_out, t))
            score_set = metrics.from_inliers_outliers(s_in, s_out)
            blocks[_block_name(scoring, t)] = metrics.ranking_metrics(score_set)
    pred = np.argmax(logits_in, axis=1)
    blocks["classification"] = {"accuracy": float(np.mean(pred == labels_in))}
    return blocks


def dense_score_sets(score_maps: np.ndarray, labels: np.ndarray, masks: np.ndarray):
    """Flattened ScoreSet over all pixels plus one ScoreSet per image.

    Mask 1 marks outlier pixels; unmasked ignore-labelled pixels drop out.
    """
    per_image = []
    flat_scores = []
    flat_labels = []
    for i in range(score_maps.shape[0]):
        s = score_maps[i].reshape(-1)
        m = masks[i].reshape(-1)
        y = labels[i].reshape(-1)
        lab = np.where(m == 1, metrics.OUTLIER,
                       np.where(y == IGNORE_LABEL, metrics.IGNORE, metrics.INLIER))
        per_image.append(metrics.ScoreSet(s, lab))
        flat_scores.append(s)
        flat_labels.append(lab)
    pooled = metrics.ScoreSet(np.concatenate(flat_scores), np.concatenate(flat_labels))
    return pooled, per_image


def evaluate_dense(model, images: np.ndarray, labels: np.ndarray, masks: np.ndarray,
                   temperatures, scorings) -> tuple[dict, dict]:
    """Detection blocks per (scoring, temperature) pair plus segmentation
    accuracy over inlier pixels. Also returns the per-pair score maps so
    callers can export exactly what was measured."""
    logits = predict_logits(model, images)
    blocks: dict[str, dict[str, float]] = {}
    maps: dict[str, np.ndarray] = {}
    for scoring in scorings:
        score_fn = SCORING_FUNCTIONS[scoring]
        for t in temperatures:
            posterior = softmax_with_temperature(logits, t)
            score_map = score_fn(posterior)
            pooled, per_image = dense_score_sets(score_map, labels, masks)
            fields = metrics.ranking_metrics(pooled)
            fields["per_image_ap"] = metrics.per_image_mean_ap(per_image)
            name = _block_name(scoring, t)
            blocks[name] = fields
            maps[name] = score_map
    pred = np.argmax(logits, axis=1)
    acc = metrics.ConfusionAccumulator(model.num_classes)
    seg_labels = np.where(masks == 1, IGNORE_LABEL, labels)  # outlier object is not a class
    acc.update(pred, seg_labels, ignore_label=IGNORE_LABEL)
    blocks["segmentation"] = {"miou": metrics.miou(acc)}
    return blocks, maps
