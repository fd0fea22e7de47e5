"""Full-image inference and the six-metric evaluation suite.

Thresholded metrics (accuracy, sensitivity, specificity, DICE, vessel
IoU) come from pooled confusion counts; AUC uses the exact rank statistic
(probability that a random vessel pixel outscores a random background
pixel, ties counted 1/2).  Aggregation reports both micro (pooled counts
and pooled pixels) and macro (mean over images) conventions.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import rankdata

from .augment import pad_to_grid, crop_back
from .data import RetinalSample
from .model import VesselNet, forward_numpy


class MetricError(ValueError):
    """Metric undefined on the given region (empty or single-class)."""


@dataclass
class MetricsRow:
    """Metrics for one image (or one pooled aggregate)."""

    sample_id: str
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    dice: float
    vessel_iou: float
    auc: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    per_image: list[MetricsRow]
    micro: MetricsRow
    macro: MetricsRow


def predict_full(sample: RetinalSample, model: VesselNet) -> tuple[np.ndarray, np.ndarray]:
    """Pad, run the network, and crop back to the original extent.

    Returns (probability H x W, enhancement H x W x 3).
    """
    padded, spec = pad_to_grid(sample.image)
    enhanced, prob = forward_numpy(model, padded)
    return crop_back(prob, spec), crop_back(enhanced, spec)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Pixel is vessel iff its probability is >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise MetricError(f"threshold must be in (0,1), got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _counts_to_row(sample_id, threshold, tp, fp, tn, fn, auc_value=None) -> MetricsRow:
    total = tp + fp + tn + fn
    return MetricsRow(
        sample_id=sample_id,
        threshold=threshold,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=(tp + tn) / total,
        sensitivity=tp / (tp + fn) if tp + fn else 0.0,
        specificity=tn / (tn + fp) if tn + fp else 0.0,
        dice=2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0,
        vessel_iou=tp / (tp + fp + fn) if tp + fp + fn else 1.0,
        auc=auc_value,
    )


def confusion_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    region: np.ndarray | None = None,
    sample_id: str = "",
    threshold: float = 0.5,
) -> MetricsRow:
    """Thresholded metrics over region pixels (default: the whole image)."""
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if region is not None:
        keep = np.asarray(region) > 0
        if not keep.any():
            raise MetricError("empty evaluation region")
        pred, gt = pred[keep], gt[keep]
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    tn = int((~pred & ~gt).sum())
    if tp + fp + tn + fn == 0:
        raise MetricError("empty evaluation region")
    return _counts_to_row(sample_id, threshold, tp, fp, tn, fn)


def auc(prob: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> float:
    """Rank-statistic AUC: P(score(vessel) > score(background)) with ties at 1/2."""
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt) > 0
    if prob.shape != gt.shape:
        raise MetricError(f"shape mismatch: prob {prob.shape} vs gt {gt.shape}")
    if region is not None:
        keep = np.asarray(region) > 0
        prob, gt = prob[keep], gt[keep]
    prob, gt = prob.ravel(), gt.ravel()
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: region contains a single class")
    ranks = rankdata(prob)  # average ranks handle ties as 1/2
    return float((ranks[gt].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_sample(
    prob: np.ndarray,
    gt: np.ndarray,
    region: np.ndarray | None = None,
    sample_id: str = "",
    threshold: float = 0.5,
) -> MetricsRow:
    row = confusion_metrics(binarize(prob, threshold), gt, region, sample_id, threshold)
    row.auc = auc(prob, gt, region)
    return row


def aggregate(
    rows: list[MetricsRow],
    pooled: list[tuple[np.ndarray, np.ndarray, np.ndarray | None]] | None = None,
) -> MetricsReport:
    """Combine per-image rows into micro and macro aggregates.

    ``pooled`` optionally supplies (prob, gt, region) triples so the micro
    AUC can be computed over pooled pixels; otherwise micro AUC falls back
    to the macro mean.
    """
    if not rows:
        raise MetricError("aggregate requires at least one image")
    threshold = rows[0].threshold
    tp = sum(r.tp for r in rows)
    fp = sum(r.fp for r in rows)
    tn = sum(r.tn for r in rows)
    fn = sum(r.fn for r in rows)
    aucs = [r.auc for r in rows if r.auc is not None]
    macro_auc = float(np.mean(aucs)) if aucs else None
    micro_auc = macro_auc
    if pooled:
        probs, gts = [], []
        for p, g, region in pooled:
            if region is not None:
                keep = np.asarray(region) > 0
                p, g = np.asarray(p)[keep], np.asarray(g)[keep]
            probs.append(np.asarray(p).ravel())
            gts.append(np.asarray(g).ravel())
        micro_auc = auc(np.concatenate(probs), np.concatenate(gts))
    micro = _counts_to_row("micro", threshold, tp, fp, tn, fn, micro_auc)
    macro = MetricsRow(
        sample_id="macro",
        threshold=threshold,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=float(np.mean([r.accuracy for r in rows])),
        sensitivity=float(np.mean([r.sensitivity for r in rows])),
        specificity=float(np.mean([r.specificity for r in rows])),
        dice=float(np.mean([r.dice for r in rows])),
        vessel_iou=float(np.mean([r.vessel_iou for r in rows])),
        auc=macro_auc,
    )
    return MetricsReport(per_image=rows, micro=micro, macro=macro)


def evaluate_model(
    model: VesselNet,
    samples: list[RetinalSample],
    threshold: float = 0.5,
    use_fov: bool = False,
) -> MetricsReport:
    """Full-image inference and metrics over a list of samples."""
    rows, pooled = [], []
    for sample in samples:
        prob, _ = predict_full(sample, model)
        region = sample.fov_mask if use_fov else None
        rows.append(evaluate_sample(prob, sample.label, region, sample.id, threshold))
        pooled.append((prob, sample.label, region))
    return aggregate(rows, pooled)
