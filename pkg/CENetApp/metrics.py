"""
Evaluation metrics on hard masks and probability maps.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .exceptions import ContractError, DimensionError
from .state import BoundaryReport, ConfusionCounts, MetricRow, SenAcc

logger = logging.getLogger(__name__)


def _masks(pred, gt, valid=None) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {list(pred.shape)} vs {list(gt.shape)}")
    if valid is not None:
        valid = np.asarray(valid).astype(bool)
        return pred[valid], gt[valid]
    return pred.ravel(), gt.ravel()


def confusion_counts(pred, gt, valid=None) -> ConfusionCounts:
    p, g = _masks(pred, gt, valid)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def overlap_error(s, g, valid=None) -> float:
    """1 - |S & G| / |S | G|; two empty masks have error 0."""
    s, g = _masks(s, g, valid)
    union = np.count_nonzero(s | g)
    if union == 0:
        return 0.0
    return 1.0 - np.count_nonzero(s & g) / union


def dice_coefficient(s, g, valid=None) -> float:
    """2|S & G| / (|S| + |G|); two empty masks score 1."""
    s, g = _masks(s, g, valid)
    total = np.count_nonzero(s) + np.count_nonzero(g)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(s & g) / total


def sen_acc(pred, gt, valid=None) -> SenAcc:
    """
    Sen = TP / (TP + FN), Acc = (TP + TN) / all. Sen is 1 when the ground
    truth has no positives.
    """
    c = confusion_counts(pred, gt, valid)
    positives = c["tp"] + c["fn"]
    total = c["tp"] + c["tn"] + c["fp"] + c["fn"]
    sen = c["tp"] / positives if positives else 1.0
    acc = (c["tp"] + c["tn"]) / total if total else 1.0
    return SenAcc(sen=float(sen), acc=float(acc))


def auc(scores, gt, valid=None) -> float:
    """
    Area under the ROC curve as the Mann-Whitney statistic: the fraction of
    (positive, negative) pairs ranked correctly, ties counting one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if scores.shape != gt.shape:
        raise DimensionError(f"score and mask shapes differ: {list(scores.shape)} vs {list(gt.shape)}")
    if valid is not None:
        valid = np.asarray(valid).astype(bool)
        scores, gt = scores[valid], gt[valid]
    else:
        scores, gt = scores.ravel(), gt.ravel()
    n_pos = int(np.count_nonzero(gt))
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs at least one positive and one negative pixel")
    ranks = rankdata(scores)
    u = ranks[gt].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pooled_auc(pairs: Iterable[Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]]) -> Optional[float]:
    """AUC over the pixels of every image together; None when single-class."""
    scores, gts = [], []
    for s, g, v in pairs:
        s, g = np.asarray(s, dtype=np.float64), np.asarray(g).astype(bool)
        if v is not None:
            v = np.asarray(v).astype(bool)
            s, g = s[v], g[v]
        scores.append(s.ravel())
        gts.append(g.ravel())
    if not scores:
        return None
    try:
        return auc(np.concatenate(scores), np.concatenate(gts))
    except ContractError:
        logger.warning("⚠️ Pooled ground truth is single-class; pooled AUC omitted")
        return None


def boundary_positions(pred_labels: np.ndarray, num_boundaries: int) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """
    Row of each boundary per column. Labels are made monotone down every column
    (cumulative max) and boundary b sits at the first row with label >= b + 1.
    Columns where that label never appears get row H and are reported as missing.
    """
    labels = np.asarray(pred_labels)
    if labels.ndim != 2:
        raise DimensionError(f"label map must be [H, W], got {list(labels.shape)}")
    h, w = labels.shape
    repaired = np.maximum.accumulate(labels, axis=0)
    positions = np.empty((num_boundaries, w), dtype=np.int64)
    missing: List[Tuple[int, int]] = []
    for b in range(num_boundaries):
        above = repaired >= b + 1
        found = above.any(axis=0)
        positions[b] = np.where(found, above.argmax(axis=0), h)
        missing.extend((b, int(c)) for c in np.flatnonzero(~found))
    return positions, missing


def boundary_mae(pred_labels: np.ndarray, gt_boundaries: np.ndarray) -> BoundaryReport:
    """
    Mean absolute row error per boundary.

    Args:
        pred_labels: [H, W] layer labels ordered top to bottom (B + 1 classes)
        gt_boundaries: [B, W] ground-truth row per boundary and column
    """
    gt = np.asarray(gt_boundaries, dtype=np.float64)
    if gt.ndim != 2 or gt.shape[1] != np.asarray(pred_labels).shape[1]:
        raise DimensionError(f"boundaries must be [B, W], got {list(gt.shape)}")
    positions, missing = boundary_positions(pred_labels, gt.shape[0])
    if missing:
        logger.warning(f"⚠️ {len(missing)} boundary columns missing; placed at the image bottom")
    mae = np.abs(positions - gt).mean(axis=1)
    return BoundaryReport(mae=[float(m) for m in mae], missing=missing)


def rasterize_boundaries(gt_boundaries: np.ndarray, height: int) -> np.ndarray:
    """Label map whose pixel (r, c) counts the boundaries at or above row r."""
    gt = np.asarray(gt_boundaries)
    rows = np.arange(height)[None, :, None]
    return (gt[:, None, :] <= rows).sum(axis=0).astype(np.int64)


def binary_view(prob: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Foreground scores and hard mask of a [K, H, W] probability map: the single
    channel thresholded at 0.5, or 1 - p(background) and argmax != 0.
    """
    prob = np.asarray(prob)
    if prob.shape[0] == 1:
        return prob[0], prob[0] >= 0.5
    return 1.0 - prob[0], prob.argmax(axis=0) != 0


def image_metrics(image_id: str, prob: np.ndarray, labels: np.ndarray,
                  ignore_label: int = 255) -> List[MetricRow]:
    """overlap_error, dice, sen, acc and (when defined) auc for one [K, H, W] prediction."""
    labels = np.asarray(labels)
    valid = labels != ignore_label
    gt = (labels != 0) & valid
    scores, pred = binary_view(prob)
    result = sen_acc(pred, gt, valid)
    rows = [
        MetricRow(image_id=image_id, metric_name="overlap_error", value=overlap_error(pred, gt, valid)),
        MetricRow(image_id=image_id, metric_name="dice", value=dice_coefficient(pred, gt, valid)),
        MetricRow(image_id=image_id, metric_name="sen", value=result["sen"]),
        MetricRow(image_id=image_id, metric_name="acc", value=result["acc"]),
    ]
    try:
        rows.append(MetricRow(image_id=image_id, metric_name="auc", value=auc(scores, gt, valid)))
    except ContractError:
        logger.warning(f"⚠️ {image_id}: ground truth is single-class, AUC omitted")
    return rows


def aggregate(rows: Sequence[MetricRow]) -> Dict[str, Dict[str, float]]:
    """Mean and population std per metric name, in first-seen order."""
    by_name: Dict[str, List[float]] = {}
    for row in rows:
        by_name.setdefault(row["metric_name"], []).append(row["value"])
    return {
        name: {"mean": float(np.mean(values)), "std": float(np.std(values)), "count": len(values)}
        for name, values in by_name.items()
    }


def metrics_csv_rows(rows: Sequence[MetricRow]) -> List[List[str]]:
    return [[r["image_id"], r["metric_name"], f"{r['value']:.6f}"] for r in rows]


def write_metrics_csv(path: Union[str, Path], rows: Sequence[MetricRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "metric_name", "value"])
        writer.writerows(metrics_csv_rows(rows))
    return path


def mask_from_prob(prob: np.ndarray) -> np.ndarray:
    """[K, H, W] probabilities -> uint8 PGM payload: 0/255 for K == 1, else the argmax class."""
    prob = np.asarray(prob)
    if prob.shape[0] == 1:
        return np.where(prob[0] >= 0.5, 255, 0).astype(np.uint8)
    return prob.argmax(axis=0).astype(np.uint8)
