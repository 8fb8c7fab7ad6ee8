"""AP@0.5 / mAP evaluation and g-means threshold calibration."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .data_io import BBox, DataError, SceneRecord


class EvaluationError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


def _coords(b) -> tuple[float, float, float, float]:
    if isinstance(b, BBox):
        return b.coords()
    if isinstance(b, Mapping):
        return (b["x_min"], b["y_min"], b["x_max"], b["y_max"])
    return tuple(b)


def iou(a, b) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    ax0, ay0, ax1, ay1 = _coords(a)
    bx0, by0, bx1, by1 = _coords(b)
    if ax1 <= ax0 or ay1 <= ay0 or bx1 <= bx0 or by1 <= by0:
        raise ValueError(f"degenerate box in iou: {_coords(a)} / {_coords(b)}")
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


@dataclass
class Prediction:
    image: Hashable
    score: float
    box: tuple[float, float, float, float]


@dataclass
class MatchResult:
    order: list[int]             # prediction indices in ranking order
    matched: list[int | None]    # per ranked prediction: index into that image's GT list
    tp: np.ndarray               # per ranked prediction, 0/1
    n_gt: int
    unmatched_gt: dict = field(default_factory=dict)

    @property
    def fp(self) -> np.ndarray:
        return 1 - self.tp


def match_predictions(preds: Sequence[Prediction], gts: Mapping[Hashable, Sequence],
                      iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order (stable on ties).

    Each prediction takes the still-unmatched ground truth of its image with
    the highest IoU, provided that IoU reaches ``iou_thresh``.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    used = {img: [False] * len(boxes) for img, boxes in gts.items()}
    matched: list[int | None] = []
    tp = np.zeros(len(preds), dtype=int)
    for rank, i in enumerate(order):
        p = preds[i]
        best, best_iou = None, iou_thresh
        for g, gbox in enumerate(gts.get(p.image, ())):
            if used[p.image][g]:
                continue
            v = iou(p.box, gbox)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        if best is not None:
            used[p.image][best] = True
            tp[rank] = 1
        matched.append(best)
    n_gt = sum(len(v) for v in gts.values())
    unmatched = {img: flags.count(False) for img, flags in used.items()}
    return MatchResult(order, matched, tp, n_gt, unmatched)


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-point area under the monotone precision envelope."""
    if n_gt == 0:
        raise EvaluationError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(preds: Sequence[Prediction], gts: Mapping[Hashable, Sequence],
                      iou_thresh: float = 0.5) -> float | None:
    """AP for one task; None when the task has no ground truth at all."""
    m = match_predictions(preds, gts, iou_thresh)
    if m.n_gt == 0:
        return None
    return ap_from_flags(m.tp, m.n_gt)


def mean_ap(per_task: Mapping | Iterable) -> float:
    values = list(per_task.values()) if isinstance(per_task, Mapping) else list(per_task)
    defined = [float(v) for v in values if v is not None]
    if not defined:
        raise EvaluationError("no task has a defined AP")
    return float(np.mean(defined))


# --- threshold calibration ------------------------------------------------------

@dataclass
class CalibrationResult:
    threshold: float
    tpr: float
    fpr: float
    gmean: float
    sweep: list[tuple[float, float, float, float]]  # (threshold, tpr, fpr, gmean)


def candidate_thresholds(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=float))
    mids = (u[:-1] + u[1:]) / 2
    return np.unique(np.concatenate(([0.0, 1.0], mids)))


def rates_at(scores, labels, threshold: float) -> tuple[float, float, float]:
    """(TPR, FPR, g-means) for the rule score >= threshold."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fn = int(np.sum(~pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    tpr = tp / (tp + fn)
    fpr = fp / (fp + tn)
    return tpr, fpr, float(np.sqrt(tpr * (1 - fpr)))


def calibrate_threshold(scores, labels) -> CalibrationResult:
    """Pick the threshold maximizing sqrt(TPR * (1 - FPR)); ties go to the smallest."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape:
        raise CalibrationError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise CalibrationError("labels must be 0/1")
    if y.sum() == 0 or y.sum() == y.size:
        raise CalibrationError("calibration needs both positive and negative examples")
    sweep = [(float(t), *rates_at(s, y, t)) for t in candidate_thresholds(s)]
    best = max(sweep, key=lambda row: row[3])  # first max wins, sweep is ascending
    return CalibrationResult(best[0], best[1], best[2], best[3], sweep)


# --- file-level evaluation ------------------------------------------------------

def _scene_key(image_id, task_id) -> tuple[str, int]:
    return (str(image_id), int(task_id))


def evaluate(predictions: Sequence[Mapping], scenes: Sequence[SceneRecord],
             iou_thresh: float = 0.5) -> dict:
    """Per-task AP, counts and mAP for prediction records against labelled scenes."""
    scene_map = {_scene_key(s.image_id, s.task_id): s for s in scenes}
    missing = sorted({_scene_key(r["image_id"], r["task_id"]) for r in predictions} - scene_map.keys())
    if missing:
        raise DataError("predictions reference unknown scenes: "
                        + ", ".join(f"{i}/task{t}" for i, t in missing))

    gts: dict[int, dict] = defaultdict(dict)
    positives = negatives = 0
    for key, s in scene_map.items():
        labels = s.labels()
        positives += int(labels.sum())
        negatives += int(len(labels) - labels.sum())
        gts[s.task_id][key] = [b.bbox.coords() for b, l in zip(s.boxes, labels) if l == 1]

    preds: dict[int, list[Prediction]] = defaultdict(list)
    for r in predictions:
        key = _scene_key(r["image_id"], r["task_id"])
        for b in r["boxes"]:
            if int(b["decision"]) == 1:
                rank = b.get("rank_score", b["score"])
                preds[key[1]].append(Prediction(key, float(rank), _coords(b["bbox"])))

    per_task = {}
    for task_id in sorted(gts):
        m = match_predictions(preds.get(task_id, []), gts[task_id], iou_thresh)
        ap = ap_from_flags(m.tp, m.n_gt) if m.n_gt else None
        tp = int(m.tp.sum())
        per_task[str(task_id)] = {"ap": ap, "tp": tp, "fp": int(len(m.tp) - tp),
                                  "fn": int(m.n_gt - tp), "n_gt": m.n_gt}
    defined = [v["ap"] for v in per_task.values() if v["ap"] is not None]
    return {
        "per_task": per_task,
        "map": mean_ap(defined) if defined else None,
        "iou_thresh": iou_thresh,
        "imbalance_ratio": (negatives / positives) if positives else None,
        "n_positive": positives,
        "n_negative": negatives,
    }
