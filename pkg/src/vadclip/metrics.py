"""Coarse- and fine-grained inference and evaluation metrics.

Frame-level AP and AUC, AUC restricted to abnormal videos, and temporal
detection mAP at several IoU thresholds with greedy confidence-ordered
matching.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import softmax
from scipy.stats import rankdata

from .data import DetectionSegment, LabelVocabulary

IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
COARSE_PATHS = ("c-branch", "a-branch", "a-branch-softmax")


def similarity_to_unit(sim):
    """Map cosine similarity from [-1, 1] onto [0, 1]."""
    return (sim + 1.0) / 2.0


def coarse_scores(scores, sim, path: str, normal_index: int = 0, tau: float = 0.07) -> np.ndarray:
    """Per-frame anomaly degree.

    ``c-branch`` passes the classification scores through. ``a-branch`` is one
    minus the mapped cosine to the normal class. ``a-branch-softmax`` is one
    minus the normal class's share of a per-frame softmax over ``sim / tau``.
    """
    if path == "c-branch":
        if scores is None:
            raise ValueError("model has no classification branch")
        return np.asarray(scores, dtype=np.float64)
    sim = np.asarray(sim, dtype=np.float64)
    if path == "a-branch":
        return 1.0 - similarity_to_unit(sim[:, normal_index])
    if path == "a-branch-softmax":
        return 1.0 - softmax(sim / tau, axis=1)[:, normal_index]
    raise ValueError(f"unknown inference path {path!r}; expected one of {COARSE_PATHS}")


def extract_segments(sim, vocab: LabelVocabulary, threshold: float, min_length: int = 1,
                     video_id: str = "") -> list[DetectionSegment]:
    """Maximal runs of frames whose raw cosine to an abnormal class reaches ``threshold``.

    Runs shorter than ``min_length`` are dropped. Confidence is the mean
    mapped similarity over the run. Output is ordered by class, then start.
    """
    sim = np.asarray(sim, dtype=np.float64)
    out = []
    for j in vocab.abnormal_indices:
        col = sim[:, j]
        hit = np.concatenate([[False], col >= threshold, [False]])
        edges = np.flatnonzero(np.diff(hit.astype(np.int8)))
        for start, end in zip(edges[::2], edges[1::2]):
            if end - start >= min_length:
                conf = float(np.clip(similarity_to_unit(col[start:end].mean()), 0.0, 1.0))
                out.append(DetectionSegment(vocab.labels[j], int(start), int(end), conf, video_id))
    return out


# ---------------------------------------------------------------------------
# frame-level metrics

def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    return scores, labels.astype(np.int64)


def frame_ap(scores, labels) -> float:
    """Area under the step-wise precision-recall curve; tied scores form one step."""
    scores, labels = _check_binary(scores, labels)
    pos = labels.sum()
    if pos == 0:
        raise ValueError("AP undefined without positive frames")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def frame_auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank statistic with average ranks for ties."""
    scores, labels = _check_binary(scores, labels)
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUC undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - pos * (pos + 1) / 2) / (pos * neg))


def ano_auc(scores: Sequence, labels: Sequence, video_labels: Sequence[int]) -> float:
    """Frame AUC over the frames of abnormal videos only."""
    keep = [i for i, y in enumerate(video_labels) if y == 1]
    if not keep:
        raise ValueError("no abnormal videos to evaluate")
    s = np.concatenate([np.asarray(scores[i], dtype=np.float64).ravel() for i in keep])
    y = np.concatenate([np.asarray(labels[i]).ravel() for i in keep])
    return frame_auc(s, y)


# ---------------------------------------------------------------------------
# temporal detection mAP

def segment_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """IoU of half-open intervals ``[start, end)``."""
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """AP of a ranked hit list using the monotone precision envelope."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    mprec = np.r_[0.0, precision, 0.0]
    mrec = np.r_[0.0, recall, 1.0]
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def greedy_match(preds: Sequence[DetectionSegment], gts: Sequence[tuple], threshold: float) -> np.ndarray:
    """Hit flags for ``preds`` (already sorted by confidence) against one class's
    ground truth ``(video_id, start, end)``. Each prediction claims the
    unmatched GT in its video with the highest IoU if that IoU reaches ``threshold``."""
    by_video = defaultdict(list)
    for g, (vid, s, e) in enumerate(gts):
        by_video[vid].append((g, s, e))
    used = np.zeros(len(gts), dtype=bool)
    hits = np.zeros(len(preds), dtype=np.int64)
    for i, p in enumerate(preds):
        best, best_iou = -1, -1.0
        for g, s, e in by_video.get(p.video_id, ()):
            if used[g]:
                continue
            iou = segment_iou((p.start, p.end), (s, e))
            if iou > best_iou:
                best, best_iou = g, iou
        if best >= 0 and best_iou >= threshold:
            used[best] = True
            hits[i] = 1
    return hits


def sort_by_confidence(preds: Iterable[DetectionSegment]) -> list[DetectionSegment]:
    preds = list(preds)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    return [preds[i] for i in order]


def map_at_iou(predictions: Sequence[DetectionSegment], ground_truth: Sequence[tuple],
               thresholds: Sequence[float] = IOU_THRESHOLDS):
    """Detection mAP per IoU threshold.

    ``ground_truth`` holds ``(video_id, start, end, label)`` tuples. Classes
    are those present in the ground truth. Returns ``(map_by_threshold,
    average_map, per_class_ap)`` where ``per_class_ap[label][threshold]`` is AP.
    """
    classes = sorted({g[3] for g in ground_truth})
    per_class = {c: {} for c in classes}
    result = {}
    for thr in thresholds:
        aps = []
        for c in classes:
            gts = [(v, s, e) for v, s, e, lab in ground_truth if lab == c]
            preds = sort_by_confidence(p for p in predictions if p.label == c)
            ap = interpolated_ap(greedy_match(preds, gts, thr), len(gts))
            per_class[c][thr] = ap
            aps.append(ap)
        result[thr] = float(np.mean(aps)) if aps else 0.0
    avg = float(np.mean(list(result.values()))) if result else 0.0
    return result, avg, per_class


@dataclass
class EvaluationReport:
    ap: float
    auc: float
    ano_auc: float
    map_at_iou: dict[float, float]
    avg_map: float
    per_class_ap: dict[str, dict[float, float]] = field(default_factory=dict)
    path: str = "c-branch"
    by_path: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["map_at_iou"] = {f"{k:.1f}": v for k, v in self.map_at_iou.items()}
        out["per_class_ap"] = {c: {f"{k:.1f}": v for k, v in t.items()} for c, t in self.per_class_ap.items()}
        return out
