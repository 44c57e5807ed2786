"""Segmentation, detection and scene metrics plus confusion-analysis tools."""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from hscrf.services.dataset import VOID, Box, SceneInstance, box_iou, majority_label, paint_segments
from hscrf.utils.errors import MetricError
from hscrf.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class DetResult:
    image_id: str
    class_id: int
    box: Box
    confidence: float


@dataclass(frozen=True)
class GTObject:
    image_id: str
    class_id: int
    box: Box


# --------------------------------------------------------------------------
# Segmentation
# --------------------------------------------------------------------------


def confusion_from_labels(inst: SceneInstance, seg_labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Pixel confusion matrix (rows = GT) of per-segment labels painted onto the grid; VOID excluded."""
    if inst.gt_pixel_labels is None:
        raise MetricError(f"instance {inst.id} has no GT pixel labels")
    pred = paint_segments(inst, seg_labels)
    gt = inst.gt_pixel_labels
    keep = (gt >= 0) & (pred >= 0)
    counts = np.bincount(gt[keep] * n_classes + pred[keep], minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes)


def per_class_recall(cm: np.ndarray) -> Tuple[np.ndarray, float]:
    """Recall per class (NaN for classes without GT pixels) and their average over included classes."""
    cm = np.asarray(cm, dtype=float)
    totals = cm.sum(axis=1)
    if totals.sum() == 0:
        raise MetricError("confusion matrix is empty")
    recalls = np.full(cm.shape[0], np.nan)
    included = totals > 0
    recalls[included] = np.diag(cm)[included] / totals[included]
    return recalls, float(recalls[included].mean())


def global_recall(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=float)
    total = cm.sum()
    if total == 0:
        raise MetricError("confusion matrix is empty")
    return float(np.trace(cm) / total)


def thing_stuff_recall(cm: np.ndarray, is_thing: Sequence[bool]) -> Tuple[float, float]:
    """Average recall over thing classes and over stuff classes (NaN when a group has no GT pixels)."""
    recalls, _ = per_class_recall(cm)
    things = np.asarray(is_thing, dtype=bool)

    def group_mean(mask: np.ndarray) -> float:
        values = recalls[mask]
        values = values[~np.isnan(values)]
        return float(values.mean()) if values.size else float("nan")

    return group_mean(things), group_mean(~things)


def scene_accuracy(pred: Sequence[int], gt: Sequence[int]) -> float:
    pred_arr, gt_arr = np.asarray(pred), np.asarray(gt)
    if pred_arr.size == 0:
        raise MetricError("no scenes to score")
    return float((pred_arr == gt_arr).mean())


def segment_pixel_accuracy(seg_labels: Sequence[int], gt_labels: Sequence[int], areas: Sequence[int]) -> float:
    """Area-weighted accuracy of per-segment labels; segments with VOID GT are skipped."""
    pred, gt, w = np.asarray(seg_labels), np.asarray(gt_labels), np.asarray(areas, dtype=float)
    keep = gt != VOID
    if w[keep].sum() == 0:
        raise MetricError("no labelled segments")
    return float(w[keep][pred[keep] == gt[keep]].sum() / w[keep].sum())


def snap_upper_bound(instances: Sequence[SceneInstance], n_classes: int) -> Tuple[float, float]:
    """(average, global) recall of labelling every segment with its GT majority label."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for inst in instances:
        cm += confusion_from_labels(inst, [s.gt_label for s in inst.segments], n_classes)
    return per_class_recall(cm)[1], global_recall(cm)


def supersegment_disagreement(seg_labels: Sequence[int], seg_parent: Mapping[int, int]) -> float:
    """Fraction of segments whose label differs from the majority label of their super-segment's segments."""
    labels = np.asarray(seg_labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    parents = np.array([seg_parent[i] for i in range(labels.size)])
    n_labels = int(labels.max()) + 1
    differ = 0
    for j in np.unique(parents):
        members = labels[parents == j]
        differ += int((members != majority_label(members, n_labels)).sum())
    return differ / labels.size


def unary_argmax_labels(table: np.ndarray) -> np.ndarray:
    """Decisions of a potential table on its own (first maximum wins)."""
    return np.argmax(np.asarray(table), axis=1)


# --------------------------------------------------------------------------
# Detection
# --------------------------------------------------------------------------


def voc_ap(rec: np.ndarray, prec: np.ndarray) -> float:
    """Area under the all-points interpolated precision/recall curve."""
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def detection_ap(
    dets: Sequence[DetResult], gts: Sequence[GTObject], iou_thresh: float = 0.5
) -> Tuple[Dict[int, float], float]:
    """Per-class AP and its mean over classes with at least one GT object.

    Detections are matched greedily in descending confidence order; each GT
    object matches at most once and only at IoU >= `iou_thresh`. The mean is
    0.0 when no class has GT objects.
    """
    per_class: Dict[int, float] = {}
    for c in sorted({g.class_id for g in gts}):
        class_gts: Dict[str, List[GTObject]] = {}
        for g in gts:
            if g.class_id == c:
                class_gts.setdefault(g.image_id, []).append(g)
        matched = {image: np.zeros(len(objs), dtype=bool) for image, objs in class_gts.items()}
        n_pos = sum(len(objs) for objs in class_gts.values())

        class_dets = [d for d in dets if d.class_id == c]
        order = np.argsort(-np.array([d.confidence for d in class_dets], dtype=float), kind="stable")
        tp = np.zeros(len(class_dets))
        fp = np.zeros(len(class_dets))
        for rank, idx in enumerate(order):
            det = class_dets[idx]
            candidates = class_gts.get(det.image_id, [])
            overlaps = np.array([box_iou(det.box, g.box) for g in candidates])
            if overlaps.size and overlaps.max() >= iou_thresh:
                best = int(overlaps.argmax())
                if not matched[det.image_id][best]:
                    matched[det.image_id][best] = True
                    tp[rank] = 1.0
                    continue
            fp[rank] = 1.0

        tp_cum, fp_cum = np.cumsum(tp), np.cumsum(fp)
        rec = tp_cum / n_pos
        prec = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
        per_class[c] = voc_ap(rec, prec)

    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


# --------------------------------------------------------------------------
# Confusion analysis
# --------------------------------------------------------------------------


def _normalized_rows(cm: np.ndarray, eps: float) -> np.ndarray:
    cm = np.asarray(cm, dtype=float)
    totals = cm.sum(axis=1, keepdims=True)
    rows = np.divide(cm, totals, out=np.zeros_like(cm), where=totals > 0) + eps
    return rows / rows.sum(axis=1, keepdims=True)


def symmetric_kl_rows(cm_a: np.ndarray, cm_b: np.ndarray, eps: float = 1e-6) -> float:
    """Sum over rows of KL(p||q) + KL(q||p) between row-normalized confusion matrices."""
    if np.shape(cm_a) != np.shape(cm_b):
        raise MetricError("confusion matrices differ in size")
    p = _normalized_rows(cm_a, eps)
    q = _normalized_rows(cm_b, eps)
    return float(np.sum((p - q) * (np.log(p) - np.log(q))))


def oracle_combination(
    pred_a: Sequence[int], pred_b: Sequence[int], gt: Sequence[int], areas: Optional[Sequence[int]] = None
) -> float:
    """Pixel accuracy when A's label is used where A is right and B's label elsewhere."""
    a, b, truth = np.asarray(pred_a), np.asarray(pred_b), np.asarray(gt)
    combined = np.where(a == truth, a, b)
    weights = np.ones(truth.size) if areas is None else np.asarray(areas)
    return segment_pixel_accuracy(combined, truth, weights)


def mean_rank_of_truth(
    potentials: np.ndarray, gt_labels: Sequence[int], restrict_to_misclassified: bool = False
) -> float:
    """Mean 1-based rank of the GT label when classes are sorted by descending potential.

    Ties keep class-index order. Rows with VOID GT are skipped; NaN when no row qualifies.
    """
    table = np.asarray(potentials, dtype=float)
    gt = np.asarray(gt_labels, dtype=np.int64)
    keep = gt >= 0
    if restrict_to_misclassified:
        keep &= np.argmax(table, axis=1) != gt
    if not keep.any():
        return float("nan")
    order = np.argsort(-table[keep], axis=1, kind="stable")
    ranks = np.argmax(order == gt[keep][:, None], axis=1) + 1
    return float(ranks.mean())
