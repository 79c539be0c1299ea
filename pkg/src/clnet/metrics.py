"""FROC evaluation (recall at false-positives-per-image budgets), pair-linking
metrics, and IoU utilities.  Boxes are normalized (cx, cy, w, h)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_IOU_THR = 0.2  # loose localization criterion, configurable everywhere
RECALL_BUDGETS = (0.25, 0.5, 1.0, 2.0, 4.0)


def box_iou(a, b) -> float:
    """Intersection over union of two cxcywh boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return float(inter / union)


@dataclass
class FrocPoint:
    threshold: float
    fpi: float
    recall: float


@dataclass
class FrocCurve:
    """Operating points sorted by descending score threshold.

    Walking down the list, both fpi and recall are non-decreasing.
    """

    points: list
    n_images: int
    n_gt: int

    def validate(self):
        for prev, cur in zip(self.points, self.points[1:]):
            if cur.threshold >= prev.threshold:
                raise ValueError("thresholds must strictly decrease")
            if cur.fpi < prev.fpi - 1e-12 or cur.recall < prev.recall - 1e-12:
                raise ValueError("fpi/recall must be non-decreasing along the curve")
        return self


def _greedy_match_flags(boxes, scores, gt, iou_thr):
    """TP/FP flag per detection: descending score (ties keep input order),
    each detection takes the best-IoU still-unmatched GT if IoU >= iou_thr."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    taken = [False] * len(gt)
    tp = np.zeros(n, dtype=bool)
    for i in order:
        best_iou, best_j = 0.0, -1
        for j in range(len(gt)):
            if taken[j]:
                continue
            iou = box_iou(gt[j], boxes[i])
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thr:
            taken[best_j] = True
            tp[i] = True
    return tp


def froc(detections, ground_truths, iou_thr: float = DEFAULT_IOU_THR) -> FrocCurve:
    """FROC curve over a set of images.

    detections: per image, a (boxes [n,4], scores [n]) pair; ground_truths:
    per image, a [k,4] box array.  Every distinct score is swept as an
    inclusive threshold.
    """
    if len(detections) == 0:
        raise ValueError("froc needs at least one image")
    if len(detections) != len(ground_truths):
        raise ValueError(f"{len(detections)} detection lists vs {len(ground_truths)} gt lists")
    n_images = len(detections)

    all_scores, all_tp = [], []
    n_gt = 0
    for (boxes, scores), gt in zip(detections, ground_truths):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        n_gt += len(gt)
        tp = _greedy_match_flags(boxes, scores, gt, iou_thr)
        all_scores.append(scores)
        all_tp.append(tp)

    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    points = []
    if scores.size:
        order = np.argsort(-scores, kind="stable")
        scores, tp = scores[order], tp[order]
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(~tp)
        # last index of each distinct score = inclusive-threshold counts
        for idx in np.flatnonzero(np.diff(scores, append=-np.inf)):
            points.append(FrocPoint(
                threshold=float(scores[idx]),
                fpi=float(cum_fp[idx]) / n_images,
                recall=float(cum_tp[idx]) / n_gt if n_gt else 0.0,
            ))
    return FrocCurve(points, n_images, n_gt).validate()


def recall_at(curve: FrocCurve, t: float) -> float:
    """Recall at FPI budget t: the lowest threshold whose FPI still fits.

    Step interpolation only; an empty curve or an unaffordable budget gives 0.
    """
    if t <= 0:
        raise ValueError(f"FPI budget must be positive, got {t}")
    best = 0.0
    for p in curve.points:
        if p.fpi <= t:
            best = p.recall
        else:
            break
    return best


def format_recall_table(rows, budgets=RECALL_BUDGETS) -> str:
    """Method x R@t table, percentages to one decimal."""
    header = ["Method"] + [f"R@{float(b)}" for b in budgets]
    lines = ["  ".join(f"{h:>8}" for h in header)]
    for label, curve in rows:
        cells = [f"{100.0 * recall_at(curve, b):.1f}" for b in budgets]
        lines.append("  ".join(f"{c:>8}" for c in [label] + cells))
    return "\n".join(lines)


def curve_to_csv(curve: FrocCurve) -> str:
    lines = ["threshold,fpi,recall"]
    for p in curve.points:
        lines.append(f"{p.threshold!r},{p.fpi!r},{p.recall!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# pair-linking metrics


@dataclass
class PairMetrics:
    """Set-level agreement between predicted and ground-truth pairs.

    Counts aggregate by summation; a predicted pair is correct iff both of
    its detection slots map, through the detection-to-GT matching (dustbin
    maps to a missing side), onto the same ground-truth pair entry.
    """

    correct: int = 0
    predicted: int = 0
    gt: int = 0
    union: int = 0

    @property
    def precision(self) -> float:
        return self.correct / self.predicted if self.predicted else 1.0

    @property
    def recall(self) -> float:
        return self.correct / self.gt if self.gt else 1.0

    @property
    def exact_pair_accuracy(self) -> float:
        """Jaccard index of the exact pair sets (1.0 when both are empty)."""
        return self.correct / self.union if self.union else 1.0

    def add(self, other: "PairMetrics"):
        self.correct += other.correct
        self.predicted += other.predicted
        self.gt += other.gt
        self.union += other.union
        return self


def pair_metrics(pred_pairs, gt_pairs, det_to_gt_c: dict, det_to_gt_m: dict) -> PairMetrics:
    """Score predicted pairs for one sample.

    pred_pairs: (cc slot | None, mlo slot | None), None meaning dustbin;
    gt_pairs: (cc GT index | None, mlo GT index | None); det_to_gt_*: maps
    detection slot -> GT index for detections that localized a ground truth.
    """
    gt_set = {(gc, gm) for gc, gm in gt_pairs}
    mapped = set()
    for k, (c, m) in enumerate(pred_pairs):
        if c is None and m is None:
            raise ValueError("a predicted pair cannot be dustbin on both sides")
        gc = None if c is None else det_to_gt_c.get(c, ("unmatched-c", k))
        gm = None if m is None else det_to_gt_m.get(m, ("unmatched-m", k))
        mapped.add((gc, gm))
    inter = mapped & gt_set
    return PairMetrics(
        correct=len(inter),
        predicted=len(mapped),
        gt=len(gt_set),
        union=len(mapped | gt_set),
    )


def match_detections_to_gt(boxes, scores, gt, iou_thr: float = DEFAULT_IOU_THR) -> dict:
    """Detection-slot -> GT-index map from the froc greedy matcher."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    taken = [False] * len(gt)
    out = {}
    for i in order:
        best_iou, best_j = 0.0, -1
        for j in range(len(gt)):
            if taken[j]:
                continue
            iou = box_iou(gt[j], boxes[i])
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thr:
            taken[best_j] = True
            out[i] = best_j
    return out
