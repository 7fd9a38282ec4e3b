"""Set-prediction detection loss: matching cost, Hungarian assignment, loss.

Predictions are a fixed-size set of (class logits, box) pairs; ground truth
is a variable-size set of labeled boxes. Matching minimizes
-p(class) + L1(box) over injections of ground truth into predictions, and
the loss is cross-entropy on classes (unmatched predictions train toward
"no object" with a small weight) plus L1 on matched boxes.

Boxes are (cx, cy, w, h) in [0,1] relative coordinates throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor

NO_OBJECT = 0          # class index reserved for "no object"
NO_OBJECT_WEIGHT = 0.1  # default down-weight for unmatched predictions


@dataclass
class GroundTruthObject:
    class_id: int
    box: Tuple[float, float, float, float]

    def __post_init__(self):
        cx, cy, w, h = self.box
        if self.class_id < 1:
            raise ValueError(f"GroundTruthObject: class_id must be >= 1, got {self.class_id}")
        if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise ValueError(f"GroundTruthObject: degenerate size in box {self.box}")
        if not (0.0 <= cx - w / 2 and cx + w / 2 <= 1.0 and 0.0 <= cy - h / 2 and cy + h / 2 <= 1.0):
            raise ValueError(f"GroundTruthObject: box {self.box} leaves the unit square")


@dataclass
class BoxPrediction:
    class_logits: np.ndarray  # (num_classes + 1,), index 0 = no object
    box: Tuple[float, float, float, float]

    def probs(self) -> np.ndarray:
        z = self.class_logits - self.class_logits.max()
        e = np.exp(z)
        return e / e.sum()


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]]  # (prediction index, ground-truth index)
    total_cost: float


def gts_to_arrays(gts: Sequence[GroundTruthObject]):
    classes = np.array([g.class_id for g in gts], dtype=np.intp)
    boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(len(gts), 4)
    return classes, boxes


def box_iou(a, b) -> float:
    """Intersection over union of two (cx,cy,w,h) boxes; zero-area boxes
    contribute no overlap."""
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _corners(box):
    cx, cy, w, h = (float(v) for v in box)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def pairwise_cost(class_logits: np.ndarray, boxes: np.ndarray,
                  gt_classes: np.ndarray, gt_boxes: np.ndarray,
                  use_log_prob: bool = False) -> np.ndarray:
    """(N, M) matching cost: -p(gt class) plus L1 box distance.

    `use_log_prob` switches the class term to -log p for the lineage that
    matches in log space; the default mirrors the probability form.
    """
    n, m = len(class_logits), len(gt_classes)
    if n < m:
        raise ConfigurationError(f"pairwise_cost: {n} predictions cannot cover {m} targets")
    z = class_logits - class_logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    cls = probs[:, gt_classes]
    cls_term = -np.log(np.maximum(cls, 1e-300)) if use_log_prob else -cls
    box_term = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    return cls_term + box_term


def hungarian_assign(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment covering every column of an N x M matrix.

    Kuhn-Munkres via shortest augmenting paths on the transposed problem
    (each ground truth gets a distinct prediction). Deterministic: column
    scans run in ascending prediction order with strict improvement, so
    equal-cost alternatives resolve toward lower prediction indices.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"hungarian_assign: cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian_assign: cost matrix contains non-finite entries")
    n, m = cost.shape
    if n < m:
        raise ConfigurationError(f"hungarian_assign: {n} rows cannot cover {m} columns")
    if m == 0:
        return Assignment(pairs=[], total_cost=0.0)

    # rows of `c` are ground truths, columns are predictions
    c = cost.T  # (m, n)
    INF = np.inf
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)  # p[j] = row assigned to column j (1-based)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = c[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pred_of_gt = np.full(m, -1, dtype=np.intp)
    for j in range(1, n + 1):
        if p[j] > 0:
            pred_of_gt[p[j] - 1] = j - 1
    pairs = [(int(pred_of_gt[i]), i) for i in range(m)]
    total = float(sum(cost[pn, gm] for pn, gm in pairs))
    return Assignment(pairs=pairs, total_cost=total)


def match(class_logits: np.ndarray, boxes: np.ndarray,
          gt_classes: np.ndarray, gt_boxes: np.ndarray,
          use_log_prob: bool = False) -> Assignment:
    """Cost construction plus assignment in one call."""
    if len(gt_classes) == 0:
        return Assignment(pairs=[], total_cost=0.0)
    return hungarian_assign(pairwise_cost(class_logits, boxes, gt_classes, gt_boxes,
                                          use_log_prob))


def detection_loss(class_logits: Tensor, boxes: Tensor,
                   gt_classes: np.ndarray, gt_boxes: np.ndarray,
                   assignment: Assignment,
                   no_object_weight: float = NO_OBJECT_WEIGHT) -> Tensor:
    """Supervised set loss, differentiable w.r.t. logits and boxes.

    Class term: weighted mean cross-entropy, matched predictions against
    their target class at weight 1 and the rest against "no object" at
    `no_object_weight`. Box term: L1 distance averaged over matched pairs.
    """
    n, k1 = class_logits.data.shape
    targets = np.zeros(n, dtype=np.intp)
    weights = np.full(n, no_object_weight)
    for pn, gm in assignment.pairs:
        targets[pn] = gt_classes[gm]
        weights[pn] = 1.0
    onehot = np.zeros((n, k1))
    onehot[np.arange(n), targets] = weights
    logp = T.log_softmax_axis(class_logits, axis=1)
    cls_term = T.mul(T.neg(T.sum_all(T.mul(Tensor(onehot), logp))), 1.0 / weights.sum())
    if not assignment.pairs:
        return cls_term
    sel = np.zeros((len(assignment.pairs), n))
    matched_gt = np.zeros((len(assignment.pairs), 4))
    for row, (pn, gm) in enumerate(assignment.pairs):
        sel[row, pn] = 1.0
        matched_gt[row] = gt_boxes[gm]
    picked = T.matmul(Tensor(sel), boxes)
    l1 = T.sum_all(T.abs_(T.sub(picked, Tensor(matched_gt))))
    box_term = T.mul(l1, 1.0 / len(assignment.pairs))
    return T.add(cls_term, box_term)
