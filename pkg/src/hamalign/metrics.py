"""Average-precision evaluation and per-epoch metrics records.

AP follows the continuous-interpolation convention: detections are ranked by
confidence, greedily matched (one match per ground truth, same class, IoU at
or above the threshold), and the area under the precision envelope is
integrated exactly over recall. mAP averages over the classes present in
the ground truth; with no ground truth at all the value is undefined and
reported as an explicit absent value (None / empty CSV field).

The CSV schema is frozen as "epoch,l_det,l_adv,disc_acc,target_ap,source_ap,
seconds" with floats at 6 decimal digits. The seconds column is written as
0.000000: the reproducibility contract demands byte-identical files for
identical (config, seed), which true wall-clock cannot satisfy. Measured
wall-clock stays on the in-memory record (`seconds`) and in console logs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .detection import box_iou
from .scenes import GeneratorConfig, gen_eval_batch

CSV_HEADER = "epoch,l_det,l_adv,disc_acc,target_ap,source_ap,seconds"


@dataclass
class MetricsRecord:
    epoch: int
    l_det: float
    l_adv: Optional[float]
    disc_acc: Optional[float]
    target_ap: Optional[float]
    source_ap: Optional[float]
    seconds: float

    def csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"
        return ",".join([str(self.epoch), fmt(self.l_det), fmt(self.l_adv),
                         fmt(self.disc_acc), fmt(self.target_ap), fmt(self.source_ap),
                         fmt(0.0)])


def write_metrics_csv(path, records: List[MetricsRecord]):
    lines = [CSV_HEADER] + [r.csv_row() for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def average_precision(scores: np.ndarray, hits: np.ndarray, num_gt: int) -> float:
    """Area under the interpolated precision-recall curve.

    `scores` and boolean `hits` describe ranked detections of one class;
    `num_gt` is the number of ground-truth objects of that class.
    """
    if num_gt == 0:
        raise ValueError("average_precision: no ground truth for this class")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    hit = np.asarray(hits, dtype=bool)[order]
    tp = np.cumsum(hit)
    fp = np.cumsum(~hit)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def match_detections(dets, gts, iou_threshold: float):
    """Greedy matching of ranked same-class detections inside one image.

    dets: [(score, box)] sorted by descending score; gts: [box].
    Returns hit flags aligned with dets (one match per ground truth).
    """
    taken = [False] * len(gts)
    hits = []
    for _, box in dets:
        best, best_iou = -1, iou_threshold
        for gi, gt_box in enumerate(gts):
            if taken[gi]:
                continue
            iou = box_iou(box, gt_box)
            if iou >= best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            taken[best] = True
            hits.append(True)
        else:
            hits.append(False)
    return hits


def evaluate_ap(model, domain: str, count: int, iou_threshold: float,
                rng, gen: GeneratorConfig) -> Optional[float]:
    """mAP over `count` freshly generated scenes of one domain.

    A prediction becomes a detection of its argmax class (skipping the
    no-object class) with that class's probability as confidence.
    """
    images, labels = gen_eval_batch(domain, count, rng, gen)
    num_classes = model.num_classes
    per_class_dets = {c: [] for c in range(1, num_classes + 1)}
    per_class_gts = {c: 0 for c in range(1, num_classes + 1)}
    gt_boxes = []
    for idx, gts in enumerate(labels):
        by_class = {}
        for g in gts:
            per_class_gts[g.class_id] += 1
            by_class.setdefault(g.class_id, []).append(g.box)
        gt_boxes.append(by_class)
    for idx in range(len(images)):
        for pred in model.predict(images[idx]):
            probs = pred.probs()
            cls = int(np.argmax(probs))
            if cls == 0:
                continue
            per_class_dets[cls].append((float(probs[cls]), idx, pred.box))

    total_gt = sum(per_class_gts.values())
    if total_gt == 0:
        return None
    aps = []
    for cls in range(1, num_classes + 1):
        if per_class_gts[cls] == 0:
            continue
        dets = sorted(per_class_dets[cls], key=lambda d: -d[0])
        taken = {}  # (image idx, gt idx) -> matched
        scores, hits = [], []
        for score, idx, box in dets:
            candidates = gt_boxes[idx].get(cls, [])
            best, best_iou = -1, iou_threshold
            for gi, gt_box in enumerate(candidates):
                if taken.get((idx, gi)):
                    continue
                iou = box_iou(box, gt_box)
                if iou >= best_iou:
                    best, best_iou = gi, iou
            if best >= 0:
                taken[(idx, best)] = True
            scores.append(score)
            hits.append(best >= 0)
        aps.append(average_precision(np.array(scores), np.array(hits), per_class_gts[cls]))
    return float(np.mean(aps)) if aps else None
