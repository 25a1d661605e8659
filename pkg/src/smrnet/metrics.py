"""Localisation and recognition metrics: mean best-candidate IoU and VOC-style mAP."""

from __future__ import annotations

import warnings
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .boxes import BBox, Detection, iou

MAP_IOU_THRESHOLD = 0.5
INTERPOLATION = "all-points"


@dataclass
class EvalRecord:
    gt_boxes: List[BBox]
    gt_labels: List[int]
    detections: List[Detection]

    def ranked(self) -> List[Detection]:
        return sorted(self.detections, key=lambda d: -d.score)


@dataclass
class MetricReport:
    dataset: str
    mean_iou: float
    map: float
    ap: Dict[str, Optional[float]] = field(default_factory=dict)
    n: int = 0
    iou_threshold: float = MAP_IOU_THRESHOLD
    interpolation: str = INTERPOLATION

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"
        return ",".join([self.dataset, fmt(self.mean_iou), fmt(self.map),
                         fmt(self.ap.get("A")), fmt(self.ap.get("B")), str(self.n)])


CSV_HEADER = "dataset,mean_iou,map,ap_A,ap_B,n"


def mean_best_iou(records: Sequence[EvalRecord]) -> float:
    """Average IoU between each image's top-scoring detection and its single GT box."""
    if not records:
        raise ValueError("mean_best_iou needs at least one record")
    total = 0.0
    for r in records:
        if len(r.gt_boxes) != 1:
            raise ValueError(f"expected exactly one ground-truth box, got {len(r.gt_boxes)}")
        if r.detections:
            total += iou(r.ranked()[0].box, r.gt_boxes[0])
    return total / len(records)


def _match(records: Sequence[EvalRecord], class_id: int, iou_thresh: float):
    """TP flags for every prediction of ``class_id`` in descending score order."""
    preds = []
    for img, r in enumerate(records):
        for k, d in enumerate(r.detections):
            if d.class_id == class_id:
                preds.append((-d.score, img, k, d))
    preds.sort(key=lambda t: (t[0], t[1], t[2]))
    used = [[False] * len(r.gt_boxes) for r in records]
    tp = np.zeros(len(preds), dtype=bool)
    for i, (_, img, _, d) in enumerate(preds):
        r = records[img]
        best, best_j = -1.0, -1
        for j, (g, lab) in enumerate(zip(r.gt_boxes, r.gt_labels)):
            if lab != class_id or used[img][j]:
                continue
            v = iou(d.box, g)
            if v >= iou_thresh and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[i] = True
    return tp


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated area under the precision/recall curve.

    Evaluated in exact rational arithmetic and rounded once, so the result
    does not depend on summation order.
    """
    if len(tp) == 0:
        return 0.0
    recall, precision = [], []
    hits = 0
    for k, flag in enumerate(tp, 1):
        hits += bool(flag)
        recall.append(Fraction(hits, n_gt))
        precision.append(Fraction(hits, k))
    # precision envelope: best precision at any recall >= the current one
    for k in range(len(precision) - 2, -1, -1):
        precision[k] = max(precision[k], precision[k + 1])
    area = Fraction(0)
    prev = Fraction(0)
    for r, p in zip(recall, precision):
        if r > prev:
            area += (r - prev) * p
            prev = r
    return float(area)


def count_gt(records: Sequence[EvalRecord], class_id: int) -> int:
    return sum(sum(1 for lab in r.gt_labels if lab == class_id) for r in records)


def average_precision(records: Sequence[EvalRecord], class_id: int,
                      iou_thresh: float = MAP_IOU_THRESHOLD) -> Optional[float]:
    """AP of one class; None (with a warning) when the class has no GT instances."""
    if not records:
        raise ValueError("average_precision needs at least one record")
    n_gt = count_gt(records, class_id)
    if n_gt == 0:
        warnings.warn(f"class {class_id} has no ground truth; AP undefined", RuntimeWarning)
        return None
    return ap_from_flags(_match(records, class_id, iou_thresh), n_gt)


def mean_ap(records: Sequence[EvalRecord], classes: Sequence[int],
            iou_thresh: float = MAP_IOU_THRESHOLD) -> float:
    aps = [average_precision(records, c, iou_thresh) for c in classes]
    defined = [a for a in aps if a is not None]
    if not defined:
        raise ValueError("no class has ground truth; mAP undefined")
    return float(np.mean(defined))


def evaluate(records: Sequence[EvalRecord], dataset: str,
             class_names: Dict[int, str]) -> MetricReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        aps = {name: average_precision(records, cid) for cid, name in class_names.items()}
    defined = [a for a in aps.values() if a is not None]
    if not defined:
        raise ValueError("no class has ground truth; mAP undefined")
    return MetricReport(dataset=dataset, mean_iou=mean_best_iou(records),
                        map=float(np.mean(defined)), ap=aps, n=len(records))
