"""Axis-aligned box geometry: IoU, anchor grids, delta coding and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

BBOX_CLIP = math.log(1000.0 / 16)


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def clip(self, width: float, height: float) -> "BBox":
        return BBox(min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
                    min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height))

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float


class Anchor(NamedTuple):
    box: BBox
    cell: int
    scale_index: int
    ratio_index: int


def iou(p: BBox, q: BBox) -> float:
    """Intersection area over union area."""
    if p.width <= 0 or p.height <= 0 or q.width <= 0 or q.height <= 0:
        raise DegenerateBoxError(f"zero-area box in iou: {p}, {q}")
    iw = min(p.x2, q.x2) - max(p.x1, q.x1)
    ih = min(p.y2, q.y2) - max(p.y1, q.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (p.area + q.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N,4] and [M,4] box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def anchor_array(grid_h: int, grid_w: int, stride: int, scales: Sequence[float],
                 ratios: Sequence[float]) -> np.ndarray:
    """[grid_h*grid_w*A, 4] anchors ordered by (row, col, scale, ratio)."""
    shapes = []
    for s in scales:
        for r in ratios:
            shapes.append((s * math.sqrt(r), s / math.sqrt(r)))
    wh = np.array(shapes, dtype=np.float64)
    ys = (np.arange(grid_h) + 0.5) * stride
    xs = (np.arange(grid_w) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    c = np.repeat(centers, len(wh), axis=0)
    s = np.tile(wh, (len(centers), 1))
    return np.concatenate([c - s / 2, c + s / 2], axis=1)


def generate_anchors(grid_h: int, grid_w: int, stride: int, scales: Sequence[float],
                     ratios: Sequence[float]) -> List[Anchor]:
    arr = anchor_array(grid_h, grid_w, stride, scales, ratios)
    per_cell = len(scales) * len(ratios)
    out = []
    for k, row in enumerate(arr):
        a = k % per_cell
        out.append(Anchor(BBox.from_array(row), k // per_cell, a // len(ratios), a % len(ratios)))
    return out


def encode(gt: np.ndarray, anchors: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Regression targets (tx, ty, tw, th) of ``gt`` boxes relative to ``anchors``."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    if (wa <= 0).any() or (ha <= 0).any():
        raise DegenerateBoxError("anchor with non-positive extent")
    xa = anchors[:, 0] + 0.5 * wa
    ya = anchors[:, 1] + 0.5 * ha
    w = gt[:, 2] - gt[:, 0]
    h = gt[:, 3] - gt[:, 1]
    x = gt[:, 0] + 0.5 * w
    y = gt[:, 1] + 0.5 * h
    wx, wy, ww, wh = weights
    return np.stack([wx * (x - xa) / wa, wy * (y - ya) / ha,
                     ww * np.log(w / wa), wh * np.log(h / ha)], axis=1)


def decode(deltas: np.ndarray, anchors: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0),
           image_size: Tuple[int, int] = None) -> np.ndarray:
    """Inverse of :func:`encode`; clips to ``image_size`` = (H, W) when given."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    if (wa <= 0).any() or (ha <= 0).any():
        raise DegenerateBoxError("anchor with non-positive extent")
    xa = anchors[:, 0] + 0.5 * wa
    ya = anchors[:, 1] + 0.5 * ha
    wx, wy, ww, wh = weights
    x = deltas[:, 0] / wx * wa + xa
    y = deltas[:, 1] / wy * ha + ya
    w = np.exp(np.minimum(deltas[:, 2] / ww, BBOX_CLIP)) * wa
    h = np.exp(np.minimum(deltas[:, 3] / wh, BBOX_CLIP)) * ha
    out = np.stack([x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], axis=1)
    if image_size is not None:
        return clip_boxes(out, image_size)
    return out


def clip_boxes(boxes: np.ndarray, image_size: Tuple[int, int]) -> np.ndarray:
    h, w = image_size
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, h)
    return out


def encode_box(gt: BBox, anchor: BBox, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    return encode(gt.as_array(), anchor.as_array(), weights)[0]


def decode_box(delta, anchor: BBox, weights=(1.0, 1.0, 1.0, 1.0),
               image_size: Tuple[int, int] = None) -> BBox:
    return BBox.from_array(decode(delta, anchor.as_array(), weights, image_size)[0])


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy NMS; returns kept indices ordered by (score desc, index asc)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    x1, y1, x2, y2 = boxes[order].T
    area = (x2 - x1) * (y2 - y1)
    limit = len(order) if max_keep is None else max_keep
    keep = []
    remaining = np.arange(len(order))
    while remaining.size and len(keep) < limit:
        i = remaining[0]
        keep.append(order[i])
        rest = remaining[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.maximum(iw, 0) * np.maximum(ih, 0)
        union = np.maximum(area[i] + area[rest] - inter, 1e-12)
        remaining = rest[inter / union <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold)]
