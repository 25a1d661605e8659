"""Two-stage detector: fused features -> multi-kernel RPN -> RoI head."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .boxes import (BBox, Detection, anchor_array, decode, encode, iou_matrix, nms_indices)
from .config import RunConfig
from .fusion import ConcatFuse, Msff, RwNet
from .layers import Conv2d, Linear, Module, init_params
from .tensor import ShapeError, Tensor, make_result

log = logging.getLogger(__name__)

N_CLASSES = 3  # background, type A, type B
CLASS_NAMES = {1: "A", 2: "B"}
HEAD_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms_top_k: int
    nms_threshold: float
    post_nms_count: int
    min_size: float = 4.0


TRAIN_PROPOSALS = ProposalConfig(2000, 0.7, 256)
EVAL_PROPOSALS = ProposalConfig(1000, 0.7, 100)

RPN_BATCH, RPN_POS_FRACTION = 256, 0.5
RPN_POS_IOU, RPN_NEG_IOU = 0.7, 0.3
ROI_BATCH, ROI_FG_FRACTION, ROI_FG_IOU = 128, 0.25, 0.5
DET_NMS, DET_SCORE_FLOOR, DET_MAX = 0.3, 0.05, 20


# ---------------------------------------------------------------- losses

def smooth_l1_value(x, beta: float = 1.0):
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Summed smooth-L1 distance between ``pred`` and a constant target."""
    diff = pred.data - target.astype(pred.dtype)
    out = np.asarray(smooth_l1_value(diff, beta).sum(), dtype=pred.dtype).reshape(1)

    def bw(g):
        return (g.reshape(()) * np.where(np.abs(diff) < beta, diff / beta, np.sign(diff)),)

    return make_result(out, (pred,), bw, "smooth_l1")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    x = logits.data
    t = targets.astype(x.dtype)
    m = x.size
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / m
    e = np.exp(-np.abs(x))
    p = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g.reshape(()) * (p - t) / m,)

    return make_result(np.asarray(loss, dtype=x.dtype).reshape(1), (logits,), bw, "bce")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows of ``logits``."""
    x = logits.data
    r = x.shape[0]
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(r), labels].sum() / r
    p = np.exp(logp)

    def bw(g):
        d = p.copy()
        d[np.arange(r), labels] -= 1
        return (g.reshape(()) * d / r,)

    return make_result(np.asarray(loss, dtype=x.dtype).reshape(1), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- RPN

class RpnHead(Module):
    """Parallel 5x5 / 3x3 / 1x1 convs combined, then objectness and delta convs."""

    def __init__(self, cf: int, num_anchors: int, combine: str = "sum"):
        super().__init__()
        self.conv5 = Conv2d(cf, cf, 5, padding=2)
        self.conv3 = Conv2d(cf, cf, 3, padding=1)
        self.conv1 = Conv2d(cf, cf, 1)
        self.combine = combine
        self.merge = Conv2d(3 * cf, cf, 1) if combine == "concat" else None
        self.objectness = Conv2d(cf, num_anchors, 1)
        self.deltas = Conv2d(cf, 4 * num_anchors, 1)

    def forward(self, fused: Tensor) -> Tuple[Tensor, Tensor]:
        branches = [self.conv5(fused), self.conv3(fused), self.conv1(fused)]
        if self.merge is not None:
            h = self.merge(T.concat(branches, axis=1))
        else:
            h = T.add(T.add(branches[0], branches[1]), branches[2])
        h = T.relu(h)
        return self.objectness(h), self.deltas(h)


def rpn_forward(head: RpnHead, fused: Tensor) -> Tuple[Tensor, Tensor]:
    return head(fused)


def flatten_rpn(logits: np.ndarray, deltas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-image [A,h,w] logits and [4A,h,w] deltas in anchor order (row, col, anchor)."""
    a, h, w = logits.shape
    scores = logits.transpose(1, 2, 0).reshape(-1)
    d = deltas.reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    return scores, d


def select_proposals(logits: np.ndarray, deltas: np.ndarray, anchors: np.ndarray,
                     cfg: ProposalConfig, image_size: Tuple[int, int]
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """Decode, clip, drop small boxes, top-k, NMS, truncate. Returns (boxes, scores)."""
    scores, d = flatten_rpn(logits, deltas)
    boxes = decode(d, anchors, image_size=image_size)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    valid = np.flatnonzero((w >= cfg.min_size) & (h >= cfg.min_size))
    order = valid[np.argsort(-scores[valid], kind="stable")][:cfg.pre_nms_top_k]
    keep = nms_indices(boxes[order], scores[order], cfg.nms_threshold, cfg.post_nms_count)
    idx = order[keep]
    return boxes[idx], scores[idx]


# ---------------------------------------------------------------- RoI pooling

def _roi_bins(rois: np.ndarray, stride: int, h: int, w: int, out: int):
    x1 = np.floor(rois[:, 0] / stride).astype(np.int64)
    y1 = np.floor(rois[:, 1] / stride).astype(np.int64)
    x2 = np.ceil(rois[:, 2] / stride).astype(np.int64)
    y2 = np.ceil(rois[:, 3] / stride).astype(np.int64)
    x2 = np.maximum(x2, x1 + 1)
    y2 = np.maximum(y2, y1 + 1)
    if ((x2 <= 0) | (y2 <= 0) | (x1 >= w) | (y1 >= h)).any():
        raise ShapeError("roi lies fully outside the feature map")
    p = np.arange(out)

    def edges(start, end, limit):
        length = (end - start).astype(np.float64)[:, None]
        lo = start[:, None] + np.floor(p[None, :] * length / out).astype(np.int64)
        hi = start[:, None] + np.ceil((p[None, :] + 1) * length / out).astype(np.int64)
        return np.clip(lo, 0, limit), np.clip(hi, 0, limit)

    hs, he = edges(y1, y2, h)
    ws, we = edges(x1, x2, w)
    return hs, he, ws, we


def _window_max_table(x: np.ndarray, kh: int, kw: int) -> Tuple[np.ndarray, np.ndarray]:
    """Max and flat source index (h*W + w) of every kh x kw window in x [N,C,H,W]."""
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    sn, sc, sh, sw = x.strides
    win = as_strided(x, shape=(n, c, ho, wo, kh, kw), strides=(sn, sc, sh, sw, sh, sw),
                     writeable=False).reshape(n, c, ho, wo, kh * kw)
    arg = win.argmax(axis=-1)
    mx = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    src = (np.arange(ho)[:, None] + arg // kw) * w + np.arange(wo)[None, :] + arg % kw
    return mx, src


def roi_pool_batch(feat: Tensor, rois: np.ndarray, batch_index: np.ndarray, stride: int,
                   out: int = 7) -> Tensor:
    """Max RoI pooling of image-space ``rois`` [R,4] into [R,C,out,out].

    Bin edges are quantised with floor/ceil on the feature grid; empty bins
    produce 0. Ties go to the first cell in row-major order.
    """
    n, c, h, w = feat.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(batch_index, dtype=np.int64)
    r = rois.shape[0]
    hs, he, ws, we = _roi_bins(rois, stride, h, w, out)
    bh = np.broadcast_to((he - hs)[:, :, None], (r, out, out))
    bw_ = np.broadcast_to((we - ws)[:, None, :], (r, out, out))
    y0 = np.broadcast_to(hs[:, :, None], (r, out, out))
    x0 = np.broadcast_to(ws[:, None, :], (r, out, out))
    bb = np.broadcast_to(b[:, None, None], (r, out, out))
    pooled = np.zeros((r, out, out, c), dtype=feat.dtype)
    source = np.full((r, out, out, c), -1, dtype=np.int64)
    x = np.ascontiguousarray(feat.data)
    key = bh * (w + 1) + bw_
    for k in np.unique(key):
        kh, kw = divmod(int(k), w + 1)
        if kh <= 0 or kw <= 0:
            continue
        sel = key == k
        mx, src = _window_max_table(x, kh, kw)
        bi, yi, xi = bb[sel], y0[sel], x0[sel]
        pooled[sel] = mx[bi, :, yi, xi]
        source[sel] = (bi[:, None] * c + np.arange(c)) * (h * w) + src[bi, :, yi, xi]
    result = np.ascontiguousarray(pooled.transpose(0, 3, 1, 2))
    live = source >= 0
    flat = source[live]

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)[live]
        acc = np.bincount(flat, weights=gt.astype(np.float64), minlength=n * c * h * w)
        return (acc.reshape(n, c, h, w).astype(feat.dtype),)

    return make_result(result, (feat,), bw, "roi_pool")


def roi_pool(fused: Tensor, roi: BBox, stride: int = 8, out: int = 7, image: int = 0) -> Tensor:
    """Pool a single roi from image ``image`` of ``fused``; returns [C,out,out]."""
    pooled = roi_pool_batch(fused, roi.as_array()[None], np.array([image]), stride, out)
    return T.reshape(pooled, pooled.shape[1:])


# ---------------------------------------------------------------- detection head

class DetectionHead(Module):
    def __init__(self, cf: int, hidden: int, n_classes: int = N_CLASSES, pool: int = 7):
        super().__init__()
        self.fc1 = Linear(cf * pool * pool, hidden)
        self.fc2 = Linear(hidden, hidden)
        self.cls = Linear(hidden, n_classes)
        self.reg = Linear(hidden, 4 * n_classes)

    def forward(self, pooled: Tensor) -> Tuple[Tensor, Tensor]:
        x = T.reshape(pooled, (pooled.shape[0], -1))
        x = T.relu(self.fc2(T.relu(self.fc1(x))))
        return self.cls(x), self.reg(x)


def detection_head(pooled: Tensor, params: DetectionHead) -> Tuple[Tensor, Tensor]:
    return params(pooled)


# ---------------------------------------------------------------- full model

class SMRNet(Module):
    """Backbone, multi-scale fusion (or single-scale F3 path), RPN and RoI head."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        bcfg = BackboneConfig.preset(cfg.preset, attention_enabled=cfg.attention_enabled,
                                     per_block_attention=cfg.per_block_attention,
                                     reduction=cfg.reduction)
        self.backbone = Backbone(bcfg)
        cf = cfg.cf
        self.msff: Optional[Msff] = None
        self.fuse = None
        self.single: Optional[Conv2d] = None
        if cfg.msff_enabled:
            self.msff = Msff(bcfg.channels[2:], cf, tuple(cfg.dilations), cfg.reduction)
            self.fuse = RwNet(cf) if cfg.rw_enabled else ConcatFuse(cf)
            self.stride = 8
        else:
            self.single = Conv2d(bcfg.channels[4], cf, 1)
            self.stride = 32
        self.num_anchors = len(cfg.anchor_scales) * len(cfg.anchor_ratios)
        self.rpn = RpnHead(cf, self.num_anchors, cfg.rpn_combine)
        self.head = DetectionHead(cf, cfg.head_hidden)
        grid = cfg.image_size // self.stride
        self.anchors = anchor_array(grid, grid, self.stride, cfg.anchor_scales, cfg.anchor_ratios)

    def initialize(self, rng: np.random.Generator) -> "SMRNet":
        init_params(self, rng)
        # Small output layers keep the first steps well-conditioned.
        for layer in (self.rpn.objectness, self.rpn.deltas):
            layer.weight.data *= 0.01
        self.head.cls.weight.data *= 0.01
        self.head.reg.weight.data *= 0.001
        return self

    def features(self, images: Tensor) -> Tensor:
        pyr = self.backbone(images)
        if self.msff is None:
            return self.single(pyr.f3)
        g1, g2, g3 = self.msff(pyr)
        return self.fuse(g1, g2, g3)

    def forward(self, images: Tensor):
        fused = self.features(images)
        logits, deltas = self.rpn(fused)
        return fused, logits, deltas


def build_model(cfg: RunConfig, seed: Optional[int] = None) -> SMRNet:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return SMRNet(cfg).initialize(rng)


# ---------------------------------------------------------------- training

@dataclass
class Target:
    boxes: np.ndarray  # [G,4]
    labels: np.ndarray  # [G] in {1,2}


def label_anchors(anchors: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Anchor labels (1 pos, 0 neg, -1 ignore) and index of the matched GT."""
    ious = iou_matrix(anchors, gt)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels = np.full(len(anchors), -1, dtype=np.int64)
    labels[best <= RPN_NEG_IOU] = 0
    labels[best >= RPN_POS_IOU] = 1
    gt_best = ious.max(axis=0)
    for g in range(gt.shape[0]):
        if gt_best[g] > 0:
            hits = np.flatnonzero(ious[:, g] == gt_best[g])
            labels[hits] = 1
            matched[hits] = g
    return labels, matched


def sample_labels(labels: np.ndarray, batch: int, pos_fraction: float,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(batch * pos_fraction))
    pos = np.sort(rng.choice(pos, n_pos, replace=False)) if n_pos < len(pos) else pos
    n_neg = min(len(neg), batch - len(pos))
    neg = np.sort(rng.choice(neg, n_neg, replace=False)) if n_neg < len(neg) else neg
    return pos, neg


def smr_losses(model: SMRNet, images: Tensor, targets: Sequence[Target],
               rng: np.random.Generator) -> Optional[Tuple[Tensor, dict]]:
    """Joint RPN + head loss for one batch. Images without GT are ignored."""
    n = images.shape[0]
    size = images.shape[2:]
    fused, logits, deltas = model(images)
    a = model.num_anchors
    k = len(model.anchors)
    h, w = logits.shape[2:]
    flat_logits = T.reshape(T.transpose(logits, (0, 2, 3, 1)), (n * k,))
    flat_deltas = T.reshape(T.transpose(T.reshape(deltas, (n, a, 4, h, w)), (0, 3, 4, 1, 2)),
                            (n * k, 4))

    cls_idx, cls_tgt, pos_idx, pos_tgt = [], [], [], []
    rois, roi_img, roi_labels, roi_targets = [], [], [], []
    for i in range(n):
        tg = targets[i]
        if tg.boxes.size == 0:
            log.warning("image %d has no ground truth; skipped", i)
            continue
        labels, matched = label_anchors(model.anchors, tg.boxes)
        pos, neg = sample_labels(labels, RPN_BATCH, RPN_POS_FRACTION, rng)
        cls_idx += [i * k + pos, i * k + neg]
        cls_tgt += [np.ones(len(pos)), np.zeros(len(neg))]
        pos_idx.append(i * k + pos)
        pos_tgt.append(encode(tg.boxes[matched[pos]], model.anchors[pos]))

        props, _ = select_proposals(logits.data[i], deltas.data[i], model.anchors,
                                    TRAIN_PROPOSALS, size)
        cand = np.concatenate([props, tg.boxes], axis=0)
        ious = iou_matrix(cand, tg.boxes)
        best = ious.max(axis=1)
        assign = ious.argmax(axis=1)
        fg = np.flatnonzero(best >= ROI_FG_IOU)
        bg = np.flatnonzero(best < ROI_FG_IOU)
        n_fg = min(len(fg), int(ROI_BATCH * ROI_FG_FRACTION))
        if n_fg < len(fg):
            fg = np.sort(rng.choice(fg, n_fg, replace=False))
        n_bg = min(len(bg), ROI_BATCH - len(fg))
        if n_bg < len(bg):
            bg = np.sort(rng.choice(bg, n_bg, replace=False))
        sel = np.concatenate([fg, bg])
        rois.append(cand[sel])
        roi_img.append(np.full(len(sel), i))
        lab = np.zeros(len(sel), dtype=np.int64)
        lab[:len(fg)] = tg.labels[assign[fg]]
        roi_labels.append(lab)
        tgt = np.zeros((len(sel), 4))
        if len(fg):
            tgt[:len(fg)] = encode(tg.boxes[assign[fg]], cand[fg], HEAD_BOX_WEIGHTS)
        roi_targets.append(tgt)

    if not cls_idx:
        return None
    cls_idx = np.concatenate(cls_idx)
    rpn_cls = bce_with_logits(T.gather(flat_logits, cls_idx), np.concatenate(cls_tgt))
    pos_idx = np.concatenate(pos_idx)
    n_pos = max(len(pos_idx), 1)
    rpn_reg = T.scale(smooth_l1(T.gather(flat_deltas, pos_idx), np.concatenate(pos_tgt)),
                      1.0 / n_pos)

    rois = np.concatenate(rois)
    roi_labels = np.concatenate(roi_labels)
    roi_targets = np.concatenate(roi_targets)
    pooled = roi_pool_batch(fused, rois, np.concatenate(roi_img), model.stride)
    cls_logits, reg = model.head(pooled)
    head_cls = cross_entropy(cls_logits, roi_labels)
    fg_rows = np.flatnonzero(roi_labels > 0)
    reg_rows = T.reshape(reg, (reg.shape[0] * N_CLASSES, 4))
    if len(fg_rows):
        picked = T.gather(reg_rows, fg_rows * N_CLASSES + roi_labels[fg_rows])
        head_reg = T.scale(smooth_l1(picked, roi_targets[fg_rows]), 1.0 / len(fg_rows))
    else:
        head_reg = T.scale(smooth_l1(T.gather(reg_rows, [0]), reg_rows.data[:1]), 0.0)
    total = T.add(T.add(rpn_cls, rpn_reg), T.add(head_cls, head_reg))
    parts = {"rpn_cls": rpn_cls.item(), "rpn_reg": rpn_reg.item(),
             "head_cls": head_cls.item(), "head_reg": head_reg.item()}
    return total, parts


class SGD:
    """Gradient descent with heavy-ball momentum and global-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: float = 10.0):
        self.params = list(params)
        self.lr, self.momentum, self.clip_norm = lr, momentum, clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                             for p in self.params if p.grad is not None))

    def step(self) -> float:
        norm = self.grad_norm()
        factor = min(1.0, self.clip_norm / (norm + 1e-12))
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += factor * p.grad
            p.data -= self.lr * v
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def training_step(model: SMRNet, images: np.ndarray, targets: Sequence[Target], opt: SGD,
                  rng: np.random.Generator) -> Optional[Tuple[float, dict]]:
    """One optimisation step; returns (loss, loss parts) or None if nothing to learn."""
    model.train()
    opt.zero_grad()
    x = Tensor(np.asarray(images, dtype=np.float32))
    result = smr_losses(model, x, targets, rng)
    if result is None:
        return None
    loss, parts = result
    value = loss.item()
    loss.backward()
    parts["grad_norm"] = opt.step()
    return value, parts


# ---------------------------------------------------------------- inference

def postprocess(probs: np.ndarray, reg: np.ndarray, proposals: np.ndarray,
                image_size: Tuple[int, int]) -> List[Detection]:
    dets: List[Detection] = []
    reg = reg.reshape(len(proposals), N_CLASSES, 4)
    for c in range(1, N_CLASSES):
        scores = probs[:, c]
        keep = np.flatnonzero(scores >= DET_SCORE_FLOOR)
        if not len(keep):
            continue
        boxes = decode(reg[keep, c], proposals[keep], HEAD_BOX_WEIGHTS, image_size)
        ok = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1)
        keep, boxes = keep[ok], boxes[ok]
        for j in nms_indices(boxes, scores[keep], DET_NMS):
            dets.append(Detection(BBox.from_array(boxes[j]), c, float(scores[keep[j]])))
    dets.sort(key=lambda d: -d.score)
    return dets[:DET_MAX]


def infer_batch(model: SMRNet, images: np.ndarray) -> List[List[Detection]]:
    """Detections for a stack of images [N,1,H,W] using running BN statistics."""
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    size = images.shape[2:]
    with T.no_grad():
        fused, logits, deltas = model(Tensor(images))
        props, owners = [], []
        for i in range(images.shape[0]):
            p, _ = select_proposals(logits.data[i], deltas.data[i], model.anchors,
                                    EVAL_PROPOSALS, size)
            props.append(p)
            owners.append(np.full(len(p), i))
        all_props = np.concatenate(props)
        out: List[List[Detection]] = [[] for _ in range(images.shape[0])]
        if not len(all_props):
            return out
        pooled = roi_pool_batch(fused, all_props, np.concatenate(owners), model.stride)
        cls_logits, reg = model.head(pooled)
    probs = T.softmax(Tensor(cls_logits.data.astype(np.float64)), axis=1).data
    start = 0
    for i, p in enumerate(props):
        stop = start + len(p)
        if len(p):
            out[i] = postprocess(probs[start:stop], reg.data[start:stop].astype(np.float64), p,
                                 size)
        start = stop
    return out


def infer(model: SMRNet, image: np.ndarray) -> List[Detection]:
    return infer_batch(model, np.asarray(image)[None] if np.ndim(image) == 3 else image)[0]
