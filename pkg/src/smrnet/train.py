"""Training, evaluation and ablation loops shared by the CLI."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, TextIO

import numpy as np

from .boxes import BBox, Detection
from .config import RunConfig
from .detector import CLASS_NAMES, SGD, SMRNet, Target, build_model, infer_batch, training_step
from .metrics import EvalRecord, MetricReport, evaluate
from .synthgel import Dataset

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,loss,dataset,mean_iou,map"
EVAL_BATCH = 8

VARIANTS = (
    ("without SAFE-Net", {"attention_enabled": False}),
    ("without MSFF-Net", {"msff_enabled": False}),
    ("without RW-Net", {"rw_enabled": False}),
    ("Ours", {}),
)

# Reference cells for the ablation table (other data), shown only as labelled annotations.
REFERENCE_ABLATION = {
    ("without SAFE-Net", "A"): (85.22, 97.2), ("without SAFE-Net", "B"): (89.34, 97.1),
    ("without MSFF-Net", "A"): (86.32, 98.5), ("without MSFF-Net", "B"): (88.37, 98.3),
    ("without RW-Net", "A"): (90.11, 98.9), ("without RW-Net", "B"): (90.23, 99.1),
    ("Ours", "A"): (91.78, 99.3), ("Ours", "B"): (92.12, 99.4),
}
REFERENCE_NOTE = "NOT-COMPARABLE (different data)"


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is merged into its predecessor."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return [b for b in batches if len(b) >= 2]


def predict(model: SMRNet, images: np.ndarray) -> List[List[Detection]]:
    out: List[List[Detection]] = []
    for i in range(0, len(images), EVAL_BATCH):
        out.extend(infer_batch(model, images[i:i + EVAL_BATCH]))
    return out


def gt_echo(boxes: np.ndarray, labels: np.ndarray) -> List[List[Detection]]:
    return [[Detection(BBox.from_array(b), int(lab), 1.0)] for b, lab in zip(boxes, labels)]


def evaluate_split(dataset: Dataset, part: str = "eval", model: Optional[SMRNet] = None,
                   mode: str = "model") -> MetricReport:
    """Score one split. ``mode`` is model, oracle (echo GT) or empty (no predictions)."""
    images, boxes, labels = dataset.split(part)
    if len(images) == 0:
        raise ValueError(f"dataset {dataset.name} has an empty {part} split")
    if mode == "model":
        preds = predict(model, images)
    elif mode == "oracle":
        preds = gt_echo(boxes, labels)
    elif mode == "empty":
        preds = [[] for _ in range(len(images))]
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    records = [EvalRecord([BBox.from_array(b)], [int(lab)], p)
               for b, lab, p in zip(boxes, labels, preds)]
    return evaluate(records, dataset.name, CLASS_NAMES)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    reports: List[MetricReport]

    def csv_rows(self) -> List[str]:
        if not self.reports:
            return [f"{self.epoch},{self.loss!r},,,"]
        return [f"{self.epoch},{self.loss!r},{r.dataset},{r.mean_iou!r},{r.map!r}"
                for r in self.reports]


def train_model(cfg: RunConfig, datasets: Sequence[Dataset], log_fh: Optional[TextIO] = None,
                evaluate_each_epoch: bool = True,
                on_epoch: Optional[Callable[[EpochLog], None]] = None):
    """Train a fresh model on the union of the training splits.

    Returns the model and per-epoch logs. Raises NonFiniteError if any
    forward or backward pass produces NaN/Inf.
    """
    parts = [d.split("train") for d in datasets]
    images = np.concatenate([p[0] for p in parts])
    boxes = np.concatenate([p[1] for p in parts])
    labels = np.concatenate([p[2] for p in parts])
    if len(images) < 2:
        raise ValueError("need at least two training images")
    model = build_model(cfg)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.clip_norm)
    sample_rng = np.random.default_rng([cfg.seed, 1])
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    history: List[EpochLog] = []
    if log_fh is not None:
        log_fh.write(LOG_HEADER + "\n")
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in make_batches(len(images), cfg.batch_size, shuffle_rng):
            targets = [Target(boxes[i:i + 1], labels[i:i + 1]) for i in idx]
            result = training_step(model, images[idx], targets, opt, sample_rng)
            if result is not None:
                losses.append(result[0])
        reports = []
        if evaluate_each_epoch:
            reports = [evaluate_split(d, "eval", model) for d in datasets]
        entry = EpochLog(epoch, float(np.mean(losses)) if losses else float("nan"), reports)
        history.append(entry)
        if log_fh is not None:
            for row in entry.csv_rows():
                log_fh.write(row + "\n")
            log_fh.flush()
        if on_epoch is not None:
            on_epoch(entry)
    model.eval()
    return model, history


def run_ablation(cfg: RunConfig, datasets: Sequence[Dataset], seeds: Sequence[int],
                 progress: Optional[Callable[[str], None]] = None) -> List[dict]:
    """Train and score every variant for every seed; aggregate per (variant, snap type)."""
    rows = []
    for name, overrides in VARIANTS:
        per_type: Dict[str, List[MetricReport]] = {d.name: [] for d in datasets}
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed, **overrides)
            model, _ = train_model(run_cfg, datasets, evaluate_each_epoch=False)
            for d in datasets:
                per_type[d.name].append(evaluate_split(d, "eval", model))
            if progress is not None:
                progress(f"{name} seed={seed} done")
        for snap, reports in per_type.items():
            ious = np.array([r.mean_iou for r in reports]) * 100
            maps = np.array([r.map for r in reports]) * 100
            ref = REFERENCE_ABLATION.get((name, snap))
            rows.append({
                "variant": name, "snap_type": snap,
                "mean_iou_pct": float(ious.mean()), "mean_iou_std": float(ious.std()),
                "map_pct": float(maps.mean()), "map_std": float(maps.std()),
                "seeds": list(seeds),
                "reference_iou_pct": ref[0] if ref else None,
                "reference_map_pct": ref[1] if ref else None,
                "reference_note": REFERENCE_NOTE,
            })
    return rows


def ordering_summary(rows: Sequence[dict]) -> Dict[str, Dict[str, bool]]:
    """Whether the full model scores at least as well as each ablation, per snap type."""
    out: Dict[str, Dict[str, bool]] = {}
    full = {r["snap_type"]: r for r in rows if r["variant"] == "Ours"}
    for r in rows:
        if r["variant"] == "Ours" or r["snap_type"] not in full:
            continue
        f = full[r["snap_type"]]
        out.setdefault(r["snap_type"], {})[r["variant"]] = (
            f["mean_iou_pct"] >= r["mean_iou_pct"] and f["map_pct"] >= r["map_pct"])
    return out


ABLATION_CSV_HEADER = ("variant,snap_type,mean_iou_pct,mean_iou_std,map_pct,map_std,"
                       "reference_iou_pct,reference_map_pct,reference_note")


def ablation_csv(rows: Sequence[dict]) -> str:
    lines = [ABLATION_CSV_HEADER]
    for r in rows:
        lines.append(",".join([
            r["variant"], r["snap_type"], f"{r['mean_iou_pct']:.2f}", f"{r['mean_iou_std']:.2f}",
            f"{r['map_pct']:.2f}", f"{r['map_std']:.2f}",
            "" if r["reference_iou_pct"] is None else f"{r['reference_iou_pct']:.2f}",
            "" if r["reference_map_pct"] is None else f"{r['reference_map_pct']:.1f}",
            r["reference_note"]]))
    return "\n".join(lines) + "\n"
