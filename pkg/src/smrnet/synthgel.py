"""Synthetic gel-sensor snap images with exact bounding-box annotations.

Contact regions render bright, a thin band around the object's outline
renders dark, and everything else sits at a mid-grey level. Two snap
geometries are provided: type A is a rectangular body with a slotted
cantilever end, type B is an annular ring around a central boss.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .boxes import BBox

GENERATOR_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
SNAP_TYPES = ("A", "B")
CLASS_IDS = {"A": 1, "B": 2}
MARGIN = 4
MAX_TRIES = 100

# Membrane properties of the physical sensor; carried as metadata only.
PHYSICAL_CONSTANTS = {
    "material_model": "Neo-Hookean",
    "shear_modulus_mpa": 0.145,
    "substrate_mm": [40, 40, 4],
    "resolution_um": 5,
}


@dataclass
class GelRenderParams:
    size: int = 96
    contact: float = 0.80
    edge: float = 0.20
    background: float = 0.50
    band_width: int = 2
    noise_sigma: float = 0.02
    min_span: float = 0.20
    max_span: float = 0.60

    def __post_init__(self):
        for name in ("contact", "edge", "background"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} brightness {v} outside [0, 1]")


@dataclass
class SnapShape:
    type: str
    cx: float
    cy: float
    theta: float
    scale: float


@dataclass
class Sample:
    image: np.ndarray  # [1,H,W] float32 in [0,1]
    gt_box: BBox
    gt_class: str
    seed: int
    shape: Optional[SnapShape] = None
    mask: Optional[np.ndarray] = field(default=None, repr=False)


def silhouette(shape: SnapShape, size: int) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside the snap."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - shape.cx, ys - shape.cy
    c, s = np.cos(shape.theta), np.sin(shape.theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    k = shape.scale
    if shape.type == "A":
        half_len, half_wid = 0.5 * k, 0.3 * k
        body = (np.abs(u) <= half_len) & (np.abs(v) <= half_wid)
        slot = (u >= half_len - 0.35 * k) & (np.abs(v) <= 0.08 * k)
        return body & ~slot
    if shape.type == "B":
        r = np.hypot(u, v)
        outer = 0.5 * k
        return ((r <= outer) & (r >= 0.62 * outer)) | (r <= 0.3 * outer)
    raise ValueError(f"unknown snap type {shape.type!r}")


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy > radius * radius or (dx == 0 and dy == 0):
                continue
            out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] |= \
                mask[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def tight_box(mask: np.ndarray) -> BBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def _outer_radius(snap_type: str, scale: float) -> float:
    if snap_type == "A":
        return 0.5 * scale * np.hypot(1.0, 0.6)
    return 0.5 * scale


def render_sample(snap_type: str, rng: np.random.Generator,
                  params: Optional[GelRenderParams] = None, seed: int = -1) -> Sample:
    """Draw a pose, rasterise the snap and shade it like a gel contact image."""
    p = params or GelRenderParams()
    n = p.size
    for _ in range(MAX_TRIES):
        scale = rng.uniform(p.min_span, p.max_span) * n
        theta = rng.uniform(0.0, 2 * np.pi)
        reach = _outer_radius(snap_type, scale) + MARGIN
        if 2 * reach >= n:
            continue
        cx = rng.uniform(reach, n - reach)
        cy = rng.uniform(reach, n - reach)
        shape = SnapShape(snap_type, cx, cy, theta, scale)
        mask = silhouette(shape, n)
        if not mask.any():
            continue
        box = tight_box(mask)
        span = box.width / n
        inside = min(box.x1, box.y1) >= MARGIN and max(box.x2, box.y2) <= n - MARGIN
        if inside and p.min_span <= span <= p.max_span:
            break
    else:
        raise RuntimeError(f"no valid placement for type {snap_type} after {MAX_TRIES} tries")
    band = dilate(mask, p.band_width) & ~mask
    img = np.full((n, n), p.background, dtype=np.float64)
    img[band] = p.edge
    img[mask] = p.contact
    if p.noise_sigma > 0:
        img += rng.normal(0.0, p.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img[None], box, snap_type, seed, shape, mask)


def sample_seed(seed: int, snap_type: str, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{snap_type}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def image_filename(snap_type: str, index: int) -> str:
    return f"{snap_type}_{index:05d}.png"


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


@dataclass
class Manifest:
    path: str
    header: dict
    records: List[dict]

    @property
    def digest(self) -> str:
        with open(self.path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()

    @property
    def n_train(self) -> int:
        return int(self.header.get("n_train", len(self.records) * 4 // 5))


def generate_dataset(snap_type: str, n: int, seed: int, out_dir: str,
                     params: Optional[GelRenderParams] = None) -> Manifest:
    """Render ``n`` samples to PNG files plus a JSON-lines manifest.

    The first 80% of indices form the training split, the rest evaluation.
    """
    if snap_type not in SNAP_TYPES:
        raise ValueError(f"snap type must be one of {SNAP_TYPES}, got {snap_type!r}")
    if n < 1:
        raise ValueError("dataset needs at least one sample")
    p = params or GelRenderParams()
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i in range(n):
        s = sample_seed(seed, snap_type, i)
        sample = render_sample(snap_type, np.random.default_rng(s), p, seed=s)
        name = image_filename(snap_type, i)
        Image.fromarray(to_uint8(sample.image[0])).save(os.path.join(out_dir, name))
        b = sample.gt_box
        records.append({"file": name, "type": snap_type, "x1": int(b.x1), "y1": int(b.y1),
                        "x2": int(b.x2), "y2": int(b.y2), "seed": s})
    header = {"generator": "smrnet.synthgel", "version": GENERATOR_VERSION, "type": snap_type,
              "count": n, "seed": seed, "n_train": n * 4 // 5, "params": asdict(p),
              "physical_constants": PHYSICAL_CONSTANTS}
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return Manifest(path, header, records)


def read_manifest(data_dir: str) -> Manifest:
    path = os.path.join(data_dir, MANIFEST_NAME)
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines:
        raise ValueError(f"empty manifest {path}")
    header, records = lines[0], lines[1:]
    for r in records:
        missing = {"file", "type", "x1", "y1", "x2", "y2"} - set(r)
        if missing:
            raise ValueError(f"manifest record missing fields {sorted(missing)}: {r}")
    return Manifest(path, header, records)


@dataclass
class Dataset:
    """Images and single-object annotations loaded from a manifest directory."""

    name: str
    manifest: Manifest
    images: np.ndarray  # [N,1,H,W]
    boxes: np.ndarray  # [N,4]
    labels: np.ndarray  # [N] class ids

    def split(self, part: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = self.manifest.n_train
        sl = slice(0, k) if part == "train" else slice(k, None)
        return self.images[sl], self.boxes[sl], self.labels[sl]


def load_dataset(data_dir: str) -> Dataset:
    manifest = read_manifest(data_dir)
    imgs, boxes, labels = [], [], []
    for r in manifest.records:
        with Image.open(os.path.join(data_dir, r["file"])) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        imgs.append(arr[None])
        boxes.append([r["x1"], r["y1"], r["x2"], r["y2"]])
        labels.append(CLASS_IDS[r["type"]])
    name = manifest.header.get("type") or os.path.basename(os.path.normpath(data_dir))
    return Dataset(str(name), manifest, np.stack(imgs), np.asarray(boxes, dtype=np.float64),
                   np.asarray(labels, dtype=np.int64))

