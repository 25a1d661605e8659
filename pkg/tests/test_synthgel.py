import json
import os

import numpy as np
import pytest
from PIL import Image

from smrnet.synthgel import (MARGIN, GelRenderParams, SnapShape, generate_dataset, load_dataset,
                             read_manifest, render_sample, sample_seed, silhouette, tight_box)


def render(t, i, seed=11, **params):
    return render_sample(t, np.random.default_rng(sample_seed(seed, t, i)),
                         GelRenderParams(**params))


def compactness(img, level=0.65):
    """4*pi*area/perimeter^2 of the bright contact region; a ring scores far lower."""
    m = img[0] > level
    inner = m.copy()
    inner[1:-1, 1:-1] = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return 4 * np.pi * m.sum() / np.count_nonzero(m & ~inner) ** 2


def test_noise_free_levels():
    for t in "AB":
        s = render(t, 0, noise_sigma=0.0)
        assert set(np.unique(s.image).tolist()) == {np.float32(0.2), np.float32(0.5), np.float32(0.8)}


def test_same_seed_is_bit_identical():
    a, b = render("A", 3), render("A", 3)
    assert a.image.tobytes() == b.image.tobytes() and a.gt_box == b.gt_box


@pytest.mark.parametrize("t", ["A", "B"])
def test_box_is_tight_scan_of_silhouette(t):
    for i in range(30):
        s = render(t, i)
        rows = [r for r in range(s.mask.shape[0]) if s.mask[r].any()]
        cols = [c for c in range(s.mask.shape[1]) if s.mask[:, c].any()]
        assert (s.gt_box.x1, s.gt_box.y1, s.gt_box.x2, s.gt_box.y2) == \
            (cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)


@pytest.mark.parametrize("t", ["A", "B"])
def test_placement_invariants(t):
    for i in range(100):
        s = render(t, i)
        b = s.gt_box
        assert b.x1 >= MARGIN and b.y1 >= MARGIN and b.x2 <= 96 - MARGIN and b.y2 <= 96 - MARGIN
        assert 0.2 <= b.width / 96 <= 0.6
        assert s.image.min() >= 0 and s.image.max() <= 1
        band = s.image[0][~s.mask & (s.image[0] < 0.35)]
        assert s.image[0][s.mask].mean() > band.mean()


def test_types_distinguishable_by_compactness():
    correct = 0
    for i in range(500):
        correct += compactness(render("A", i).image) > 0.35
        correct += compactness(render("B", i).image) <= 0.35
    assert correct / 1000 > 0.95


def test_silhouette_shapes():
    ring = silhouette(SnapShape("B", 48, 48, 0.0, 40), 96)
    assert not ring[48, 48 + 10]  # gap between boss and ring
    assert ring[48, 48] and ring[48, 48 + 18]
    body = silhouette(SnapShape("A", 48, 48, 0.0, 40), 96)
    assert not body[48, 48 + 18]  # slot at the cantilever end
    assert body[48 + 10, 48 + 18]
    with pytest.raises(ValueError):
        silhouette(SnapShape("C", 48, 48, 0.0, 40), 96)


def test_tight_box_pixel_edges():
    m = np.zeros((10, 10), bool)
    m[2:5, 3:7] = True
    b = tight_box(m)
    assert (b.x1, b.y1, b.x2, b.y2) == (3, 2, 7, 5)


def test_brightness_validation():
    with pytest.raises(ValueError):
        GelRenderParams(contact=1.5)


def test_seed_hash_depends_on_everything():
    assert len({sample_seed(1, "A", 0), sample_seed(1, "A", 1), sample_seed(2, "A", 0),
                sample_seed(1, "B", 0)}) == 4


class TestDataset:
    def test_files_manifest_and_split(self, tmp_path):
        m = generate_dataset("A", 10, 7, str(tmp_path))
        assert sorted(os.listdir(tmp_path)) == sorted([f"A_{i:05d}.png" for i in range(10)] +
                                                      ["manifest.jsonl"])
        lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
        header, rec = json.loads(lines[0]), json.loads(lines[1])
        assert header["version"] == 1 and header["n_train"] == 8 and "params" in header
        assert set(rec) == {"file", "type", "x1", "y1", "x2", "y2", "seed"}
        with Image.open(tmp_path / rec["file"]) as im:
            assert im.mode == "L" and im.size == (96, 96)
        ds = load_dataset(str(tmp_path))
        assert [len(x) for x in ds.split("train")] == [8, 8, 8]
        assert [len(x) for x in ds.split("eval")] == [2, 2, 2]
        assert m.digest == read_manifest(str(tmp_path)).digest

    def test_split_arithmetic_200(self):
        assert 200 * 4 // 5 == 160

    def test_regeneration_same_digest(self, tmp_path):
        a = generate_dataset("B", 6, 3, str(tmp_path / "a"))
        b = generate_dataset("B", 6, 3, str(tmp_path / "b"))
        c = generate_dataset("B", 6, 4, str(tmp_path / "c"))
        assert a.digest == b.digest != c.digest
        for i in range(6):
            name = f"B_{i:05d}.png"
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_png_roundtrip_close_to_render(self, tmp_path):
        generate_dataset("A", 2, 5, str(tmp_path))
        ds = load_dataset(str(tmp_path))
        s = render_sample("A", np.random.default_rng(sample_seed(5, "A", 0)))
        assert np.max(np.abs(ds.images[0] - s.image)) <= 0.5 / 255 + 1e-6

    def test_bad_arguments(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset("C", 5, 1, str(tmp_path))
        with pytest.raises(ValueError):
            generate_dataset("A", 0, 1, str(tmp_path))

    def test_manifest_missing_fields(self, tmp_path):
        (tmp_path / "manifest.jsonl").write_text('{"version": 1}\n{"file": "x.png"}\n')
        with pytest.raises(ValueError):
            read_manifest(str(tmp_path))
