import itertools
import math

import numpy as np
import pytest

from featmatch.dataset import (
    DatasetError,
    TileManifest,
    TileRecord,
    ground_truth_from_grid,
    load_labels,
    load_manifest,
    load_tile,
    satellite_texture,
    save_manifest,
    synthesize_tiles,
)
from featmatch.geometry import apply_homography


def grid_manifest(rows, cols):
    tiles = [TileRecord(f"t{r}{c}", r, c, f"t{r}{c}.png", 8, 8) for r in range(rows) for c in range(cols)]
    return TileManifest(tiles, rows, cols, 0.5)


def positives(labels):
    return {(lab.id_a, lab.id_b) for lab in labels if lab.label}


def test_grid_labels_2x2():
    labels = ground_truth_from_grid(grid_manifest(2, 2))
    assert len(labels) == 6
    assert positives(labels) == {("t00", "t01"), ("t00", "t10"), ("t01", "t11"), ("t10", "t11")}
    diag = ground_truth_from_grid(grid_manifest(2, 2), diagonal_positive=True)
    assert len(positives(diag)) == 6


def test_grid_labels_strip_and_single():
    labels = ground_truth_from_grid(grid_manifest(1, 3))
    assert positives(labels) == {("t00", "t01"), ("t01", "t02")}
    assert [(lab.id_a, lab.id_b, lab.label) for lab in labels if not lab.label] == [("t00", "t02", False)]
    assert ground_truth_from_grid(grid_manifest(1, 1)) == []


@pytest.mark.parametrize("rows,cols", [(3, 3), (4, 5), (7, 7)])
def test_label_count_is_all_pairs(rows, cols):
    labels = ground_truth_from_grid(grid_manifest(rows, cols))
    n = rows * cols
    assert len(labels) == math.comb(n, 2)
    assert len(positives(labels)) == rows * (cols - 1) + cols * (rows - 1)
    assert all(lab.id_a < lab.id_b for lab in labels)


def test_manifest_validation():
    with pytest.raises(DatasetError):
        TileManifest([], 1, 1, 1.0)
    t = TileRecord("a", 0, 0, "a.png", 8, 8)
    with pytest.raises(DatasetError):
        TileManifest([t, TileRecord("b", 0, 0, "b.png", 8, 8)], 1, 2, 0.5)


def test_synthetic_grid(tmp_path):
    base = satellite_texture(1024, 0)
    man, labels = synthesize_tiles(base, 256, 0.5, tmp_path)
    assert (man.grid_rows, man.grid_cols, len(man.tiles)) == (7, 7, 49)
    assert len(labels) == math.comb(49, 2) and len(positives(labels)) == 84
    by_id = man.by_id()
    a, b = by_id["r000_c000"], by_id["r000_c001"]
    lab = next(x for x in labels if (x.id_a, x.id_b) == (a.id, b.id))
    assert lab.planted_homography.h[0, 2] == -128 and lab.planted_homography.h[1, 2] == 0
    ta, tb = load_tile(man, a), load_tile(man, b)
    assert ta.shape == (256, 256)
    # the right half of a equals the left half of b, and the planted map says so
    assert np.array_equal(ta[:, 128:], tb[:, :128])
    assert apply_homography(lab.planted_homography, (200, 50)) == (72, 50)
    below = load_tile(man, by_id["r001_c000"])
    assert np.array_equal(ta[128:], below[:128])
    assert not any(lab.planted_homography for lab in labels if not lab.label)


def test_manifest_and_labels_round_trip(tmp_path):
    man, labels = synthesize_tiles(satellite_texture(512, 1), 256, 0.5, tmp_path)
    again = load_manifest(tmp_path / "manifest.json")
    assert again == man and again.root == tmp_path
    back = load_labels(tmp_path / "labels.json")
    assert [(x.id_a, x.id_b, x.label) for x in back] == [(x.id_a, x.id_b, x.label) for x in labels]
    for x, y in zip(back, labels):
        assert (x.planted_homography is None) == (y.planted_homography is None)
        if x.planted_homography is not None:
            assert np.array_equal(x.planted_homography.h, y.planted_homography.h)
    save_manifest(man, tmp_path / "copy.json")
    assert (tmp_path / "copy.json").read_text() == (tmp_path / "manifest.json").read_text()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(DatasetError):
        load_manifest(tmp_path / "bad.json")


def test_synthesize_rejects_bad_inputs():
    with pytest.raises(DatasetError):
        synthesize_tiles(np.zeros((300, 300)), 256, 0.5)
    with pytest.raises(DatasetError):
        synthesize_tiles(np.zeros((600, 600)), 256, 1.0)


def test_texture_deterministic_and_ranged():
    a = satellite_texture(256, 3)
    assert np.array_equal(a, satellite_texture(256, 3))
    assert not np.array_equal(a, satellite_texture(256, 4))
    assert a.min() >= 0 and a.max() <= 1 and a.std() > 0.1
    for r, c in itertools.product(range(2), range(2)):
        assert a[r * 128 : (r + 1) * 128, c * 128 : (c + 1) * 128].std() > 0.05
