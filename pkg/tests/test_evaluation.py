import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from featmatch.dataset import TileManifest, TileRecord, ground_truth_from_grid, satellite_texture, synthesize_tiles
from featmatch.evaluation import (
    REPORT_FIELDS,
    SUMMARY_FIELDS,
    PairReport,
    PipelineConfig,
    confusion_counts,
    evaluate_dataset,
    evaluate_pair,
    extract_features,
    format_summary,
    inlier_ratio,
    match_features,
    predict,
    reports_csv,
    summary_csv,
)
from featmatch.image import save_image


def report(gt, pred, ratio=0.5):
    return PairReport("sift", 100, "a", "b", 10, int(ratio * 10), ratio, pred, gt, 0)


def test_inlier_ratio_and_predict():
    assert inlier_ratio(100, 35) == 0.35
    assert inlier_ratio(0, 0) == 0.0
    with pytest.raises(ValueError):
        inlier_ratio(3, 4)
    assert predict(0.10, 0.10) and not predict(0.0999, 0.10)
    with pytest.raises(ValueError):
        predict(0.5, 0.0)


def test_confusion_examples():
    assert confusion_counts([report(True, True)] * 5) == (5, 0, 0, 0)
    assert confusion_counts([report(False, True)]) == (0, 0, 1, 0)
    assert confusion_counts([]) == (0, 0, 0, 0)


@given(st.lists(st.tuples(st.booleans(), st.booleans()), max_size=60))
def test_confusion_matches_recount(flags):
    reps = [report(g, p) for g, p in flags]
    expected = (
        sum(g and p for g, p in flags),
        sum(not g and not p for g, p in flags),
        sum(p and not g for g, p in flags),
        sum(g and not p for g, p in flags),
    )
    got = confusion_counts(reps)
    assert got == expected and sum(got) == len(flags)


@pytest.mark.parametrize("descriptor", ["sift", "orb"])
def test_self_pair(descriptor):
    img = satellite_texture(256, 1)
    r = evaluate_pair(img, img, descriptor, 500)
    assert r.inlier_ratio >= 0.9 and r.predicted


@pytest.mark.parametrize("descriptor", ["sift", "orb"])
def test_noise_pair(descriptor):
    a = np.random.default_rng(0).random((256, 256))
    b = np.random.default_rng(1).random((256, 256))
    assert evaluate_pair(a, b, descriptor, 500).inlier_ratio < 0.05


def test_consensus_floor():
    # any accepted model fits its own 4-point sample, so a ratio is 0 or >= 4 / n_matches
    a, b = satellite_texture(256, 2), satellite_texture(256, 3)
    cfg = PipelineConfig()
    fa, fb = extract_features(a, "orb", 100, cfg), extract_features(b, "orb", 100, cfg)
    res = match_features(fa, fb, cfg, seed=1)
    assert res.inlier_ratio == 0 or res.inlier_ratio >= 4 / res.n_matches


@pytest.mark.parametrize("descriptor", ["sift", "orb"])
def test_constant_pair(descriptor):
    flat = np.full((64, 64), 0.5)
    r = evaluate_pair(flat, flat, descriptor, 100)
    assert (r.n_matches, r.n_inliers, r.inlier_ratio, r.predicted) == (0, 0, 0.0, False)
    with pytest.raises(ValueError):
        evaluate_pair(flat, flat, descriptor, 0)


def test_strip_of_three(tmp_path):
    base = satellite_texture(512, 5)
    tiles = []
    for c in range(3):
        save_image(base[:256, c * 128 : c * 128 + 256], tmp_path / f"t{c}.png")
        tiles.append(TileRecord(f"t{c}", 0, c, f"t{c}.png", 256, 256))
    man = TileManifest(tiles, 1, 3, 0.5, root=tmp_path)
    summary, reps = evaluate_dataset(man, ground_truth_from_grid(man), ["sift"], [200])
    assert [(r.id_a, r.id_b, r.ground_truth) for r in reps] == [("t0", "t1", True), ("t0", "t2", False), ("t1", "t2", True)]
    row = summary.row("sift", 200)
    assert (row.n_positive, row.n_negative) == (2, 1)
    assert row.tp_mean == pytest.approx(np.mean([r.inlier_ratio for r in reps if r.ground_truth]))
    assert row.tp_mean > row.tn_mean


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    man, labels = synthesize_tiles(satellite_texture(384, 7), 256, 0.5, tmp_path_factory.mktemp("grid"))
    return man, labels, evaluate_dataset(man, labels, ["sift", "orb"], [100, 50])


def test_dataset_shape(small_run):
    man, labels, (summary, reps) = small_run
    assert len(man.tiles) == 4
    assert [(r.descriptor, r.budget) for r in summary.rows] == [("orb", 50), ("orb", 100), ("sift", 50), ("sift", 100)]
    assert len(reps) == 6 * 4
    assert all(r.n_positive == 4 and r.n_negative == 2 for r in summary.rows)
    assert all(r.tp + r.tn + r.fp + r.fn == 6 for r in summary.rows)


def test_prefix_budget_equals_direct_run(small_run):
    man, labels, (_, reps) = small_run
    from featmatch.dataset import load_tile

    by_id = man.by_id()
    r = next(x for x in reps if (x.descriptor, x.keypoint_budget) == ("orb", 50) and x.ground_truth)
    direct = evaluate_pair(load_tile(man, by_id[r.id_a]), load_tile(man, by_id[r.id_b]), "orb", 50,
                           id_a=r.id_a, id_b=r.id_b, ground_truth=True)
    assert direct == r


def test_csv_and_table(small_run):
    _, _, (summary, reps) = small_run
    text = reports_csv(reps)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == REPORT_FIELDS and len(rows) == 25
    assert reports_csv(list(reversed(reps))) == text
    assert float(rows[1][6]) == reps[0].inlier_ratio
    srows = list(csv.reader(io.StringIO(summary_csv(summary))))
    assert srows[0] == SUMMARY_FIELDS and len(srows) == 5
    table = format_summary(summary)
    assert "Inlier Ratio (True Positives)" in table and "SIFT (100)" in table and "ORB (50)" in table
    assert len({len(line) for line in table.splitlines()}) == 1


def test_rejects_tiny_manifest(tmp_path):
    man = TileManifest([TileRecord("a", 0, 0, "a.png", 8, 8)], 1, 1, 0.5)
    with pytest.raises(ValueError):
        evaluate_dataset(man, [])
