import csv
import json

import numpy as np
import pytest
from PIL import Image

from featmatch.cli import SETTINGS, build_parser, main, read_config, resolve, CliError
from featmatch.dataset import satellite_texture
from featmatch.image import save_image
from synth import MockMaps


@pytest.fixture(scope="module")
def tile(tmp_path_factory):
    d = tmp_path_factory.mktemp("img")
    save_image(satellite_texture(256, 11), d / "tile.png")
    save_image(np.random.default_rng(0).random((256, 256)), d / "noise_a.png")
    save_image(np.random.default_rng(1).random((256, 256)), d / "noise_b.png")
    return d


def test_detect(tile, tmp_path, capsys):
    out = tmp_path / "kp.jsonl"
    assert main(["detect", "--descriptor", "sift", "--budget", "50", "--out", str(out), str(tile / "tile.png")]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert 0 < len(recs) <= 50 and len(recs[0]["descriptor"]) == 128
    assert main(["detect", "--descriptor", "orb", "--budget", "50", "--out", str(out), str(tile / "tile.png")]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert recs and len(recs[0]["descriptor"]) == 64 and recs[0]["sigma"] is None
    assert f"{len(recs)} keypoints" in capsys.readouterr().out


def test_detect_constant_and_missing(tmp_path, capsys):
    save_image(np.full((64, 64), 0.5), tmp_path / "flat.png")
    out = tmp_path / "flat.jsonl"
    assert main(["detect", "--out", str(out), str(tmp_path / "flat.png")]) == 0
    assert out.exists() and out.read_text() == ""
    missing = tmp_path / "nope.png"
    assert main(["detect", str(missing)]) != 0
    assert str(missing) in capsys.readouterr().err
    (tmp_path / "junk.png").write_bytes(b"not an image")
    assert main(["detect", str(tmp_path / "junk.png")]) != 0


def test_match_self_and_viz(tile, tmp_path):
    out = tmp_path / "m.json"
    img = str(tile / "tile.png")
    assert main(["match", img, img, "--budget", "200", "--viz", "both", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["inlier_ratio"] >= 0.9 and rep["seed"] == 0
    assert len(rep["homography"]) == 9 and len(rep["matches"]) == rep["n_matches"]
    for mode in ("pre", "post"):
        with Image.open(tmp_path / f"m_{mode}.png") as im:
            assert im.size == (512, 256)


def test_match_noise_pair(tile, tmp_path):
    out = tmp_path / "n.json"
    assert main(["match", str(tile / "noise_a.png"), str(tile / "noise_b.png"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["inlier_ratio"] < 0.05


def test_match_no_consensus_is_success(tmp_path):
    save_image(np.full((64, 64), 0.5), tmp_path / "flat.png")
    out = tmp_path / "f.json"
    assert main(["match", str(tmp_path / "flat.png"), str(tmp_path / "flat.png"), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["inlier_ratio"] == 0 and rep["homography"] is None


def test_synth(tmp_path, capsys):
    out = tmp_path / "new" / "syn"
    assert main(["synth", "--generate", "1024", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["tiles"]) == 49 and (out / "labels.json").exists()
    assert "49 tiles" in capsys.readouterr().out
    save_image(np.zeros((200, 200)), tmp_path / "small.png")
    assert main(["synth", "--base", str(tmp_path / "small.png"), "--out", str(tmp_path / "s2")]) != 0


@pytest.fixture(scope="module")
def grid4(tmp_path_factory):
    d = tmp_path_factory.mktemp("grid4")
    assert main(["synth", "--generate", "640", "--out", str(d)]) == 0
    return d


def test_evaluate_and_determinism(grid4, tmp_path, capsys):
    args = ["evaluate", str(grid4 / "manifest.json"), "--descriptors", "sift,orb", "--budgets", "100,500"]
    assert main(args + ["--out", str(tmp_path / "r1")]) == 0
    printed = capsys.readouterr().out
    summary = list(csv.DictReader((tmp_path / "r1" / "summary.csv").open()))
    assert len(summary) == 4
    assert "SIFT (500)" in printed and "Inlier Ratio (True Negatives)" in printed
    pairs = list(csv.DictReader((tmp_path / "r1" / "pairs.csv").open()))
    assert len(pairs) == 120 * 4
    assert main(args + ["--out", str(tmp_path / "r2")]) == 0
    for name in ("pairs.csv", "summary.csv", "summary.txt"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_evaluate_default_sweep(tmp_path):
    d = tmp_path / "g3"
    assert main(["synth", "--generate", "512", "--out", str(d)]) == 0
    assert main(["evaluate", str(d / "manifest.json"), "--out", str(tmp_path / "r")]) == 0
    rows = list(csv.DictReader((tmp_path / "r" / "summary.csv").open()))
    assert sorted((r["descriptor"], int(r["budget"])) for r in rows) == sorted(
        (desc, b) for desc in ("sift", "orb") for b in (100, 200, 500, 1000, 2000))


def test_evaluate_bad_manifest(tmp_path, capsys):
    (tmp_path / "manifest.json").write_text("{broken")
    assert main(["evaluate", str(tmp_path / "manifest.json")]) != 0
    assert "manifest" in capsys.readouterr().err


def test_fetch_mock(tmp_path, monkeypatch):
    monkeypatch.setenv("MAPS_API_KEY", "k")
    out = tmp_path / "f"
    base = ["fetch", "--lat", "40", "--lon", "-3.7", "--tile-size", "32", "--delay", "0", "--out", str(out)]
    with MockMaps(size=32) as srv:
        assert main(base + ["--base-url", srv.url]) == 0
    assert len(list((out / "tiles").glob("*.png"))) == 4 and (out / "manifest.json").exists()
    with MockMaps(size=32) as srv:
        assert main(base + ["--base-url", srv.url, "--rows", "3"]) == 0
    assert len(srv.requests) == 2


def test_fetch_failure_names_manifest(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MAPS_API_KEY", "k")
    with MockMaps(size=32, status=503, fail_centers=["x"]) as srv:
        srv.size = 0
        srv.body = b"garbage"
        code = main(["fetch", "--lat", "40", "--lon", "-3.7", "--tile-size", "32", "--delay", "0", "--retries", "1",
                     "--base-url", srv.url, "--out", str(tmp_path / "f")])
    assert code != 0
    err = capsys.readouterr().err
    assert "row=0, col=0" in err and "manifest.json" in err


def test_fetch_missing_key(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("MAPS_API_KEY", raising=False)
    with MockMaps() as srv:
        code = main(["fetch", "--lat", "40", "--lon", "-3.7", "--base-url", srv.url, "--out", str(tmp_path)])
    assert code != 0 and srv.requests == []
    assert "MAPS_API_KEY" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# settings\nbudget = 300\nseed = 9\nransac-epsilon = 2.5  # px\n")
    parser = build_parser()
    s = resolve(parser.parse_args(["detect", "--config", str(cfg), "x.png"]))
    assert (s["budget"], s["seed"], s["ransac_epsilon"], s["rho"]) == (300, 9, 2.5, SETTINGS["rho"][1])
    s = resolve(parser.parse_args(["detect", "--config", str(cfg), "--budget", "40", "x.png"]))
    assert (s["budget"], s["seed"]) == (40, 9)
    s = resolve(parser.parse_args(["match", "a", "b", "--ransac-confidence", "none"]))
    assert s["ransac_confidence"] is None
    (tmp_path / "bad.cfg").write_text("budgett = 3\n")
    with pytest.raises(CliError, match="bad.cfg:1"):
        read_config(tmp_path / "bad.cfg")


def test_invalid_values_rejected(tmp_path, capsys):
    assert main(["detect", "--budget", "0", str(tmp_path / "x.png")]) != 0
    assert main(["detect", "--descriptor", "surf", str(tmp_path / "x.png")]) != 0


@pytest.mark.parametrize("cmd", ["detect", "match", "evaluate", "synth", "fetch"])
def test_help_lists_defaults(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    assert "--seed" in text and "--config" in text and "--out" in text
    if cmd in ("detect", "match"):
        assert "(default: 500)" in text and "(default: sift)" in text
    if cmd == "evaluate":
        assert "(default: 100,200,500,1000,2000)" in text and "(default: 3.0)" in text
