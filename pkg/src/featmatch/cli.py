"""Command-line entry point: ``featmatch detect|match|evaluate|synth|fetch``.

Settings resolve as command-line flag, then config file, then built-in
default. The config file is flat ``key = value`` text; ``#`` starts a comment.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    ApiConfig,
    DatasetError,
    FetchError,
    Region,
    fetch_tiles,
    ground_truth_from_grid,
    load_labels,
    load_manifest,
    satellite_texture,
    synthesize_tiles,
)
from .evaluation import (
    DESCRIPTORS,
    PipelineConfig,
    evaluate_dataset,
    extract_features,
    format_summary,
    match_features,
    reports_csv,
    summary_csv,
)
from .image import ImageError, load_image
from .orb import OrbParams
from .sift import SiftParams
from .viz import draw_matches

log = logging.getLogger("featmatch")


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_float(v: str):
    return None if str(v).strip().lower() in ("none", "off", "") else float(v)


def _int_list(v) -> list[int]:
    return [int(x) for x in str(v).split(",") if x.strip()]


def _str_list(v) -> list[str]:
    return [x.strip().lower() for x in str(v).split(",") if x.strip()]


# key -> (parser, default, help)
SETTINGS: dict[str, tuple] = {
    "seed": (int, 0, "top-level seed; RANSAC and BRIEF seeds derive from it"),
    "descriptor": (str, "sift", "sift or orb"),
    "budget": (int, 500, "keypoint budget (max keypoints per image)"),
    "descriptors": (_str_list, ["sift", "orb"], "comma-separated descriptors to evaluate"),
    "budgets": (_int_list, [100, 200, 500, 1000, 2000], "comma-separated keypoint budgets"),
    "ransac_epsilon": (float, 3.0, "inlier reprojection threshold in pixels"),
    "ransac_iters": (int, 2000, "maximum RANSAC iterations"),
    "ransac_confidence": (_opt_float, 0.999, "early-exit confidence, or 'none' to always run all iterations"),
    "rho": (float, 0.10, "inlier-ratio threshold for predicting a match"),
    "sift_octaves": (int, 4, "SIFT octaves"),
    "sift_levels": (int, 6, "SIFT blur levels per octave"),
    "sift_sigma0": (float, 1.6, "SIFT base scale"),
    "sift_contrast_threshold": (float, 0.03, "minimum |DoG| at an extremum"),
    "orb_threshold": (float, 0.08, "FAST intensity threshold (intensities in [0, 1])"),
    "orb_arc_n": (int, 12, "FAST contiguous arc length"),
    "orb_n_bits": (int, 256, "BRIEF descriptor length in bits"),
    "diagonal_positive": (_bool, False, "label diagonal grid neighbours positive"),
    "tile_size": (int, 256, "tile edge in pixels"),
    "overlap": (float, 0.5, "overlap fraction between neighbouring tiles"),
    "lat": (float, None, "latitude of the north-west tile centre"),
    "lon": (float, None, "longitude of the north-west tile centre"),
    "zoom": (int, 18, "map zoom level"),
    "rows": (int, 2, "grid rows"),
    "cols": (int, 2, "grid columns"),
    "fetch_tile_size": (int, 640, "fetched tile edge in pixels"),
    "base_url": (str, ApiConfig.base_url, "static map endpoint"),
    "api_key_env": (str, ApiConfig.key_env, "environment variable holding the API key"),
    "delay": (float, ApiConfig.delay, "seconds to wait after each request"),
    "retries": (int, ApiConfig.retries, "attempts per tile"),
    "concurrency": (int, ApiConfig.concurrency, "maximum requests in flight"),
}


class CliError(Exception):
    pass


def read_config(path: str | os.PathLike) -> dict:
    """Parse a flat ``key = value`` file into typed settings."""
    out = {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{no}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise CliError(f"{path}:{no}: unknown setting {key!r}")
        try:
            out[key] = SETTINGS[key][0](val)
        except ValueError as exc:
            raise CliError(f"{path}:{no}: bad value for {key}: {exc}") from exc
    return out


def resolve(args: argparse.Namespace) -> dict:
    s = {k: v[1] for k, v in SETTINGS.items()}
    if getattr(args, "config", None):
        s.update(read_config(args.config))
    given = vars(args)
    s.update({k: given[k] for k in SETTINGS if k in given})
    _validate(s)
    return s


def _validate(s: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise CliError(msg)

    need(s["descriptor"] in DESCRIPTORS, f"descriptor must be one of {DESCRIPTORS}")
    need(all(d in DESCRIPTORS for d in s["descriptors"]) and s["descriptors"], f"descriptors must be drawn from {DESCRIPTORS}")
    need(s["budget"] > 0 and s["budgets"] and all(b > 0 for b in s["budgets"]), "budgets must be positive")
    need(s["ransac_epsilon"] > 0, "ransac_epsilon must be positive")
    need(s["ransac_iters"] > 0, "ransac_iters must be positive")
    c = s["ransac_confidence"]
    need(c is None or 0 < c < 1, "ransac_confidence must lie in (0, 1)")
    need(0 < s["rho"] < 1, "rho must lie in (0, 1)")
    need(s["sift_octaves"] >= 1 and s["sift_levels"] >= 3 and s["sift_sigma0"] > 0, "invalid SIFT parameters")
    need(s["sift_contrast_threshold"] >= 0, "sift_contrast_threshold must be non-negative")
    need(0 < s["orb_threshold"] < 1 and 9 <= s["orb_arc_n"] <= 16, "invalid FAST parameters")
    need(s["orb_n_bits"] > 0 and s["orb_n_bits"] % 8 == 0, "orb_n_bits must be a positive multiple of 8")
    need(0 < s["overlap"] < 1, "overlap must lie in (0, 1)")
    need(s["tile_size"] > 0, "tile_size must be positive")


def pipeline_config(s: dict) -> PipelineConfig:
    return PipelineConfig(
        sift=replace(SiftParams(), octaves=s["sift_octaves"], levels_per_octave=s["sift_levels"],
                     sigma0=s["sift_sigma0"], contrast_threshold=s["sift_contrast_threshold"]),
        orb=replace(OrbParams(), threshold=s["orb_threshold"], arc_n=s["orb_arc_n"], n_bits=s["orb_n_bits"]),
        ransac_epsilon=s["ransac_epsilon"],
        ransac_iters=s["ransac_iters"],
        ransac_confidence=s["ransac_confidence"],
        rho=s["rho"],
        seed=s["seed"],
    )


def write_atomic(path: str | os.PathLike, data: str | bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _load(path: str) -> np.ndarray:
    if not Path(path).is_file():
        raise CliError(f"no such image: {path}")
    try:
        return load_image(path)
    except (ImageError, OSError) as exc:
        raise CliError(f"cannot decode image {path}: {exc}") from exc


def _keypoint_record(kp, desc, descriptor: str) -> dict:
    if descriptor == "sift":
        return {"x": float(kp.x), "y": float(kp.y), "sigma": float(kp.sigma), "orientation": float(kp.orientation),
                "response": float(kp.response), "descriptor": [float(v) for v in desc]}
    return {"x": float(kp.x), "y": float(kp.y), "sigma": None, "orientation": float(kp.orientation),
            "response": float(kp.response), "descriptor": bytes(np.asarray(desc, dtype=np.uint8)).hex()}


def cmd_detect(args, s) -> int:
    img = _load(args.image)
    cfg = pipeline_config(s)
    feats = extract_features(img, s["descriptor"], s["budget"], cfg)
    out = Path(args.out or f"{Path(args.image).stem}.{s['descriptor']}.jsonl")
    lines = [json.dumps(_keypoint_record(kp, d, s["descriptor"])) for kp, d in zip(feats.keypoints, feats.descriptors)]
    write_atomic(out, "".join(line + "\n" for line in lines))
    print(f"{len(lines)} keypoints ({s['descriptor']}, budget {s['budget']}, seed {s['seed']}) -> {out}")
    return 0


def cmd_match(args, s) -> int:
    img_a, img_b = _load(args.image_a), _load(args.image_b)
    cfg = pipeline_config(s)
    desc = s["descriptor"]
    fa = extract_features(img_a, desc, s["budget"], cfg)
    fb = extract_features(img_b, desc, s["budget"], cfg)
    seed = cfg.pair_seed(Path(args.image_a).stem, Path(args.image_b).stem)
    res = match_features(fa, fb, cfg, seed)
    report = {
        "image_a": str(args.image_a),
        "image_b": str(args.image_b),
        "descriptor": desc,
        "budget": s["budget"],
        "seed": s["seed"],
        "ransac_seed": seed,
        "n_keypoints_a": len(fa),
        "n_keypoints_b": len(fb),
        "n_matches": res.n_matches,
        "n_inliers": res.n_inliers,
        "inlier_ratio": res.inlier_ratio,
        "homography": None if res.ransac is None else res.ransac.homography.to_list(),
        "inliers": [] if res.ransac is None else list(res.ransac.inlier_indices),
        "iterations_run": None if res.ransac is None else res.ransac.iterations_run,
        "matches": res.matches.to_dict()["matches"],
    }
    out = Path(args.out or "match.json")
    write_atomic(out, json.dumps(report, indent=2) + "\n")
    written = [out]
    modes = {"pre": ["pre"], "post": ["post"], "both": ["pre", "post"]}.get(args.viz or "", [])
    pairs = list(zip(res.matches.index_a.tolist(), res.matches.index_b.tolist()))
    for mode in modes:
        canvas = draw_matches(img_a, img_b, fa.points, fb.points, pairs, report["inliers"], mode, fa.scales, fb.scales)
        buf = io.BytesIO()
        canvas.save(buf, format="PNG")
        written.append(write_atomic(out.with_name(f"{out.stem}_{mode}.png"), buf.getvalue()))
    print(f"{res.n_inliers}/{res.n_matches} inliers, ratio {res.inlier_ratio:.4f} -> {', '.join(map(str, written))}")
    return 0


def cmd_evaluate(args, s) -> int:
    try:
        manifest = load_manifest(args.manifest)
        labels_path = Path(args.labels) if args.labels else Path(args.manifest).parent / "labels.json"
        labels = load_labels(labels_path) if labels_path.is_file() else ground_truth_from_grid(
            manifest, diagonal_positive=s["diagonal_positive"])
    except (OSError, DatasetError, ValueError) as exc:
        raise CliError(f"cannot load dataset {args.manifest}: {exc}") from exc
    cfg = pipeline_config(s)

    def progress(desc, a, b):
        log.info("%s %s %s", desc, a, b)

    summary, reports = evaluate_dataset(manifest, labels, s["descriptors"], s["budgets"], cfg, progress)
    out = Path(args.out or "results")
    table = format_summary(summary)
    write_atomic(out / "pairs.csv", reports_csv(reports))
    write_atomic(out / "summary.csv", summary_csv(summary))
    write_atomic(out / "summary.txt", table + "\n")
    print(table)
    print(f"{len(reports)} pair reports (seed {s['seed']}) -> {out}")
    return 0


def cmd_synth(args, s) -> int:
    if args.base:
        base = _load(args.base)
    else:
        base = satellite_texture(args.generate, s["seed"])
    out = Path(args.out or "synthetic")
    try:
        manifest, labels = synthesize_tiles(base, s["tile_size"], s["overlap"], out)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc
    print(f"{len(manifest.tiles)} tiles ({manifest.grid_rows}x{manifest.grid_cols}), "
          f"{sum(lab.label for lab in labels)} positive pairs -> {out / 'manifest.json'}")
    return 0


def cmd_fetch(args, s) -> int:
    if s["lat"] is None or s["lon"] is None:
        raise CliError("fetch needs --lat and --lon (or lat/lon in the config file)")
    api = ApiConfig(base_url=s["base_url"], key_env=s["api_key_env"], retries=s["retries"],
                    delay=s["delay"], concurrency=s["concurrency"])
    region = Region(s["lat"], s["lon"], s["zoom"], s["fetch_tile_size"])
    out = Path(args.out or "fetched")
    try:
        manifest = fetch_tiles(api, region, (s["rows"], s["cols"]), s["overlap"], out)
    except FetchError as exc:
        raise CliError(f"{exc}; partial manifest kept at {out / 'manifest.json'}, re-run to resume") from exc
    except DatasetError as exc:
        raise CliError(str(exc)) from exc
    print(f"{len(manifest.tiles)} tiles -> {out / 'manifest.json'}")
    return 0


def _setting_flag(p: argparse.ArgumentParser, key: str, flag: str | None = None) -> None:
    conv, default, text = SETTINGS[key]
    if isinstance(default, list):
        default = ",".join(map(str, default))
    p.add_argument(flag or "--" + key.replace("_", "-"), dest=key, type=conv, default=argparse.SUPPRESS,
                   help=f"{text} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=f"{SETTINGS['seed'][2]} (default: 0)")
    common.add_argument("--config", default=None, help="flat key = value settings file")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    pipeline = argparse.ArgumentParser(add_help=False)
    for key in ("ransac_epsilon", "ransac_iters", "ransac_confidence", "rho", "sift_octaves", "sift_levels",
                "sift_sigma0", "sift_contrast_threshold", "orb_threshold", "orb_arc_n", "orb_n_bits"):
        _setting_flag(pipeline, key)

    single = argparse.ArgumentParser(add_help=False)
    _setting_flag(single, "descriptor")
    _setting_flag(single, "budget")

    parser = argparse.ArgumentParser(prog="featmatch", description="SIFT/ORB matching with RANSAC inlier-ratio evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", parents=[common, single, pipeline], help="detect and describe keypoints")
    p.add_argument("image")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("match", parents=[common, single, pipeline], help="match two images and verify with RANSAC")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--viz", choices=("pre", "post", "both"), default=None,
                   help="write side-by-side match images next to the report (default: none)")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("evaluate", parents=[common, pipeline], help="evaluate every tile pair of a dataset")
    p.add_argument("manifest")
    p.add_argument("--labels", default=None, help="labels file (default: labels.json beside the manifest)")
    _setting_flag(p, "descriptors")
    _setting_flag(p, "budgets")
    p.add_argument("--diagonal-positive", dest="diagonal_positive", action="store_const", const=True, default=argparse.SUPPRESS,
                   help="when labels are derived from the grid, count diagonal neighbours as positive (default: False)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", parents=[common], help="cut a base image into an overlapping tile grid")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--base", default=None, help="base image (PNG or PGM)")
    src.add_argument("--generate", type=int, default=1024, metavar="SIZE",
                     help="size of the procedural base used when --base is absent (default: 1024)")
    _setting_flag(p, "tile_size")
    _setting_flag(p, "overlap")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fetch", parents=[common], help="download a static-map tile grid")
    for key in ("lat", "lon", "zoom", "rows", "cols", "overlap", "base_url", "api_key_env", "delay", "retries",
                "concurrency"):
        _setting_flag(p, key)
    _setting_flag(p, "fetch_tile_size", "--tile-size")
    p.set_defaults(func=cmd_fetch)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        s = resolve(args)
        return args.func(args, s)
    except CliError as exc:
        print(f"featmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"featmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
