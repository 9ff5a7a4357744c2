"""Tile-grid datasets: manifests, adjacency ground truth, synthetic and fetched tiles.

A manifest describes a rows x cols grid of overlapping tiles. Ground truth
marks a pair positive iff the tiles are 4-neighbours on the grid. Synthetic
tiles are exact crops of one base image, so every positive pair is related
by an integer translation that is recorded as its planted homography.
"""
from __future__ import annotations

import io
import itertools
import json
import logging
import math
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .geometry import Homography
from .image import load_image, save_image

log = logging.getLogger(__name__)

SYNTHETIC = "synthetic"
FETCHED = "fetched"


class DatasetError(ValueError):
    pass


@dataclass
class TileRecord:
    id: str
    row: int
    col: int
    path: str
    width: int
    height: int
    center_lat: float | None = None
    center_lon: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class TileManifest:
    tiles: list[TileRecord]
    grid_rows: int
    grid_cols: int
    overlap_fraction: float
    source: str = SYNTHETIC
    zoom: int | None = None
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0 < self.overlap_fraction < 1:
            raise DatasetError("overlap_fraction must lie in (0, 1)")
        cells = [(t.row, t.col) for t in self.tiles]
        if len(set(cells)) != len(cells):
            raise DatasetError("duplicate grid cell in manifest")
        ids = [t.id for t in self.tiles]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate tile id in manifest")

    def tile_path(self, tile: TileRecord) -> Path:
        p = Path(tile.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def by_id(self) -> dict[str, TileRecord]:
        return {t.id: t for t in self.tiles}

    def to_dict(self) -> dict:
        d = {
            "source": self.source,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "overlap_fraction": self.overlap_fraction,
        }
        if self.zoom is not None:
            d["zoom"] = self.zoom
        d["tiles"] = [t.to_dict() for t in self.tiles]
        return d

    @classmethod
    def from_dict(cls, data: dict, root: Path | None = None) -> "TileManifest":
        try:
            tiles = [
                TileRecord(
                    id=str(t["id"]),
                    row=int(t["row"]),
                    col=int(t["col"]),
                    path=str(t["path"]),
                    width=int(t["width"]),
                    height=int(t["height"]),
                    center_lat=t.get("center_lat"),
                    center_lon=t.get("center_lon"),
                )
                for t in data["tiles"]
            ]
            return cls(
                tiles=tiles,
                grid_rows=int(data["grid_rows"]),
                grid_cols=int(data["grid_cols"]),
                overlap_fraction=float(data["overlap_fraction"]),
                source=str(data.get("source", SYNTHETIC)),
                zoom=data.get("zoom"),
                root=root,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed manifest: {exc}") from exc


@dataclass
class GroundTruthLabel:
    id_a: str
    id_b: str
    label: bool
    planted_homography: Homography | None = None

    def to_dict(self) -> dict:
        d = {"id_a": self.id_a, "id_b": self.id_b, "label": self.label}
        if self.planted_homography is not None:
            d["planted_homography"] = self.planted_homography.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthLabel":
        h = d.get("planted_homography")
        return cls(str(d["id_a"]), str(d["id_b"]), bool(d["label"]), Homography.from_list(h) if h else None)


def write_json_atomic(path: str | os.PathLike, payload) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_manifest(manifest: TileManifest, path: str | os.PathLike) -> None:
    write_json_atomic(path, manifest.to_dict())


def load_manifest(path: str | os.PathLike) -> TileManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"cannot parse manifest {path}: {exc}") from exc
    return TileManifest.from_dict(data, root=path.parent)


def save_labels(labels: list[GroundTruthLabel], path: str | os.PathLike) -> None:
    write_json_atomic(path, [lab.to_dict() for lab in labels])


def load_labels(path: str | os.PathLike) -> list[GroundTruthLabel]:
    path = Path(path)
    try:
        return [GroundTruthLabel.from_dict(d) for d in json.loads(path.read_text())]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"cannot parse labels {path}: {exc}") from exc


def ordered_pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def ground_truth_from_grid(manifest: TileManifest, diagonal_positive: bool = False) -> list[GroundTruthLabel]:
    """One label per unordered tile pair; 4-neighbours are positive.

    Diagonal neighbours count as negative unless ``diagonal_positive``.
    """
    labels = []
    for a, b in itertools.combinations(manifest.tiles, 2):
        dr, dc = abs(a.row - b.row), abs(a.col - b.col)
        positive = dr + dc == 1 or (diagonal_positive and dr == 1 and dc == 1)
        id_a, id_b = ordered_pair(a.id, b.id)
        labels.append(GroundTruthLabel(id_a, id_b, positive))
    labels.sort(key=lambda lab: (lab.id_a, lab.id_b))
    return labels


def tile_id(row: int, col: int) -> str:
    return f"r{row:03d}_c{col:03d}"


def grid_shape(size: int, tile_size: int, stride: int) -> int:
    return (size - tile_size) // stride + 1 if size >= tile_size else 0


def synthesize_tiles(
    base: np.ndarray,
    tile_size: int = 256,
    overlap_fraction: float = 0.5,
    out_dir: str | os.PathLike | None = None,
) -> tuple[TileManifest, list[GroundTruthLabel]]:
    """Crop ``base`` into a grid of overlapping tiles.

    The stride is ``round(tile_size * (1 - overlap_fraction))``. When
    ``out_dir`` is given the tiles (PNG), ``manifest.json`` and
    ``labels.json`` are written there.
    """
    if not 0 < overlap_fraction < 1:
        raise DatasetError("overlap_fraction must lie in (0, 1)")
    base = np.asarray(base, dtype=np.float64)
    stride = int(round(tile_size * (1 - overlap_fraction)))
    if stride < 1:
        raise DatasetError("overlap too large for the tile size")
    h, w = base.shape[:2]
    rows, cols = grid_shape(h, tile_size, stride), grid_shape(w, tile_size, stride)
    if rows < 2 or cols < 2:
        raise DatasetError(f"{w}x{h} base is too small for a 2x2 grid of {tile_size}px tiles at stride {stride}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "tiles").mkdir(parents=True, exist_ok=True)
    tiles = []
    for r in range(rows):
        for c in range(cols):
            tid = tile_id(r, c)
            rel = f"tiles/{tid}.png"
            if out is not None:
                crop = base[r * stride : r * stride + tile_size, c * stride : c * stride + tile_size]
                save_image(crop, out / rel)
            # synthetic tiles keep their crop origin (pixels) in the centre fields
            tiles.append(
                TileRecord(tid, r, c, rel, tile_size, tile_size,
                           center_lat=float(r * stride + tile_size / 2), center_lon=float(c * stride + tile_size / 2))
            )
    manifest = TileManifest(tiles, rows, cols, overlap_fraction, SYNTHETIC, root=out)
    labels = ground_truth_from_grid(manifest)
    by_id = manifest.by_id()
    for lab in labels:
        if lab.label:
            a, b = by_id[lab.id_a], by_id[lab.id_b]
            lab.planted_homography = planted_translation(a, b, stride)
    if out is not None:
        save_manifest(manifest, out / "manifest.json")
        save_labels(labels, out / "labels.json")
    return manifest, labels


def planted_translation(a: TileRecord, b: TileRecord, stride: int) -> Homography:
    """Maps pixel coordinates of tile ``a`` into the frame of tile ``b``."""
    h = np.eye(3)
    h[0, 2] = (a.col - b.col) * stride
    h[1, 2] = (a.row - b.row) * stride
    return Homography(h)


def _value_noise(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    from scipy.ndimage import zoom

    n = size // cell + 3
    grid = rng.random((n, n))
    up = zoom(grid, cell, order=3, mode="reflect")
    return up[cell : cell + size, cell : cell + size]


def satellite_texture(size: int = 1024, seed: int = 0) -> np.ndarray:
    """Procedural aerial-like image: terrain noise, fields, roads and buildings.

    Deterministic for a given ``(size, seed)``; values span [0, 1].
    """
    rng = np.random.default_rng(seed)
    terrain = sum(_value_noise(rng, size, cell) * (cell / 128) ** 0.6 for cell in (128, 64, 32, 16, 8))
    terrain = (terrain - terrain.min()) / np.ptp(terrain)

    canvas = PILImage.fromarray(np.uint8(terrain * 120 + 40), mode="L")
    draw = ImageDraw.Draw(canvas)
    # fields: rotated quadrilaterals with flat tone
    for _ in range(size * size // 9000):
        cx, cy = rng.uniform(0, size, 2)
        a, b = rng.uniform(15, 70, 2)
        t = rng.uniform(0, np.pi)
        corners = [(cx + a * np.cos(t) * sx - b * np.sin(t) * sy, cy + a * np.sin(t) * sx + b * np.cos(t) * sy)
                   for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
        draw.polygon(corners, fill=int(rng.integers(30, 200)))
    # roads
    for _ in range(size // 40):
        pts = [tuple(rng.uniform(0, size, 2))]
        for _ in range(int(rng.integers(2, 6))):
            step = rng.uniform(40, 200)
            ang = rng.uniform(0, 2 * np.pi)
            pts.append((pts[-1][0] + step * np.cos(ang), pts[-1][1] + step * np.sin(ang)))
        draw.line(pts, fill=int(rng.choice([20, 220])), width=int(rng.integers(2, 6)))
    # buildings with a dark shadow offset
    for _ in range(size * size // 700):
        x, y = rng.uniform(0, size, 2)
        bw, bh = rng.uniform(4, 16, 2)
        draw.rectangle([x + 2, y + 2, x + bw + 2, y + bh + 2], fill=15)
        draw.rectangle([x, y, x + bw, y + bh], fill=int(rng.integers(150, 256)))
    img = np.asarray(canvas, dtype=np.float64) / 255.0
    grain = _value_noise(rng, size, 2) - 0.5
    img = np.clip(img + 0.08 * grain, 0.0, 1.0)
    return img


def load_tile(manifest: TileManifest, tile: TileRecord) -> np.ndarray:
    return load_image(manifest.tile_path(tile))


# ---------------------------------------------------------------------------
# static-map fetch client

DEFAULT_MAP_URL = "https://maps.googleapis.com/maps/api/staticmap"
WEB_TILE = 256  # world size in pixels at zoom 0


class ConfigError(DatasetError):
    pass


class FetchError(RuntimeError):
    def __init__(self, row: int, col: int, reason: str):
        super().__init__(f"tile (row={row}, col={col}) failed: {reason}")
        self.row, self.col, self.reason = row, col, reason


@dataclass(frozen=True)
class ApiConfig:
    """Endpoint and politeness settings. The key is read from ``key_env`` only."""

    base_url: str = DEFAULT_MAP_URL
    key_env: str = "MAPS_API_KEY"
    retries: int = 3
    delay: float = 0.5
    backoff: float = 1.0
    timeout: float = 30.0
    concurrency: int = 1
    maptype: str = "satellite"

    def api_key(self) -> str:
        key = os.environ.get(self.key_env, "").strip()
        if not key:
            raise ConfigError(f"environment variable {self.key_env} is not set")
        return key


@dataclass(frozen=True)
class Region:
    """Grid origin (centre of tile r0 c0, the north-west corner) and imaging settings."""

    lat: float
    lon: float
    zoom: int = 18
    tile_size: int = 640


def ground_resolution(lat: float, zoom: int) -> float:
    """Metres per pixel of the web-mercator map at ``lat``."""
    return 156543.03392 * math.cos(math.radians(lat)) / 2**zoom


def _to_world(lat: float, lon: float, zoom: int) -> tuple[float, float]:
    scale = WEB_TILE * 2**zoom
    s = math.sin(math.radians(lat))
    x = (lon + 180.0) / 360.0 * scale
    y = (0.5 - math.log((1 + s) / (1 - s)) / (4 * math.pi)) * scale
    return x, y


def _from_world(x: float, y: float, zoom: int) -> tuple[float, float]:
    scale = WEB_TILE * 2**zoom
    lon = x / scale * 360.0 - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1 - 2 * y / scale))))
    return lat, lon


def tile_centers(region: Region, rows: int, cols: int, overlap_fraction: float) -> dict[tuple[int, int], tuple[float, float]]:
    """Centre (lat, lon) of each cell; neighbours are ``tile_size * (1 - overlap)`` pixels apart."""
    stride = region.tile_size * (1 - overlap_fraction)
    x0, y0 = _to_world(region.lat, region.lon, region.zoom)
    return {
        (r, c): _from_world(x0 + c * stride, y0 + r * stride, region.zoom)
        for r in range(rows)
        for c in range(cols)
    }


def _image_size(path: Path) -> tuple[int, int] | None:
    try:
        with PILImage.open(path) as im:
            return im.size
    except (OSError, ValueError):
        return None


def _write_bytes_atomic(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fetch_tiles(
    api: ApiConfig,
    region: Region,
    grid: tuple[int, int],
    overlap_fraction: float,
    out_dir: str | os.PathLike,
    session=None,
    sleep=time.sleep,
) -> TileManifest:
    """Download a rows x cols grid of overlapping static-map tiles.

    Tiles already on disk with the expected pixel size are kept. The manifest
    is rewritten after every tile, so an aborted run leaves a checkpoint that
    the next call resumes from.
    """
    import requests

    rows, cols = grid
    if rows < 1 or cols < 1:
        raise DatasetError(f"grid must be at least 1x1, got {rows}x{cols}")
    if not 0 < overlap_fraction < 1:
        raise DatasetError("overlap_fraction must lie in (0, 1)")
    if api.concurrency < 1 or api.retries < 1:
        raise ConfigError("concurrency and retries must be at least 1")
    key = api.api_key()
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    session = session or requests.Session()
    size = region.tile_size
    centers = tile_centers(region, rows, cols, overlap_fraction)
    done: dict[tuple[int, int], TileRecord] = {}
    lock = threading.Lock()
    gate = threading.Semaphore(api.concurrency)

    def record(r, c):
        lat, lon = centers[r, c]
        tid = tile_id(r, c)
        return TileRecord(tid, r, c, f"tiles/{tid}.png", size, size, lat, lon)

    def checkpoint():
        tiles = [done[k] for k in sorted(done)]
        save_manifest(TileManifest(tiles, rows, cols, overlap_fraction, FETCHED, region.zoom), out / "manifest.json")

    def fetch_one(r, c):
        rec = record(r, c)
        dest = out / rec.path
        if _image_size(dest) == (size, size):
            log.info("skip %s (present)", rec.id)
        else:
            params = {
                "center": f"{rec.center_lat:.8f},{rec.center_lon:.8f}",
                "zoom": region.zoom,
                "size": f"{size}x{size}",
                "maptype": api.maptype,
                "format": "png",
                "key": key,
            }
            reason = "no attempt made"
            for attempt in range(api.retries):
                if attempt:
                    sleep(api.backoff * 2 ** (attempt - 1))
                try:
                    with gate:
                        resp = session.get(api.base_url, params=params, timeout=api.timeout)
                        sleep(api.delay)
                except requests.RequestException as exc:
                    reason = type(exc).__name__
                    continue
                if resp.status_code != 200:
                    reason = f"HTTP {resp.status_code}"
                    continue
                try:
                    with PILImage.open(io.BytesIO(resp.content)) as im:
                        got = im.size
                except OSError:
                    reason = "response is not an image"
                    continue
                if got != (size, size):
                    reason = f"image is {got[0]}x{got[1]}, expected {size}x{size}"
                    continue
                _write_bytes_atomic(dest, resp.content)
                break
            else:
                raise FetchError(r, c, reason)
        with lock:
            done[r, c] = rec
            checkpoint()

    cells = [(r, c) for r in range(rows) for c in range(cols)]
    if api.concurrency == 1:
        for r, c in cells:
            fetch_one(r, c)
    else:
        with ThreadPoolExecutor(api.concurrency) as pool:
            futures = [pool.submit(fetch_one, r, c) for r, c in cells]
            errors = []
            for f in futures:
                try:
                    f.result()
                except FetchError as exc:
                    errors.append(exc)
            if errors:
                raise errors[0]
    checkpoint()
    return load_manifest(out / "manifest.json")
