"""Synthetic inputs and brute-force oracles shared by the unit and acceptance suites."""
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from io import BytesIO
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from featmatch.image import gaussian_blur, gaussian_kernel
from featmatch.orb import CIRCLE


def textured(size=64, seed=0, blur=1.5):
    """Smooth random texture normalized to [0, 1]."""
    rng = np.random.default_rng(seed)
    img = gaussian_blur(rng.random((size, size)), blur)
    return (img - img.min()) / np.ptp(img)


def blob(size=64, sigma=4.0, center=None, amplitude=1.0):
    cy, cx = center if center is not None else ((size - 1) / 2, (size - 1) / 2)
    y, x = np.mgrid[:size, :size]
    return amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma**2))


def reflect101(i, n):
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def brute_convolve(img, sigma):
    """Direct 2-D convolution with the outer-product kernel, reflect-101 borders."""
    k = gaussian_kernel(sigma)
    w2 = np.outer(k.weights, k.weights)
    r = k.radius
    h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for j in range(-r, r + 1):
                for i in range(-r, r + 1):
                    acc += w2[j + r, i + r] * img[reflect101(y - j, h), reflect101(x - i, w)]
            out[y, x] = acc
    return out


def extrema_oracle(dog, threshold):
    """(octave, level, y, x) of strict 26-neighbour extrema by explicit comparison."""
    found = set()
    for o, stack in enumerate(dog.octaves):
        n, h, w = stack.shape
        for z in range(1, n - 1):
            for y in range(1, h - 1):
                for x in range(1, w - 1):
                    v = stack[z, y, x]
                    if abs(v) <= threshold:
                        continue
                    nbs = [stack[z + a, y + b, x + c] for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
                           if (a, b, c) != (0, 0, 0)]
                    if all(v > q for q in nbs) or all(v < q for q in nbs):
                        found.add((o, z, y, x))
    return found


def fast_oracle(img, t, n):
    """Segment test checking every rotation of the circle explicitly."""
    h, w = img.shape
    out = set()
    for y in range(3, h - 3):
        for x in range(3, w - 3):
            c = img[y, x]
            ring = [img[y + dy, x + dx] for dx, dy in CIRCLE]
            for test in (lambda v: v > c + t, lambda v: v < c - t):
                flags = [test(v) for v in ring]
                if any(all(flags[(s + i) % 16] for i in range(n)) for s in range(16)):
                    out.add((x, y))
                    break
    return out


def hamming_loop(a, b, n_bits):
    count = 0
    for i in range(n_bits):
        if ((int(a[i // 8]) >> (i % 8)) & 1) != ((int(b[i // 8]) >> (i % 8)) & 1):
            count += 1
    return count


def argmin_loop(desc_a, desc_b, dist):
    out = []
    for i in range(len(desc_a)):
        best, bj = None, -1
        for j in range(len(desc_b)):
            d = dist(desc_a[i], desc_b[j])
            if best is None or d < best:
                best, bj = d, j
        out.append((i, bj, best))
    return out


def random_homography(rng):
    """Well-conditioned random H: entries in [-1, 1] around a stable core, h33 = 1."""
    while True:
        h = np.eye(3) + rng.uniform(-0.3, 0.3, (3, 3))
        h[2, :2] = rng.uniform(-1e-3, 1e-3, 2)
        h[:2, 2] = rng.uniform(-1, 1, 2)
        h /= h[2, 2]
        if np.linalg.cond(h[:2, :2]) < 5 and np.abs(h).max() <= 1 + 1e-12:
            return h


def apply_h(h, pts):
    p = np.c_[pts, np.ones(len(pts))] @ h.T
    return p[:, :2] / p[:, 2:]


def planted_problem(rng, n_in=70, n_out=30, eps=3.0, size=500.0):
    """Exact inliers under a random H plus outliers kept far from it."""
    while True:
        h = np.eye(3)
        h[:2, :2] = [[np.cos(a := rng.uniform(-0.5, 0.5)), -np.sin(a)], [np.sin(a), np.cos(a)]]
        h[:2, :2] *= rng.uniform(0.8, 1.25)
        h[:2, 2] = rng.uniform(-50, 50, 2)
        h[2, :2] = rng.uniform(-2e-4, 2e-4, 2)
        src = rng.uniform(0, size, (n_in + n_out, 2))
        dst = apply_h(h, src)
        if np.all(np.isfinite(dst)):
            break
    for i in range(n_in, n_in + n_out):
        while True:
            cand = rng.uniform(-50, size + 50, 2)
            if np.linalg.norm(cand - dst[i]) > 10 * eps:
                dst[i] = cand
                break
    order = rng.permutation(n_in + n_out)
    inv = np.argsort(order)
    return h, src[order], dst[order], sorted(inv[:n_in].tolist())


def rotate90_patch(img):
    """Rotate by 90 degrees: content moves so that directions turn by +pi/2 in (x, y-down) coordinates."""
    return np.rot90(img, k=-1).copy()


def png_bytes(size, value=128):
    buf = BytesIO()
    Image.new("L", (size, size), value).save(buf, format="PNG")
    return buf.getvalue()


class MockMaps:
    """Static-map stand-in: serves a fixed PNG, optionally failing chosen centres."""

    def __init__(self, size=32, fail_centers=(), status=500):
        self.size = size
        self.fail_centers = set(fail_centers)
        self.status = status
        self.requests = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.lock = threading.Lock()
        self.body = png_bytes(size)
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                q = {k: v[0] for k, v in parse_qs(urlparse(self.path).query).items()}
                with outer.lock:
                    outer.requests.append(q)
                    outer.in_flight += 1
                    outer.max_in_flight = max(outer.max_in_flight, outer.in_flight)
                try:
                    if q.get("center") in outer.fail_centers:
                        self.send_response(outer.status)
                        self.end_headers()
                        return
                    self.send_response(200)
                    self.send_header("Content-Type", "image/png")
                    self.send_header("Content-Length", str(len(outer.body)))
                    self.end_headers()
                    self.wfile.write(outer.body)
                finally:
                    with outer.lock:
                        outer.in_flight -= 1

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/staticmap"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
