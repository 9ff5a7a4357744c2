"""Descriptor distances and exhaustive one-directional nearest-neighbour matching."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .orb import BriefDescriptor

EUCLIDEAN = "euclidean"
HAMMING = "hamming"
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


class MatchError(ValueError):
    pass


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


@dataclass
class MatchSet:
    metric: str
    matches: list[Match] = field(default_factory=list)
    n_a: int = 0
    n_b: int = 0

    def __len__(self) -> int:
        return len(self.matches)

    def __iter__(self):
        return iter(self.matches)

    @property
    def index_a(self) -> np.ndarray:
        return np.array([m.index_a for m in self.matches], dtype=np.intp)

    @property
    def index_b(self) -> np.ndarray:
        return np.array([m.index_b for m in self.matches], dtype=np.intp)

    @property
    def distances(self) -> np.ndarray:
        return np.array([m.distance for m in self.matches], dtype=np.float64)

    def to_dict(self) -> dict:
        as_int = self.metric == HAMMING
        return {
            "metric": self.metric,
            "matches": [
                {"a": m.index_a, "b": m.index_b, "distance": int(m.distance) if as_int else m.distance}
                for m in self.matches
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MatchSet":
        matches = [Match(int(m["a"]), int(m["b"]), float(m["distance"])) for m in data["matches"]]
        return cls(data["metric"], matches)


def euclidean_distance(d1, d2) -> float:
    a = np.asarray(d1, dtype=np.float64)
    b = np.asarray(d2, dtype=np.float64)
    if a.shape != b.shape:
        raise MatchError(f"descriptor lengths differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _packed(d) -> tuple[np.ndarray, int]:
    if isinstance(d, BriefDescriptor):
        return d.bits, d.n_bits
    arr = np.asarray(d)
    if arr.dtype != np.uint8:
        raise MatchError("binary descriptors must be packed uint8 arrays or BriefDescriptor")
    return arr, arr.size * 8


def hamming_distance(b1, b2) -> int:
    """Popcount of the XOR of two packed descriptors."""
    x, n1 = _packed(b1)
    y, n2 = _packed(b2)
    if n1 != n2 or x.shape != y.shape:
        raise MatchError(f"bit lengths differ: {n1} vs {n2}")
    return int(_POPCOUNT[np.bitwise_xor(x, y)].sum())


def _as_matrix(descs) -> tuple[np.ndarray, str | None]:
    if isinstance(descs, np.ndarray):
        if descs.size == 0:
            return (descs if descs.ndim == 2 else descs.reshape(len(descs), 0)), None
        if descs.ndim != 2:
            raise MatchError("descriptor array must be 2-D")
        return descs, HAMMING if descs.dtype == np.uint8 else EUCLIDEAN
    descs = list(descs)
    if not descs:
        return np.zeros((0, 0)), None
    kinds = {isinstance(d, BriefDescriptor) or np.asarray(d).dtype == np.uint8 for d in descs}
    if len(kinds) > 1:
        raise MatchError("mixed descriptor kinds")
    if kinds.pop():
        return np.stack([_packed(d)[0] for d in descs]), HAMMING
    return np.stack([np.asarray(d, dtype=np.float64) for d in descs]), EUCLIDEAN


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances between packed rows (exact integers)."""
    ua = np.unpackbits(a, axis=1).astype(np.float32)
    ub = np.unpackbits(b, axis=1).astype(np.float32)
    # |a xor b| = |a| + |b| - 2 a.b ; exact in float32 for < 2**24 bits
    d = ua.sum(1)[:, None] + ub.sum(1)[None, :] - 2.0 * (ua @ ub.T)
    return np.rint(d).astype(np.int64)


def _euclidean_nn(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbours, lowest index on ties.

    The Gram-matrix expansion shortlists candidates; distances of the
    shortlist are then recomputed directly so ties and near-ties resolve
    exactly as a plain loop would.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.einsum("ij,ij->i", a, a)
    nb = np.einsum("ij,ij->i", b, b)
    sq = na[:, None] + nb[None, :] - 2.0 * (a @ b.T)
    best = sq.min(axis=1)
    scale = np.maximum(na[:, None] + nb[None, :], 1.0)
    slack = 1e-9 * scale
    idx = np.empty(len(a), dtype=np.intp)
    dist = np.empty(len(a))
    for i in range(len(a)):
        cand = np.nonzero(sq[i] <= best[i] + slack[i])[0]
        exact = np.sqrt(((b[cand] - a[i]) ** 2).sum(axis=1))
        j = int(np.argmin(exact))
        idx[i] = cand[j]
        dist[i] = exact[j]
    return idx, dist


def nearest_neighbours(desc_a, desc_b, metric: str | None = None) -> tuple[np.ndarray, np.ndarray, str]:
    """Array form of :func:`brute_force_match`: (index_b per query, distance, metric)."""
    a, kind_a = _as_matrix(desc_a)
    b, kind_b = _as_matrix(desc_b)
    if kind_a and kind_b and kind_a != kind_b:
        raise MatchError("mixed descriptor kinds")
    kind = kind_a or kind_b
    if metric is not None and kind is not None and metric != kind:
        raise MatchError(f"{metric} metric does not fit {kind} descriptors")
    metric = metric or kind or EUCLIDEAN
    if len(a) == 0 or len(b) == 0:
        return np.zeros(0, np.intp), np.zeros(0), metric
    if a.shape[1] != b.shape[1]:
        raise MatchError("descriptor lengths differ")
    if metric == HAMMING:
        d = hamming_matrix(a, b)
        idx = np.argmin(d, axis=1)
        return idx, d[np.arange(len(a)), idx].astype(np.float64), metric
    idx, dist = _euclidean_nn(a, b)
    return idx, dist, metric


def brute_force_match(desc_a, desc_b, metric: str | None = None, cross_check: bool = False) -> MatchSet:
    """Nearest neighbour in ``desc_b`` for every descriptor of ``desc_a``.

    The metric follows the descriptor kind (float rows -> euclidean, packed
    uint8 rows -> hamming). ``cross_check`` keeps only mutual nearest
    neighbours; it is off by default.
    """
    idx, dist, metric = nearest_neighbours(desc_a, desc_b, metric)
    n_a = len(_as_matrix(desc_a)[0])
    n_b = len(_as_matrix(desc_b)[0])
    keep = np.ones(len(idx), dtype=bool)
    if cross_check and len(idx):
        back, _, _ = nearest_neighbours(desc_b, desc_a, metric)
        keep = back[idx] == np.arange(len(idx))
    matches = [Match(int(i), int(j), float(d)) for i, (j, d, k) in enumerate(zip(idx, dist, keep)) if k]
    return MatchSet(metric, matches, n_a, n_b)
