"""Inlier-ratio evaluation of tile pairs and whole datasets."""
from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import GroundTruthLabel, TileManifest, load_tile, ordered_pair
from .geometry import GeometryError, RansacResult, ransac_homography
from .image import to_grayscale
from .matcher import MatchSet, brute_force_match
from .orb import OrbParams, brief_pattern, orb_detect_and_describe
from .rng import derive_seed
from .sift import SiftParams, sift_detect_and_describe

log = logging.getLogger(__name__)

SIFT = "sift"
ORB = "orb"
DESCRIPTORS = (SIFT, ORB)
DEFAULT_BUDGETS = (100, 200, 500, 1000, 2000)
REPORT_FIELDS = [
    "descriptor", "budget", "id_a", "id_b", "n_matches", "n_inliers",
    "inlier_ratio", "predicted", "ground_truth", "seed",
]
SUMMARY_FIELDS = [
    "descriptor", "budget", "n_positive", "n_negative", "tp_mean_inlier_ratio",
    "tn_mean_inlier_ratio", "TP", "TN", "FP", "FN", "rho",
]


@dataclass(frozen=True)
class PipelineConfig:
    sift: SiftParams = SiftParams()
    orb: OrbParams = OrbParams()
    ransac_epsilon: float = 3.0
    ransac_iters: int = 2000
    ransac_confidence: float | None = 0.999
    rho: float = 0.10
    seed: int = 0

    def pattern_seed(self) -> int:
        return derive_seed(self.seed, "brief")

    def pair_seed(self, id_a: str, id_b: str) -> int:
        return derive_seed(self.seed, "ransac", id_a, id_b)


@dataclass
class Features:
    points: np.ndarray  # (n, 2) x, y in image pixels
    descriptors: np.ndarray
    keypoints: list = field(default_factory=list, repr=False)
    scales: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)

    def head(self, k: int) -> "Features":
        return Features(self.points[:k], self.descriptors[:k], self.keypoints[:k],
                        None if self.scales is None else self.scales[:k])


@dataclass
class PairReport:
    descriptor: str
    keypoint_budget: int
    id_a: str
    id_b: str
    n_matches: int
    n_inliers: int
    inlier_ratio: float
    predicted: bool
    ground_truth: bool
    seed: int

    def __post_init__(self):
        if self.n_inliers > self.n_matches:
            raise ValueError("more inliers than matches")

    def sort_key(self):
        return (self.descriptor, self.keypoint_budget, self.id_a, self.id_b)

    def row(self) -> list:
        return [
            self.descriptor, self.keypoint_budget, self.id_a, self.id_b, self.n_matches,
            self.n_inliers, repr(float(self.inlier_ratio)), int(self.predicted), int(self.ground_truth), self.seed,
        ]


@dataclass
class SummaryRow:
    descriptor: str
    budget: int
    n_positive: int
    n_negative: int
    tp_mean: float
    tn_mean: float
    tp: int
    tn: int
    fp: int
    fn: int
    rho: float

    @property
    def label(self) -> str:
        return f"{self.descriptor.upper()} ({self.budget})"


@dataclass
class EvaluationSummary:
    rows: list[SummaryRow]

    def row(self, descriptor: str, budget: int) -> SummaryRow:
        for r in self.rows:
            if r.descriptor == descriptor and r.budget == budget:
                return r
        raise KeyError((descriptor, budget))


@dataclass
class PairResult:
    """Everything computed for one pair; ``ransac`` is None without consensus."""

    features_a: Features
    features_b: Features
    matches: MatchSet
    ransac: RansacResult | None
    seed: int

    @property
    def n_matches(self) -> int:
        return len(self.matches)

    @property
    def n_inliers(self) -> int:
        return 0 if self.ransac is None else self.ransac.n_inliers

    @property
    def inlier_ratio(self) -> float:
        return inlier_ratio(self.n_matches, self.n_inliers)


def inlier_ratio(n_matches: int, n_inliers: int) -> float:
    """Fraction of matches that are inliers; 0 when there are no matches."""
    if n_inliers < 0 or n_matches < 0:
        raise ValueError("counts must be non-negative")
    if n_inliers > n_matches:
        raise ValueError(f"{n_inliers} inliers exceed {n_matches} matches")
    return n_inliers / n_matches if n_matches else 0.0


def predict(ratio: float, rho: float) -> bool:
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    return ratio >= rho


def confusion_counts(reports) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) over reports carrying ``ground_truth`` and ``predicted``."""
    tp = tn = fp = fn = 0
    for r in reports:
        if r.ground_truth and r.predicted:
            tp += 1
        elif not r.ground_truth and not r.predicted:
            tn += 1
        elif r.predicted:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def extract_features(img, descriptor: str, budget: int | None, config: PipelineConfig = PipelineConfig()) -> Features:
    gray = to_grayscale(img)
    if descriptor == SIFT:
        kps, desc = sift_detect_and_describe(gray, budget, config.sift)
        scales = np.array([kp.sigma for kp in kps])
    elif descriptor == ORB:
        pattern = brief_pattern(config.pattern_seed(), config.orb.patch_size, config.orb.n_bits)
        kps, desc = orb_detect_and_describe(gray, budget, config.orb, pattern)
        scales = np.full(len(kps), config.orb.patch_size / 4.0)
    else:
        raise ValueError(f"unknown descriptor {descriptor!r}")
    pts = np.array([[kp.x, kp.y] for kp in kps], dtype=np.float64).reshape(-1, 2)
    return Features(pts, desc, kps, scales)


def match_features(fa: Features, fb: Features, config: PipelineConfig = PipelineConfig(), seed: int = 0) -> PairResult:
    """Brute-force matching (a -> b) followed by RANSAC; no consensus is not an error."""
    matches = brute_force_match(fa.descriptors, fb.descriptors)
    ransac = None
    if len(matches) >= 4:
        src = fa.points[matches.index_a]
        dst = fb.points[matches.index_b]
        try:
            ransac = ransac_homography(
                src, dst, epsilon=config.ransac_epsilon, max_iters=config.ransac_iters,
                seed=seed, confidence=config.ransac_confidence,
            )
        except GeometryError as exc:
            log.debug("no consensus: %s", exc)
    return PairResult(fa, fb, matches, ransac, seed)


def evaluate_pair(
    img_a,
    img_b,
    descriptor: str,
    budget: int,
    config: PipelineConfig = PipelineConfig(),
    id_a: str = "a",
    id_b: str = "b",
    ground_truth: bool = False,
) -> PairReport:
    if budget <= 0:
        raise ValueError("budget must be positive")
    fa = extract_features(img_a, descriptor, budget, config)
    fb = extract_features(img_b, descriptor, budget, config)
    return _report(match_features(fa, fb, config, config.pair_seed(id_a, id_b)), descriptor, budget, id_a, id_b, ground_truth, config)


def _report(res: PairResult, descriptor, budget, id_a, id_b, ground_truth, config) -> PairReport:
    ratio = res.inlier_ratio
    return PairReport(descriptor, budget, id_a, id_b, res.n_matches, res.n_inliers, ratio,
                      predict(ratio, config.rho), bool(ground_truth), res.seed)


def summarize(reports: list[PairReport], rho: float) -> EvaluationSummary:
    groups: dict[tuple[str, int], list[PairReport]] = {}
    for r in reports:
        groups.setdefault((r.descriptor, r.keypoint_budget), []).append(r)
    rows = []
    for (desc, budget), rs in sorted(groups.items()):
        pos = [r.inlier_ratio for r in rs if r.ground_truth]
        neg = [r.inlier_ratio for r in rs if not r.ground_truth]
        tp, tn, fp, fn = confusion_counts(rs)
        rows.append(SummaryRow(desc, budget, len(pos), len(neg),
                               float(np.mean(pos)) if pos else 0.0, float(np.mean(neg)) if neg else 0.0,
                               tp, tn, fp, fn, rho))
    return EvaluationSummary(rows)


def evaluate_dataset(
    manifest: TileManifest,
    labels: list[GroundTruthLabel],
    descriptors=DESCRIPTORS,
    budgets=DEFAULT_BUDGETS,
    config: PipelineConfig = PipelineConfig(),
    progress=None,
) -> tuple[EvaluationSummary, list[PairReport]]:
    """Evaluate every unordered tile pair for every (descriptor, budget).

    Features are extracted once per tile at the largest budget; smaller
    budgets take prefixes, which is equivalent because detection ranks then
    truncates before describing.
    """
    if len(manifest.tiles) < 2:
        raise ValueError("manifest needs at least two tiles")
    truth = {ordered_pair(lab.id_a, lab.id_b): lab.label for lab in labels}
    tiles = sorted(manifest.tiles, key=lambda t: t.id)
    budgets = sorted(set(int(b) for b in budgets))
    top = budgets[-1]
    images = {t.id: to_grayscale(load_tile(manifest, t)) for t in tiles}
    reports: list[PairReport] = []
    for desc in descriptors:
        feats = {tid: extract_features(img, desc, top, config) for tid, img in images.items()}
        for a, b in itertools.combinations(tiles, 2):
            id_a, id_b = ordered_pair(a.id, b.id)
            gt = truth.get((id_a, id_b))
            if gt is None:
                raise ValueError(f"no ground-truth label for pair ({id_a}, {id_b})")
            seed = config.pair_seed(id_a, id_b)
            for budget in budgets:
                res = match_features(feats[id_a].head(budget), feats[id_b].head(budget), config, seed)
                reports.append(_report(res, desc, budget, id_a, id_b, gt, config))
            if progress is not None:
                progress(desc, id_a, id_b)
    reports.sort(key=PairReport.sort_key)
    return summarize(reports, config.rho), reports


def reports_csv(reports: list[PairReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in sorted(reports, key=PairReport.sort_key):
        w.writerow(r.row())
    return buf.getvalue()


def summary_csv(summary: EvaluationSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in summary.rows:
        w.writerow([r.descriptor, r.budget, r.n_positive, r.n_negative, repr(r.tp_mean), repr(r.tn_mean),
                    r.tp, r.tn, r.fp, r.fn, r.rho])
    return buf.getvalue()


def format_summary(summary: EvaluationSummary) -> str:
    """Plain-text table: one row per configuration, mean inlier ratios in %."""
    head = ("Algorithm", "Inlier Ratio (True Positives)", "Inlier Ratio (True Negatives)", "TP", "TN", "FP", "FN")
    body = [
        (r.label, f"{100 * r.tp_mean:.2f}%", f"{100 * r.tn_mean:.2f}%", str(r.tp), str(r.tn), str(r.fp), str(r.fn))
        for r in summary.rows
    ]
    widths = [max(len(row[i]) for row in [head, *body]) for i in range(len(head))]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    fmt = lambda row: "| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |"  # noqa: E731
    return "\n".join([rule, fmt(head), rule, *map(fmt, body), rule])
