"""Detection extraction from occupancy maps and the detection metric suite.

Metrics follow the multiple-object-detection tradition:
    MODA      = 1 - (FP + FN) / (TP + FN)
    MODP      = sum(1 - d/t) / TP over matched pairs (d < t always holds)
    Precision = TP / (TP + FP),  Recall = TP / (TP + FN),  F1 = 2PR / (P + R)

Aggregation over frames is micro-averaged: counts and matched distances are
pooled first, metrics computed once.  Undefined denominators never produce a
silent NaN; every affected metric carries an entry in ``MetricReport.flags``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata


@dataclass(frozen=True)
class ThresholdPreset:
    """Published per-dataset matching thresholds (meters and map cells)."""

    t_meters: float
    t_cells: float


THRESHOLD_PRESETS = {
    "cvcs": ThresholdPreset(t_meters=1.0, t_cells=5.0),
    "citystreet": ThresholdPreset(t_meters=2.0, t_cells=20.0),
    "wildtrack": ThresholdPreset(t_meters=0.5, t_cells=5.0),
    "multiviewx": ThresholdPreset(t_meters=0.5, t_cells=5.0),
}

DEFAULT_CLASSIFICATION_THRESHOLD = 0.4


@dataclass
class DetectionSet:
    """Peaks extracted from a ground-plane map: (x_cell, y_cell, score)."""

    points: list[tuple[float, float, float]]

    def __len__(self) -> int:
        return len(self.points)

    def xy(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 2))
        return np.array([(p[0], p[1]) for p in self.points])


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    matched_distances: list[float] = field(default_factory=list)

    def __post_init__(self):
        assert self.tp == len(self.matched_distances)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                           self.matched_distances + other.matched_distances)


@dataclass
class MetricReport:
    moda: float
    modp: float
    precision: float
    recall: float
    f1: float
    t_cells: float
    t_meters: float | None
    tp: int
    fp: int
    fn: int
    flags: dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("moda", "modp", "precision", "recall", "f1", "t_cells", "t_meters",
              "tp", "fp", "fn")}
        d["flags"] = dict(self.flags)
        return d


# ---------------------------------------------------------------------------
# detection extraction


def extract_detections(occupancy: np.ndarray, threshold: float = DEFAULT_CLASSIFICATION_THRESHOLD,
                       nms_radius_cells: float = 2.0) -> DetectionSet:
    """Greedy peak extraction with distance suppression and 3x3 centroid refinement.

    Candidates are cells with value >= threshold, visited in descending score
    order; a candidate within ``nms_radius_cells`` of a kept peak is dropped.
    Kept peaks are refined by the centroid of their 3x3 neighborhood; a second
    suppression pass keeps the refined points at least the radius apart.
    """
    m = np.asarray(occupancy, dtype=np.float64)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if not np.all(np.isfinite(m)):
        raise ValueError("extract_detections: map contains non-finite values")
    rows, cols = np.nonzero(m >= threshold)
    if rows.size == 0:
        return DetectionSet(points=[])
    scores = m[rows, cols]
    order = np.argsort(-scores, kind="stable")
    rows, cols, scores = rows[order], cols[order], scores[order]

    kept: list[tuple[float, float, float]] = []
    kept_rc: list[tuple[int, int]] = []
    r2 = nms_radius_cells ** 2
    h, w = m.shape
    for r, c, s in zip(rows, cols, scores):
        if any((r - kr) ** 2 + (c - kc) ** 2 < r2 for kr, kc in kept_rc):
            continue
        kept_rc.append((int(r), int(c)))
        r0, r1 = max(0, r - 1), min(h, r + 2)
        c0, c1 = max(0, c - 1), min(w, c + 2)
        patch = np.clip(m[r0:r1, c0:c1], 0.0, None)
        total = patch.sum()
        if total > 0:
            rr, cc = np.mgrid[r0:r1, c0:c1]
            y = float((rr * patch).sum() / total)
            x = float((cc * patch).sum() / total)
        else:
            y, x = float(r), float(c)
        kept.append((x, y, float(s)))

    # refinement can pull two peaks closer than the radius; drop the weaker
    final: list[tuple[float, float, float]] = []
    for x, y, s in kept:  # already sorted by descending score
        if any((x - fx) ** 2 + (y - fy) ** 2 < r2 for fx, fy, _ in final):
            continue
        final.append((x, y, s))
    return DetectionSet(points=final)


# ---------------------------------------------------------------------------
# matching


def match(dets: DetectionSet, gt_points: np.ndarray, t: float) -> MatchResult:
    """Optimal one-to-one assignment between detections and ground truth.

    Maximizes the number of pairs with distance < t and, among those, minimizes
    the total matched distance (Hungarian assignment with a barrier cost on
    disallowed pairs).  Unmatched detections are FP, unmatched GT are FN.
    """
    if t <= 0:
        raise ValueError(f"distance threshold must be > 0, got {t}")
    d_xy = dets.xy()
    g_xy = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    nd, ng = len(d_xy), len(g_xy)
    if nd == 0 or ng == 0:
        return MatchResult(tp=0, fp=nd, fn=ng)
    dist = np.linalg.norm(d_xy[:, None, :] - g_xy[None, :, :], axis=2)
    # any real assignment sums to < t * min(nd, ng), so one barrier always loses
    barrier = t * (min(nd, ng) + 1.0)
    cost = np.where(dist < t, dist, barrier)
    rows, cols = linear_sum_assignment(cost)
    matched = [float(dist[r, c]) for r, c in zip(rows, cols) if dist[r, c] < t]
    tp = len(matched)
    return MatchResult(tp=tp, fp=nd - tp, fn=ng - tp, matched_distances=matched)


# ---------------------------------------------------------------------------
# metrics


def moda(mr: MatchResult) -> float:
    denom = mr.tp + mr.fn
    if denom == 0:
        return math.nan
    return 1.0 - (mr.fp + mr.fn) / denom


def modp(mr: MatchResult, t: float) -> float:
    if mr.tp == 0:
        return math.nan
    return float(sum(1.0 - d / t for d in mr.matched_distances) / mr.tp)


def prf(mr: MatchResult) -> tuple[float, float, float]:
    p = mr.tp / (mr.tp + mr.fp) if (mr.tp + mr.fp) else math.nan
    r = mr.tp / (mr.tp + mr.fn) if (mr.tp + mr.fn) else math.nan
    if math.isnan(p) or math.isnan(r) or (p + r) == 0:
        f1 = 0.0
    else:
        f1 = 2.0 * p * r / (p + r)
    return p, r, f1


def report(mr: MatchResult, t_cells: float, t_meters: float | None = None) -> MetricReport:
    """Metric values plus machine-readable flags for undefined denominators."""
    flags: dict[str, str] = {}
    moda_v = moda(mr)
    modp_v = modp(mr, t_cells)
    p, r, f1 = prf(mr)
    if mr.tp + mr.fn == 0:
        # no ground truth: vacuously perfect when nothing was predicted either
        if mr.fp == 0:
            moda_v, r = 1.0, 1.0
            flags["moda"] = flags["recall"] = "vacuous"
        else:
            flags["moda"] = flags["recall"] = "undefined"
    if mr.tp + mr.fp == 0:
        if mr.fn == 0:
            p = 1.0
            flags["precision"] = "vacuous"
        else:
            p = 0.0
            flags["precision"] = "no-detections"
    if mr.tp == 0:
        flags["modp"] = "undefined"
        f1 = 0.0 if (mr.fp or mr.fn) else 1.0
        if not (mr.fp or mr.fn):
            flags["f1"] = "vacuous"
    return MetricReport(moda=moda_v, modp=modp_v, precision=p, recall=r, f1=f1,
                        t_cells=t_cells, t_meters=t_meters,
                        tp=mr.tp, fp=mr.fp, fn=mr.fn, flags=flags)


def aggregate(frame_results: list[MatchResult], t_cells: float,
              t_meters: float | None = None) -> MetricReport:
    """Micro-average: pool counts and matched distances, then compute metrics once."""
    if not frame_results:
        raise ValueError("aggregate: empty input")
    total = frame_results[0]
    for mr in frame_results[1:]:
        total = total + mr
    return report(total, t_cells, t_meters)


# ---------------------------------------------------------------------------
# cross-dataset ranking


def rank_methods(per_dataset_f1: dict[str, dict[str, float]]) -> tuple[dict[str, dict[str, int | float]], dict[str, float]]:
    """Rank methods by F1 per dataset (1 = best, ties share the average rank).

    Returns (ranks[dataset][method], avg_rank[method]); the average is over all
    datasets, which must share the same method set.
    """
    datasets = sorted(per_dataset_f1)
    methods = sorted(per_dataset_f1[datasets[0]])
    for ds in datasets:
        if sorted(per_dataset_f1[ds]) != methods:
            raise ValueError(f"dataset '{ds}' does not cover the same method set")
    ranks: dict[str, dict[str, float]] = {}
    for ds in datasets:
        scores = np.array([per_dataset_f1[ds][m] for m in methods])
        r = rankdata(-scores, method="average")
        ranks[ds] = {m: (int(v) if float(v).is_integer() else float(v))
                     for m, v in zip(methods, r)}
    avg = {m: float(np.mean([ranks[ds][m] for ds in datasets])) for m in methods}
    return ranks, avg
