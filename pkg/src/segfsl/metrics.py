"""Event-based F-measure, operating-point sweeps and PSDS."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching


@dataclass(frozen=True)
class MatchCriterion:
    min_iou: float = 0.3

    def __post_init__(self):
        if not 0 < self.min_iou <= 1:
            raise ValueError(f"min_iou must lie in (0, 1], got {self.min_iou}")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class PsdsConfig:
    dtc: float = 0.5
    gtc: float = 0.5
    max_efpr: float = 100.0


def _span(e):
    return (e.onset, e.offset) if hasattr(e, "onset") else (float(e[0]), float(e[1]))


def iou(a, b) -> float:
    (a0, a1), (b0, b1) = _span(a), _span(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union if union > 0 else 0.0


def match_events(predictions, ground_truth, criterion: MatchCriterion = MatchCriterion()) -> ConfusionCounts:
    """One-to-one matching of predictions to ground truth with IoU >= ``min_iou``.

    The matching maximises the number of pairs, so it never does worse than
    greedy onset-order matching and agrees with it whenever greedy is optimal.
    """
    preds = sorted(predictions, key=_span)
    truth = sorted(ground_truth, key=_span)
    tp = 0
    if preds and truth:
        ok = np.array([[iou(p, g) >= criterion.min_iou for g in truth] for p in preds])
        match = maximum_bipartite_matching(csr_matrix(ok.astype(np.int8)), perm_type="column")
        tp = int(np.count_nonzero(match >= 0))
    return ConfusionCounts(tp, len(preds) - tp, len(truth) - tp)


def f_measure(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Return (precision, recall, F1); empty denominators give 0."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def f_from_pr(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


# ---------------------------------------------------------------------------
# PSDS


def _overlap(a0, a1, b0, b1):
    return max(0.0, min(a1, b1) - max(a0, b0))


def psds_counts(predictions, ground_truth, cfg: PsdsConfig = PsdsConfig()):
    """Intersection-based counts for one file and class: (detected truths, n truths, DTC false positives).

    A detection passes the DTC when at least ``dtc`` of its duration lies
    inside ground truth; a truth is detected when passing detections cover at
    least ``gtc`` of it.
    """
    truth = [_span(g) for g in ground_truth]
    passing, fps = [], 0
    for p in predictions:
        p0, p1 = _span(p)
        dur = p1 - p0
        inside = sum(_overlap(p0, p1, g0, g1) for g0, g1 in truth)
        if dur > 0 and inside / dur >= cfg.dtc:
            passing.append((p0, p1))
        else:
            fps += 1
    detected = 0
    for g0, g1 in truth:
        covered = _union_overlap(passing, g0, g1)
        if g1 > g0 and covered / (g1 - g0) >= cfg.gtc:
            detected += 1
    return detected, len(truth), fps


def _union_overlap(spans, g0, g1):
    clipped = sorted((max(a, g0), min(b, g1)) for a, b in spans if min(b, g1) > max(a, g0))
    total, cur0, cur1 = 0.0, None, None
    for a, b in clipped:
        if cur1 is None or a > cur1:
            if cur1 is not None:
                total += cur1 - cur0
            cur0, cur1 = a, b
        else:
            cur1 = max(cur1, b)
    if cur1 is not None:
        total += cur1 - cur0
    return total


@dataclass
class OperatingPoint:
    threshold: float
    alpha: float
    beta: float
    counts: ConfusionCounts
    per_class: dict[str, ConfusionCounts] = field(default_factory=dict)
    tpr: dict[str, float] = field(default_factory=dict)
    efpr: dict[str, float] = field(default_factory=dict)

    @property
    def prf(self):
        return f_measure(self.counts)


@dataclass
class PsdRoc:
    classes: list[str]
    curves: dict[str, tuple[np.ndarray, np.ndarray]]  # class -> (efpr, tpr) step vertices
    mean_curve: tuple[np.ndarray, np.ndarray]
    psds: float
    max_efpr: float


def class_roc(efpr, tpr):
    """Upper-envelope step curve: at each distinct eFPR the best TPR reachable at or below it."""
    efpr = np.asarray(efpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    order = np.lexsort((-tpr, efpr))
    xs, ys = efpr[order], np.maximum.accumulate(tpr[order])
    keep = np.r_[xs[1:] != xs[:-1], True]
    return xs[keep], ys[keep]


def _step_value(xs, ys, at):
    i = np.searchsorted(xs, at, side="right") - 1
    return np.where(i >= 0, ys[np.clip(i, 0, None)], 0.0)


def psds(points, cfg: PsdsConfig = PsdsConfig()) -> PsdRoc:
    """PSD-ROC and PSDS from operating points carrying per-class ``tpr`` / ``efpr``.

    The mean curve averages the per-class step curves; PSDS is its area on
    [0, max_efpr] divided by max_efpr.
    """
    if not points:
        raise ValueError("psds needs at least one operating point")
    classes = sorted(points[0].tpr)
    curves = {c: class_roc([p.efpr[c] for p in points], [p.tpr[c] for p in points]) for c in classes}
    grid = np.unique(np.concatenate([[0.0, cfg.max_efpr]] + [xs for xs, _ in curves.values()]))
    grid = grid[(grid >= 0) & (grid <= cfg.max_efpr)]
    mean = np.mean([_step_value(xs, ys, grid) for xs, ys in curves.values()], axis=0)
    widths = np.diff(np.r_[grid, cfg.max_efpr])
    area = float(np.sum(mean * widths))
    return PsdRoc(classes, curves, (grid, mean), area / cfg.max_efpr, cfg.max_efpr)


def psds_from_rates(tpr_efpr: list[dict[str, tuple[float, float]]], cfg: PsdsConfig = PsdsConfig()):
    """Convenience wrapper: each entry maps class -> (tpr, efpr)."""
    pts = [OperatingPoint(0, 0, 0, ConfusionCounts(), tpr={c: v[0] for c, v in d.items()},
                          efpr={c: v[1] for c, v in d.items()}) for d in tpr_efpr]
    return psds(pts, cfg)


# ---------------------------------------------------------------------------
# scoring a detection set


@dataclass
class ScoredSet:
    counts: ConfusionCounts
    per_class: dict[str, ConfusionCounts]
    tpr: dict[str, float]
    efpr: dict[str, float]


def score_detections(detections: dict[str, list], truth: dict[str, list], class_of: dict[str, str],
                     hours_of: dict[str, float], criterion: MatchCriterion = MatchCriterion(),
                     cfg: PsdsConfig = PsdsConfig()) -> ScoredSet:
    """Score per-file detections against per-file truth.

    ``class_of`` maps file -> class and ``hours_of`` file -> evaluated hours.
    """
    per_class = defaultdict(ConfusionCounts)
    det_tp = defaultdict(int)
    n_truth = defaultdict(int)
    fps = defaultdict(int)
    hours = defaultdict(float)
    for f, gt in truth.items():
        cls = class_of[f]
        preds = detections.get(f, [])
        per_class[cls] = per_class[cls] + match_events(preds, gt, criterion)
        d, n, fp = psds_counts(preds, gt, cfg)
        det_tp[cls] += d
        n_truth[cls] += n
        fps[cls] += fp
        hours[cls] += hours_of[f]
    total = ConfusionCounts()
    for c in per_class.values():
        total = total + c
    classes = sorted(per_class)
    tpr = {c: det_tp[c] / n_truth[c] if n_truth[c] else 0.0 for c in classes}
    efpr = {c: fps[c] / hours[c] if hours[c] > 0 else 0.0 for c in classes}
    return ScoredSet(total, dict(per_class), tpr, efpr)


@dataclass
class ScoringFile:
    """One evaluation file prepared for sweeping: its averaged track and scored truth."""

    name: str
    class_id: str
    truth: list
    hours: float
    track: object = None
    context: object = None


def detections_at(files, threshold, alpha, beta, post_filter=True):
    """Per-file detections at one operating point, reusing the cached tracks."""
    from .evaluator import PostProcessConfig, detect_from_track

    cfg = PostProcessConfig(threshold=threshold, alpha=alpha, beta=beta, post_filter=post_filter)
    return {f.name: detect_from_track(f.track, f.context, cfg) for f in files}


def score_point(files, detections, threshold, alpha, beta, criterion=MatchCriterion(),
                cfg: PsdsConfig = PsdsConfig()) -> OperatingPoint:
    s = score_detections(detections, {f.name: f.truth for f in files},
                         {f.name: f.class_id for f in files}, {f.name: f.hours for f in files},
                         criterion, cfg)
    return OperatingPoint(threshold, alpha, beta, s.counts, s.per_class, s.tpr, s.efpr)


def sweep_operating_points(files, grids=None, criterion=MatchCriterion(), cfg: PsdsConfig = PsdsConfig(),
                           post_filter=True, keep_detections=False):
    """Score every (h, alpha, beta) combination over tracks computed once per file.

    Returns the operating points, plus the detection sets when
    ``keep_detections`` is set.
    """
    thresholds, alphas, betas = grids if grids is not None else default_grids()
    if not (thresholds and alphas and betas):
        raise ValueError("operating-point grids must be non-empty")
    points, dets = [], []
    for h in thresholds:
        for a in alphas:
            for b in betas:
                d = detections_at(files, h, a, b, post_filter)
                points.append(score_point(files, d, h, a, b, criterion, cfg))
                if keep_detections:
                    dets.append(d)
    return (points, dets) if keep_detections else points


def best_point(points):
    """Operating point with the highest F-measure (first one on ties)."""
    best, best_f = None, -1.0
    for p in points:
        f = p.prf[2]
        if f > best_f:
            best, best_f = p, f
    return best


def default_grids():
    thresholds = [round(0.05 * i, 2) for i in range(20)]
    alphas = [round(0.1 * i, 1) for i in range(1, 10)]
    return thresholds, alphas, [2.0]


def write_scores_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "alpha", "beta", "tp", "fp", "fn", "precision", "recall", "f1"])
        for p in points:
            pr, rc, f = p.prf
            w.writerow([f"{p.threshold:g}", f"{p.alpha:g}", f"{p.beta:g}", p.counts.tp, p.counts.fp,
                        p.counts.fn, f"{pr:.6f}", f"{rc:.6f}", f"{f:.6f}"])


def write_class_scores_csv(point, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "tp", "fp", "fn", "precision", "recall", "f1", "tpr", "efpr"])
        for cls in sorted(point.per_class):
            c = point.per_class[cls]
            pr, rc, f = f_measure(c)
            w.writerow([cls, c.tp, c.fp, c.fn, f"{pr:.6f}", f"{rc:.6f}", f"{f:.6f}",
                        f"{point.tpr.get(cls, 0.0):.6f}", f"{point.efpr.get(cls, 0.0):.6f}"])


def emit_psd_roc_csv(roc: PsdRoc, path):
    """Rows of (class_or_mean, efpr, tpr) with 12 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_or_mean", "efpr", "tpr"])
        for cls in roc.classes:
            for x, y in zip(*roc.curves[cls]):
                w.writerow([cls, f"{x:.12g}", f"{y:.12g}"])
        for x, y in zip(*roc.mean_curve):
            w.writerow(["mean", f"{x:.12g}", f"{y:.12g}"])


def read_psd_roc_csv(path):
    out = defaultdict(lambda: ([], []))
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            xs, ys = out[r["class_or_mean"]]
            xs.append(float(r["efpr"]))
            ys.append(float(r["tpr"]))
    return {k: (np.array(v[0]), np.array(v[1])) for k, v in out.items()}
