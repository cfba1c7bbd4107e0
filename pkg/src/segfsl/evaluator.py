"""Per-file few-shot detection with adaptive segments and a negative-prototype ensemble."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .corpus_io import TARGET_RATE, AudioFile, LabeledRegion, file_seed
from .encoder import MIN_FRAMES, Encoder
from .features import HOP, FeatureMap, time_to_frame
from .fewshot import compute_prototypes, crop_segment
from .trainer import labeled_prefix

logger = logging.getLogger(__name__)

FRAME_RATE = TARGET_RATE / HOP


class MissingAnnotationError(ValueError):
    """The labelled prefix of a file lacks positive events or negative material."""


@dataclass(frozen=True)
class DetectionEvent:
    onset: float
    offset: float
    score: float = 1.0

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass
class EvalContext:
    file: str
    positives: list[LabeledRegion]
    negatives: list[LabeledRegion]
    duration: float

    @property
    def t_max(self) -> float:
        return max(r.duration for r in self.positives)

    @property
    def prediction_start(self) -> float:
        return self.positives[-1].offset


@dataclass
class SegmentGrid:
    segment_len: float
    hop: float
    onsets: np.ndarray  # seconds
    segment_frames: int


@dataclass
class ProbabilityTrack:
    values: np.ndarray
    start_time: float
    frame_rate: float = FRAME_RATE

    def times(self):
        return self.start_time + np.arange(self.values.size) / self.frame_rate


@dataclass(frozen=True)
class PostProcessConfig:
    threshold: float = 0.5
    alpha: float = 0.2
    beta: float = 2.0
    n_runs: int = 6
    negatives_per_run: int = 30
    post_filter: bool = True

    def __post_init__(self):
        if not self.alpha < self.beta:
            raise ValueError(f"alpha ({self.alpha}) must be smaller than beta ({self.beta})")


# ---------------------------------------------------------------------------
# segmentation


def adaptive_segment_length(t_max: float, frame_rate: float = FRAME_RATE) -> float:
    """Segment length (s) for a file whose longest labelled event lasts ``t_max`` seconds.

    Bands are closed on the right: [0, 0.1] -> 8 frames, (0.1, 0.4] -> t_max,
    (0.4, 0.8] -> t_max/2, (0.8, 3.0] -> t_max/4, above -> t_max/8.
    """
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if t_max <= 0.1:
        return 8 / frame_rate
    if t_max <= 0.4:
        return t_max
    if t_max <= 0.8:
        return t_max / 2
    if t_max <= 3.0:
        return t_max / 4
    return t_max / 8


def seconds_to_frames(seconds: float) -> int:
    return max(MIN_FRAMES, int(round(seconds * FRAME_RATE)))


def make_context(af: AudioFile, k: int = 5) -> EvalContext:
    if len(af.positives) < 1:
        raise MissingAnnotationError(f"{af.path}: no labelled positive events")
    pos, gaps = labeled_prefix(af.positives, k)
    return EvalContext(af.path, pos, gaps, af.duration)


def segment_grid(context: EvalContext, segment_len: float) -> SegmentGrid:
    hop = segment_len / 3
    start, end = context.prediction_start, context.duration
    # the tolerance stops float error from adding a segment that starts at the file end
    count = max(1, int(np.ceil(max(end - start, 0.0) / hop - 1e-9)))
    onsets = start + hop * np.arange(count)
    return SegmentGrid(segment_len, hop, onsets, seconds_to_frames(segment_len))


def grid_segments(fm: FeatureMap, grid: SegmentGrid) -> tuple[np.ndarray, np.ndarray]:
    """Stack grid crops (zero-padded at the file end); also return start frames."""
    starts = time_to_frame(grid.onsets)
    n = fm.n_frames
    segs = np.stack([crop_segment(fm.values, min(s, n), min(s + grid.segment_frames, n),
                                  grid.segment_frames) for s in starts])
    return segs, starts


def tile_positive_segments(fm: FeatureMap, positives, segment_frames: int) -> np.ndarray:
    """Segments covering each labelled event with a hop of one third of the length."""
    hop = max(1, int(round(segment_frames / 3)))
    out = []
    for r in positives:
        s = int(np.clip(time_to_frame(r.onset), 0, fm.n_frames - 1))
        e = int(np.clip(time_to_frame(r.offset), s + 1, fm.n_frames))
        if e - s <= segment_frames:
            out.append(crop_segment(fm.values, s, e, segment_frames))
            continue
        starts = list(range(s, e - segment_frames + 1, hop))
        if starts[-1] != e - segment_frames:
            starts.append(e - segment_frames)
        out.extend(fm.values[:, a:a + segment_frames] for a in starts)
    return np.stack(out)


def negative_positions(fm: FeatureMap, negatives, segment_frames: int):
    """All (start, end) crop windows that fit inside the labelled negative chunks.

    Chunks shorter than a segment contribute one zero-padded window.
    """
    pos = []
    for r in negatives:
        s = int(np.clip(time_to_frame(r.onset), 0, fm.n_frames - 1))
        e = int(np.clip(time_to_frame(r.offset), s + 1, fm.n_frames))
        if e - s >= segment_frames:
            pos.extend((a, a + segment_frames) for a in range(s, e - segment_frames + 1))
        else:
            pos.append((s, e))
    return pos


def draw_negative_segments(fm, negatives, segment_frames, count, rng):
    pos = negative_positions(fm, negatives, segment_frames)
    if not pos:
        raise MissingAnnotationError("no negative material in the labelled prefix; check the annotations")
    picks = rng.choice(len(pos), size=count, replace=len(pos) < count)
    return np.stack([crop_segment(fm.values, *pos[i], segment_frames) for i in picks])


# ---------------------------------------------------------------------------
# probabilities


def positive_probability(d_pos, d_neg):
    """Softmax over (-d_pos, -d_neg), positive entry."""
    z = np.asarray(d_neg, dtype=np.float64) - np.asarray(d_pos, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def query_probabilities(query_emb, starts, segment_frames, n_frames, pos_proto, neg_proto,
                        first_frame) -> ProbabilityTrack:
    """Per-frame probability: mean over all segments covering the frame."""
    q = np.asarray(query_emb, dtype=np.float64)
    d_pos = np.linalg.norm(q - pos_proto, axis=1)
    d_neg = np.linalg.norm(q - neg_proto, axis=1)
    p = positive_probability(d_pos, d_neg)
    length = max(n_frames - first_frame, 0)
    total = np.zeros(length)
    count = np.zeros(length)
    for s, pi in zip(starts, p):
        a = max(s - first_frame, 0)
        b = min(s + segment_frames - first_frame, length)
        total[a:b] += pi
        count[a:b] += 1
    track = np.divide(total, count, out=np.zeros(length), where=count > 0)
    return ProbabilityTrack(track, first_frame / FRAME_RATE)


@dataclass
class FileEmbeddings:
    """Everything about one file that does not depend on the negative draw."""

    context: EvalContext
    grid: SegmentGrid
    query: np.ndarray
    starts: np.ndarray
    positive_proto: np.ndarray
    n_frames: int
    first_frame: int


def prepare_file(encoder: Encoder, fm: FeatureMap, context: EvalContext,
                 segment_len: float | None = None) -> FileEmbeddings:
    seg_len = adaptive_segment_length(context.t_max) if segment_len is None else segment_len
    grid = segment_grid(context, seg_len)
    segs, starts = grid_segments(fm, grid)
    query = encoder.embed(segs)
    pos = encoder.embed(tile_positive_segments(fm, context.positives, grid.segment_frames))
    first = int(time_to_frame(context.prediction_start))
    return FileEmbeddings(context, grid, query, starts, compute_prototypes(pos.astype(np.float64)),
                          fm.n_frames, first)


def build_eval_prototypes(encoder, fm, context, rng, segment_frames=None, count=30):
    """Positive prototype from the tiled labelled events, negative from ``count`` random crops."""
    if segment_frames is None:
        segment_frames = seconds_to_frames(adaptive_segment_length(context.t_max))
    pos = encoder.embed(tile_positive_segments(fm, context.positives, segment_frames))
    neg = encoder.embed(draw_negative_segments(fm, context.negatives, segment_frames, count, rng))
    return compute_prototypes(pos.astype(np.float64)), compute_prototypes(neg.astype(np.float64))


def ensemble_runs(encoder, fm, prepared: FileEmbeddings, cfg: PostProcessConfig, seed: int,
                  keep_runs: bool = False):
    """Average the probability tracks of ``cfg.n_runs`` independent negative prototypes."""
    if cfg.n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(cfg.n_runs):
        negs = draw_negative_segments(fm, prepared.context.negatives, prepared.grid.segment_frames,
                                      cfg.negatives_per_run, rng)
        neg_proto = compute_prototypes(encoder.embed(negs).astype(np.float64))
        runs.append(query_probabilities(prepared.query, prepared.starts, prepared.grid.segment_frames,
                                        prepared.n_frames, prepared.positive_proto, neg_proto,
                                        prepared.first_frame))
    mean = np.mean([r.values for r in runs], axis=0)
    track = ProbabilityTrack(mean, runs[0].start_time)
    return (track, runs) if keep_runs else track


# ---------------------------------------------------------------------------
# events


def threshold_and_merge(track: ProbabilityTrack, h: float) -> list[DetectionEvent]:
    """Runs of consecutive frames with probability above ``h`` become events."""
    above = track.values > h
    if not above.any():
        return []
    padded = np.concatenate([[False], above, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    out = []
    for a, b in zip(edges[0::2], edges[1::2]):
        out.append(DetectionEvent(track.start_time + a / track.frame_rate,
                                  track.start_time + b / track.frame_rate,
                                  float(track.values[a:b].mean())))
    return out


def positive_frame_count(track: ProbabilityTrack, h: float) -> int:
    return int(np.count_nonzero(track.values > h))


def post_filter(events, t_max, alpha, beta):
    """Keep events whose duration lies within [alpha*t_max, beta*t_max]."""
    if not alpha < beta:
        raise ValueError(f"alpha ({alpha}) must be smaller than beta ({beta})")
    lo, hi = alpha * t_max, beta * t_max
    # small slack absorbs float error on the frame grid
    return [e for e in events if lo - 1e-9 <= e.duration <= hi + 1e-9]


def detect_from_track(track, context, cfg: PostProcessConfig):
    events = threshold_and_merge(track, cfg.threshold)
    end = context.duration
    events = [DetectionEvent(max(e.onset, context.prediction_start), min(e.offset, end), e.score)
              for e in events]
    events = [e for e in events if e.offset > e.onset]
    if cfg.post_filter:
        events = post_filter(events, context.t_max, cfg.alpha, cfg.beta)
    return events


def detect_file(encoder, fm: FeatureMap, af: AudioFile, cfg: PostProcessConfig, seed: int,
                k: int = 5, return_track: bool = False):
    """Full per-file pipeline: context, grid, ensemble, threshold/merge, duration filter."""
    context = make_context(af, k)
    prepared = prepare_file(encoder, fm, context)
    track = ensemble_runs(encoder, fm, prepared, cfg, file_seed(seed, af.path))
    events = detect_from_track(track, context, cfg)
    return (events, track, context) if return_track else events


def write_track_csv(track: ProbabilityTrack, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_time", "probability"])
        for t, p in zip(track.times(), track.values):
            w.writerow([f"{t:.6f}", f"{p:.9f}"])


def read_track_csv(path) -> ProbabilityTrack:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    times = np.array([float(r["frame_time"]) for r in rows])
    vals = np.array([float(r["probability"]) for r in rows])
    start = float(times[0]) if len(times) else 0.0
    return ProbabilityTrack(vals, start)


def scoring_truth(af: AudioFile, k: int = 5):
    """Ground truth scored for a file: positives after the ``k`` labelled ones."""
    return sorted(af.positives, key=lambda r: r.onset)[k:]
