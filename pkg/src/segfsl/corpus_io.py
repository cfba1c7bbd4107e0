"""Audio and annotation I/O, dataset indexing and synthetic corpora.

Annotation CSVs follow the DCASE few-shot bioacoustic convention::

    Audiofilename,Starttime,Endtime,<CLASS_1>,...,<CLASS_n>

with cells ``POS``, ``NEG`` or ``UNK``. Training files carry one column per
class; evaluation files carry a single ``Q`` column and take their class from
the sub-folder they live in.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import wave
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.io import wavfile
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

TARGET_RATE = 22050
POSITIVE, NEGATIVE, UNKNOWN = "positive", "negative", "unknown"
_POLARITY = {"POS": POSITIVE, "NEG": NEGATIVE, "UNK": UNKNOWN}
EVAL_COLUMN = "Q"


class AudioFormatError(ValueError):
    """Malformed or unreadable WAV data."""


class UnsupportedEncodingError(AudioFormatError):
    """WAV encoding other than PCM 8/16/24/32-bit or IEEE float."""


class AnnotationParseError(ValueError):
    """Annotation CSV that does not follow the expected layout."""


class ConfigError(ValueError):
    """Invalid synthetic-corpus or run configuration."""


# ---------------------------------------------------------------------------
# audio


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip needs a non-empty mono sample array")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path) -> AudioClip:
    """Read a WAV file as mono float samples in [-1, 1].

    Integer PCM is scaled by its full-scale value, multichannel audio is
    averaged. The sample rate is kept as stored.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported bit depth" in msg:
            raise UnsupportedEncodingError(f"{path}: {msg}") from exc
        raise AudioFormatError(f"{path}: {msg}") from exc
    except (EOFError, OSError, IndexError) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"{path}: sample dtype {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioFormatError(f"{path}: no samples")
    return AudioClip(x, int(rate))


def write_wav(path, clip: AudioClip, pcm16: bool = True):
    x = np.clip(clip.samples, -1.0, 1.0)
    if pcm16:
        data = np.round(x * 32767.0).astype("<i2")
    else:
        data = x.astype("<f4")
    wavfile.write(Path(path), clip.sample_rate, data)


def resample(clip: AudioClip, target_rate: int = TARGET_RATE) -> AudioClip:
    """Band-limited polyphase resampling (Kaiser-windowed sinc FIR)."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    g = math.gcd(int(target_rate), clip.sample_rate)
    up, down = int(target_rate) // g, clip.sample_rate // g
    y = resample_poly(clip.samples, up, down)
    return AudioClip(y, int(target_rate))


# ---------------------------------------------------------------------------
# annotations


@dataclass(frozen=True)
class LabeledRegion:
    onset: float
    offset: float
    class_id: str
    polarity: str
    file: str = ""

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def parse_annotation_csv(path, class_override: str | None = None) -> dict[str, list[LabeledRegion]]:
    """Parse one annotation CSV into regions grouped by audio file name.

    ``class_override`` replaces the column name as class id; it is used for
    evaluation files whose class is their sub-folder.
    """
    path = Path(path)
    regions: dict[str, list[LabeledRegion]] = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or [h.strip() for h in header[:3]] != ["Audiofilename", "Starttime", "Endtime"]:
            raise AnnotationParseError(f"{path}: missing Audiofilename,Starttime,Endtime header")
        class_cols = [h.strip() for h in header[3:]]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                name, start, end = row[0].strip(), float(row[1]), float(row[2])
            except (IndexError, ValueError) as exc:
                raise AnnotationParseError(f"{path}:{lineno}: {exc}") from exc
            if start >= end:
                logger.warning("%s:%d: Starttime %.6f >= Endtime %.6f, row rejected",
                               path, lineno, start, end)
                continue
            if start < 0:
                logger.warning("%s:%d: negative Starttime, row rejected", path, lineno)
                continue
            for col, cell in zip(class_cols, row[3:]):
                pol = _POLARITY.get(cell.strip().upper())
                if pol is None:
                    continue
                cls = class_override if class_override is not None else col
                regions[name].append(LabeledRegion(start, end, cls, pol, name))
    for name in regions:
        regions[name].sort(key=lambda r: (r.onset, r.offset))
    return dict(regions)


def write_annotation_csv(path, rows, class_columns):
    """Write ``rows`` of (file, onset, offset, {column: POS/NEG/UNK}) as an annotation CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Audiofilename", "Starttime", "Endtime", *class_columns])
        for name, on, off, cells in rows:
            w.writerow([name, f"{on:.6f}", f"{off:.6f}", *[cells.get(c, "UNK") for c in class_columns]])


def complement_regions(regions, duration, class_id, file=""):
    """Gaps of ``[0, duration]`` not covered by ``regions`` (any polarity)."""
    spans = sorted((r.onset, r.offset) for r in regions)
    out, cursor = [], 0.0
    for on, off in spans:
        if on > cursor:
            out.append(LabeledRegion(cursor, min(on, duration), class_id, NEGATIVE, file))
        cursor = max(cursor, off)
    if cursor < duration:
        out.append(LabeledRegion(cursor, duration, class_id, NEGATIVE, file))
    return [r for r in out if r.offset > r.onset]


# ---------------------------------------------------------------------------
# dataset index


@dataclass
class AudioFile:
    path: str
    duration: float
    class_id: str
    positives: list[LabeledRegion] = field(default_factory=list)
    negatives: list[LabeledRegion] = field(default_factory=list)
    unknowns: list[LabeledRegion] = field(default_factory=list)


@dataclass
class DatasetIndex:
    """Files and labelled regions of one split, grouped by class."""

    role: str
    files: dict[str, AudioFile] = field(default_factory=dict)
    regions_by_class: dict[str, dict[str, list[LabeledRegion]]] = field(default_factory=dict)
    source: str = ""

    @property
    def classes(self) -> list[str]:
        return sorted(self.regions_by_class)

    def positives(self, class_id):
        return self.regions_by_class[class_id][POSITIVE]

    def negatives(self, class_id):
        return self.regions_by_class[class_id][NEGATIVE]

    def add_file(self, af: AudioFile):
        self.files[af.path] = af
        for pol, regs in ((POSITIVE, af.positives), (NEGATIVE, af.negatives)):
            for r in regs:
                bucket = self.regions_by_class.setdefault(r.class_id, {POSITIVE: [], NEGATIVE: []})
                bucket[pol].append(r)

    def files_of_class(self, class_id):
        return sorted(p for p, f in self.files.items() if f.class_id == class_id)

    def validate(self):
        for cls, pools in self.regions_by_class.items():
            for regs in pools.values():
                for r in regs:
                    if r.file not in self.files:
                        raise ValueError(f"region of class {cls} refers to unknown file {r.file}")


def _wav_duration(path):
    try:
        with wave.open(str(path)) as w:
            return w.getnframes() / w.getframerate()
    except (wave.Error, EOFError):
        clip = read_wav(path)
        return clip.duration


def index_split(root, role: str, subfolder_classes: bool | None = None) -> DatasetIndex:
    """Index every ``*.csv``/``*.wav`` pair below ``root``.

    With ``subfolder_classes`` (default: role is ``validation`` or
    ``evaluation``) regions take their class id from the parent folder name.
    Negative regions default to the complement of positive and unknown
    regions when a file has no explicit NEG rows.
    """
    root = Path(root)
    if subfolder_classes is None:
        subfolder_classes = role in ("validation", "evaluation")
    index = DatasetIndex(role=role, source=str(root))
    for csv_path in sorted(root.rglob("*.csv")):
        wav_path = csv_path.with_suffix(".wav")
        if not wav_path.exists():
            logger.warning("annotation %s has no matching audio, skipped", csv_path)
            continue
        override = csv_path.parent.name if subfolder_classes else None
        per_file = parse_annotation_csv(csv_path, class_override=override)
        duration = _wav_duration(wav_path)
        regs = [r for rs in per_file.values() for r in rs]
        by_class = defaultdict(list)
        for r in regs:
            on, off = r.onset, min(r.offset, duration)
            if off < r.offset:
                logger.warning("%s: region [%.3f, %.3f] exceeds file end, clamped", csv_path, r.onset, r.offset)
            if off <= on:
                continue
            by_class[r.class_id].append(LabeledRegion(on, off, r.class_id, r.polarity, str(wav_path)))
        if not by_class:
            continue
        # several class columns in one file: each class is treated independently
        af = AudioFile(str(wav_path), duration, sorted(by_class)[0])
        for cls, cregs in sorted(by_class.items()):
            pos = [r for r in cregs if r.polarity == POSITIVE]
            neg = [r for r in cregs if r.polarity == NEGATIVE]
            unk = [r for r in cregs if r.polarity == UNKNOWN]
            if pos and not neg:
                neg = complement_regions(pos + unk, duration, cls, str(wav_path))
            af.positives += pos
            af.negatives += neg if pos else []
            af.unknowns += unk
        if af.positives:
            index.add_file(af)
    index.validate()
    return index


# ---------------------------------------------------------------------------
# detections


def write_detections_csv(events, path):
    """Write (file, event) pairs; events need ``onset``/``offset`` attributes or tuples."""
    rows = []
    for name, ev in events:
        on, off = (ev.onset, ev.offset) if hasattr(ev, "onset") else (ev[0], ev[1])
        if not on < off:
            raise ValueError(f"detection for {name} has onset {on} >= offset {off}")
        rows.append((str(name), float(on), float(off)))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Audiofilename", "Starttime", "Endtime"])
        for name, on, off in rows:
            w.writerow([name, f"{on:.6f}", f"{off:.6f}"])


def read_detections_csv(path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or [h.strip() for h in header[:3]] != ["Audiofilename", "Starttime", "Endtime"]:
            raise AnnotationParseError(f"{path}: missing Audiofilename,Starttime,Endtime header")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append((row[0], float(row[1]), float(row[2])))
            except (IndexError, ValueError) as exc:
                raise AnnotationParseError(f"{path}:{lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# synthetic corpora


def hz_to_mel(f):
    """Slaney mel scale (linear below 1 kHz, logarithmic above)."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@dataclass
class ToneClass:
    name: str
    fundamental: float
    am_rate: float


@dataclass
class SyntheticSpec:
    """One split of a synthetic corpus: tone-burst classes over noise.

    ``distractors_per_file`` unlabelled bursts at frequencies outside every
    class band are mixed into the background so the negative material is not
    pure noise.
    """

    n_classes: int = 3
    files_per_class: int = 10
    events_per_file: int = 10
    event_duration_range: tuple[float, float] = (0.15, 0.35)
    tones: list[ToneClass] | None = None
    noise_floor_db: float = -26.0
    file_duration: float = 60.0
    sample_rate: int = TARGET_RATE
    distractors_per_file: int = 6
    min_gap: float = 0.1
    seed: int = 0
    name_prefix: str = "C"
    subfolder_layout: bool = False

    def resolved_tones(self) -> list[ToneClass]:
        if self.tones is not None:
            return list(self.tones)
        return default_tones(self.n_classes, offset=0, prefix=self.name_prefix)

    def validate(self):
        lo, hi = self.event_duration_range
        if not 0 < lo <= hi:
            raise ConfigError(f"event_duration_range must satisfy 0 < min <= max, got {self.event_duration_range}")
        if self.n_classes < 1 or self.files_per_class < 1 or self.events_per_file < 1:
            raise ConfigError("n_classes, files_per_class and events_per_file must be >= 1")
        need = self.events_per_file * (hi + self.min_gap) + self.min_gap
        if need > self.file_duration:
            raise ConfigError(
                f"infeasible packing: {self.events_per_file} events of up to {hi}s with "
                f"{self.min_gap}s gaps need {need:.2f}s but file_duration is {self.file_duration}s")
        tones = self.resolved_tones()
        if len(tones) != self.n_classes:
            raise ConfigError(f"{len(tones)} tone classes given for n_classes={self.n_classes}")
        mels = sorted(float(hz_to_mel(t.fundamental)) for t in tones)
        # one band of a 128-band filterbank spanning 0..Nyquist
        band = float(hz_to_mel(self.sample_rate / 2)) / 129
        for a, b in zip(mels, mels[1:]):
            if b - a < band:
                raise ConfigError("class fundamentals must be at least one mel band apart")
        for t in tones:
            if not 0 < t.fundamental < self.sample_rate / 2:
                raise ConfigError(f"fundamental {t.fundamental} Hz outside (0, Nyquist)")

    def to_dict(self):
        d = asdict(self)
        d["event_duration_range"] = list(self.event_duration_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic-spec keys: {sorted(unknown)}")
        if "event_duration_range" in d:
            d["event_duration_range"] = tuple(d["event_duration_range"])
        if d.get("tones") is not None:
            d["tones"] = [ToneClass(**t) if isinstance(t, dict) else t for t in d["tones"]]
        return cls(**d)


# Fundamentals sit on a log grid between 400 Hz and 8 kHz. Class k of a split
# with offset o uses slot o + k; distractors use the half-way slots.
_TONE_SLOTS = np.geomspace(400.0, 8000.0, 24)


def default_tones(n, offset=0, prefix="C"):
    if offset + n > len(_TONE_SLOTS):
        raise ConfigError(f"at most {len(_TONE_SLOTS) - offset} default tone classes available")
    return [ToneClass(f"{prefix}{k}", float(round(_TONE_SLOTS[offset + k], 1)), 4.0 + 3.0 * ((offset + k) % 5))
            for k in range(n)]


def _burst(rng, duration, rate, f0, am_rate, amplitude):
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    phase = rng.uniform(0, 2 * np.pi)
    # second harmonic gives the classes some spectral texture
    carrier = np.sin(2 * np.pi * f0 * t + phase) + 0.35 * np.sin(4 * np.pi * f0 * t + 2 * phase)
    am = 0.65 + 0.35 * np.sin(2 * np.pi * am_rate * t)
    ramp = min(n // 2, int(0.005 * rate))
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return amplitude * carrier * am * env / 1.35


def _place_events(rng, n, lo, hi, duration, gap):
    """Random non-overlapping (onset, duration) pairs with >= ``gap`` spacing."""
    durs = rng.uniform(lo, hi, size=n)
    slack = duration - durs.sum() - gap * (n + 1)
    # random split of the slack between n+1 gaps
    cuts = np.sort(rng.uniform(0, slack, size=n))
    extra = np.diff(np.concatenate([[0.0], cuts]))
    onsets, cursor = [], 0.0
    for k in range(n):
        cursor += gap + extra[k]
        onsets.append(cursor)
        cursor += durs[k]
    return onsets, list(durs)


def _distractor_freqs(tones, sample_rate):
    mels = np.sort(hz_to_mel([t.fundamental for t in tones]))
    grid = hz_to_mel(np.sqrt(_TONE_SLOTS[:-1] * _TONE_SLOTS[1:]))
    band = float(hz_to_mel(sample_rate / 2)) / 129
    ok = [float(mel_to_hz(m)) for m in grid if np.min(np.abs(mels - m)) >= 3 * band]
    return ok or [float(mel_to_hz(grid[0]))]


def synthesize_file(spec: SyntheticSpec, tone: ToneClass, rng):
    """Return (samples, [(onset, offset)]) for one file of class ``tone``."""
    rate = spec.sample_rate
    n = int(round(spec.file_duration * rate))
    noise_amp = 0.3 * 10 ** (spec.noise_floor_db / 20)
    x = rng.normal(0.0, noise_amp, size=n)
    lo, hi = spec.event_duration_range
    onsets, durs = _place_events(rng, spec.events_per_file, lo, hi, spec.file_duration, spec.min_gap)
    events = []
    for on, d in zip(onsets, durs):
        # snap to the sample grid so annotations are exact
        i0 = int(round(on * rate))
        i1 = i0 + int(round(d * rate))
        amp = rng.uniform(0.22, 0.3)
        x[i0:i1] += _burst(rng, (i1 - i0) / rate, rate, tone.fundamental, tone.am_rate, amp)
        events.append((i0 / rate, i1 / rate))
    # distractors go into gaps, keeping min_gap away from every event
    freqs = _distractor_freqs(spec.resolved_tones(), rate)
    gaps = [(a[1] + spec.min_gap, b[0] - spec.min_gap)
            for a, b in zip([(0.0, 0.0)] + events, events + [(spec.file_duration, spec.file_duration)])]
    for _ in range(spec.distractors_per_file):
        d = rng.uniform(lo, hi)
        fits = [(a, b) for a, b in gaps if b - a >= d]
        if not fits:
            break
        a, b = fits[rng.integers(len(fits))]
        on = rng.uniform(a, b - d)
        i0 = int(round(on * rate))
        f = freqs[rng.integers(len(freqs))]
        burst = _burst(rng, d, rate, f, rng.uniform(3, 15), rng.uniform(0.1, 0.25))
        x[i0:i0 + burst.size] += burst[: max(0, min(burst.size, n - i0))]
    return np.clip(x, -1.0, 1.0), events


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir, role="train"):
    """Write one split to ``out_dir`` and return its :class:`DatasetIndex`.

    Training splits get one class column per file; validation/evaluation
    splits (``subfolder_layout``) store each class in its own sub-folder with a
    ``Q`` column.
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    for tone in spec.resolved_tones():
        cls_dir = out_dir / tone.name
        cls_dir.mkdir(parents=True, exist_ok=True)
        for k in range(spec.files_per_class):
            stem = f"{tone.name}_{k:03d}"
            samples, events = synthesize_file(spec, tone, rng)
            write_wav(cls_dir / f"{stem}.wav", AudioClip(samples, spec.sample_rate))
            column = EVAL_COLUMN if spec.subfolder_layout else tone.name
            rows = [(f"{stem}.wav", on, off, {column: "POS"}) for on, off in events]
            write_annotation_csv(cls_dir / f"{stem}.csv", rows, [column])
    return index_split(out_dir, role, subfolder_classes=spec.subfolder_layout)


@dataclass
class CorpusSpec:
    """Train / validation / evaluation layout of a synthetic corpus."""

    train: SyntheticSpec
    val: SyntheticSpec
    eval: SyntheticSpec

    @classmethod
    def default(cls, seed: int = 0) -> "CorpusSpec":
        target = default_tones(3, offset=14, prefix="E")
        train = SyntheticSpec(n_classes=6, files_per_class=5, tones=default_tones(6, offset=2, prefix="T"),
                              seed=seed, name_prefix="T")
        val = SyntheticSpec(n_classes=3, files_per_class=3, tones=target, seed=seed + 1,
                            name_prefix="E", subfolder_layout=True)
        ev = SyntheticSpec(n_classes=3, files_per_class=10, tones=target, seed=seed + 2,
                           name_prefix="E", subfolder_layout=True)
        return cls(train, val, ev)

    def to_dict(self):
        return {"train": self.train.to_dict(), "val": self.val.to_dict(), "eval": self.eval.to_dict()}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"train", "val", "eval"}
        if unknown:
            raise ConfigError(f"unknown corpus keys: {sorted(unknown)}")
        base = cls.default()
        parts = {}
        for k in ("train", "val", "eval"):
            merged = getattr(base, k).to_dict()
            merged.update(d.get(k, {}))
            parts[k] = SyntheticSpec.from_dict(merged)
        return cls(**parts)


SPLIT_DIRS = {"train": "train", "val": "val", "eval": "eval"}
SPLIT_ROLES = {"train": "train", "val": "validation", "eval": "evaluation"}


def generate_corpus(corpus: CorpusSpec, out_dir):
    """Write ``train/``, ``val/`` and ``eval/`` below ``out_dir``; return the three indices."""
    for spec in (corpus.train, corpus.val, corpus.eval):
        spec.validate()
    out_dir = Path(out_dir)
    out = {}
    for split in ("train", "val", "eval"):
        out[split] = generate_synthetic_corpus(getattr(corpus, split), out_dir / SPLIT_DIRS[split],
                                               role=SPLIT_ROLES[split])
    with open(out_dir / "corpus.yaml", "w") as fh:
        yaml.safe_dump(corpus.to_dict(), fh, sort_keys=True)
    return out


def load_corpus(root):
    root = Path(root)
    return {split: index_split(root / d, SPLIT_ROLES[split]) for split, d in SPLIT_DIRS.items()
            if (root / d).is_dir()}


def file_seed(seed: int, path) -> int:
    """Stable per-file seed so parallel processing order never changes results."""
    h = hashlib.sha256(f"{seed}:{Path(path).name}".encode()).digest()
    return int.from_bytes(h[:8], "little")
