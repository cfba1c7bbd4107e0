"""Two-channel PCEN + delta-MFCC time-frequency features."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft

from .corpus_io import TARGET_RATE, AudioClip, hz_to_mel, mel_to_hz

N_FFT = 1024
HOP = 256
N_MELS = 128
LOG_FLOOR = 1e-10
DELTA_WIDTH = 4

FEATURE_MODES = ("pcen+dmfcc", "pcen", "dmfcc", "logmel", "logmel+dmfcc", "pcen+logmel")


@dataclass(frozen=True)
class PcenParams:
    smoothing: float = 0.025
    gain: float = 0.98
    bias: float = 2.0
    power: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        if not (0 < self.smoothing <= 1 and 0 <= self.gain <= 1 and self.bias >= 0
                and 0 < self.power <= 1 and self.eps > 0):
            raise ValueError(f"invalid PCEN parameters {self}")


@dataclass
class Spectrogram:
    values: np.ndarray  # (time, n_fft // 2 + 1) power
    frame_hop: int = HOP
    frame_len: int = N_FFT
    sample_rate: int = TARGET_RATE


@dataclass
class FeatureMap:
    values: np.ndarray  # (2, time, n_mels), float32
    frame_rate: float = TARGET_RATE / HOP

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def frame_to_time(t, hop=HOP, sr=TARGET_RATE):
    """Centre time (s) of frame ``t``; frame ``t`` spans ``centre ± N_FFT/2`` samples."""
    return np.asarray(t) * hop / sr


def time_to_frame(seconds, hop=HOP, sr=TARGET_RATE):
    """Nearest frame index whose centre is closest to ``seconds``."""
    return np.rint(np.asarray(seconds) * sr / hop).astype(int)


def stft_power(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP) -> Spectrogram:
    """Hann-window power spectrogram with reflect-centred frames, T = n // hop + 1."""
    x = clip.samples
    pad = n_fft // 2
    mode = "reflect" if x.size > pad else "constant"
    xp = np.pad(x, pad, mode=mode)
    n_frames = x.size // hop + 1
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    # periodic Hann, as used for spectral analysis
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    spec = rfft(xp[idx] * window, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    return Spectrogram(power, hop, n_fft, clip.sample_rate)


def mel_filterbank(sr: int = TARGET_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular Slaney-style filters (n_mels, n_fft//2+1), area-normalised."""
    fmax = sr / 2 if fmax is None else fmax
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(edges)
    ramps = edges[:, None] - freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def mel_project(spec: Spectrogram, n_mels: int = N_MELS) -> np.ndarray:
    n_bins = spec.values.shape[1]
    if n_mels > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds {n_bins} frequency bins")
    fb = mel_filterbank(spec.sample_rate, spec.frame_len, n_mels)
    return spec.values @ fb.T


def pcen(mel: np.ndarray, params: PcenParams = PcenParams()) -> np.ndarray:
    """Per-channel energy normalisation of a (time, band) energy matrix.

    Smoother ``M_t = (1-s) M_{t-1} + s E_t`` starts at ``M_0 = E_0``.
    """
    from scipy.signal import lfilter, lfilter_zi

    e = np.asarray(mel, dtype=np.float64)
    s = params.smoothing
    if e.shape[0] == 0:
        return e.copy()
    # lfilter with initial state chosen so that M_0 = E_0
    zi = lfilter_zi([s], [1.0, s - 1.0])[:, None] * e[0][None, :]
    m, _ = lfilter([s], [1.0, s - 1.0], e, axis=0, zi=zi)
    gain = np.exp(-params.gain * np.log(params.eps + m))
    out = (e * gain + params.bias) ** params.power - params.bias ** params.power
    return out


def delta(c: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression delta along time with edge-frame replication."""
    c = np.asarray(c, dtype=np.float64)
    padded = np.pad(c, ((width, width), (0, 0)), mode="edge")
    n = c.shape[0]
    num = np.zeros_like(c)
    for k in range(1, width + 1):
        num += k * (padded[width + k:width + k + n] - padded[width - k:width - k + n])
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def mfcc(mel: np.ndarray, n_coeffs: int | None = None) -> np.ndarray:
    logmel = np.log(np.asarray(mel, dtype=np.float64) + LOG_FLOOR)
    c = dct(logmel, type=2, norm="ortho", axis=1)
    return c if n_coeffs is None else c[:, :n_coeffs]


def mfcc_delta(mel: np.ndarray) -> np.ndarray:
    """Delta of all 128 MFCCs (log mel -> DCT-II -> 9-frame regression)."""
    return delta(mfcc(mel))


def extract_features(clip: AudioClip, mode: str = "pcen+dmfcc",
                     params: PcenParams = PcenParams()) -> FeatureMap:
    """Stacked two-channel feature map (2, time, 128) for a 22.05 kHz clip.

    ``mode`` selects the channel pair for feature ablations; single-feature
    modes repeat their feature in both channels so the encoder input shape
    stays fixed.
    """
    if clip.sample_rate != TARGET_RATE:
        raise ValueError(f"resample to {TARGET_RATE} Hz before feature extraction (got {clip.sample_rate})")
    if mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {mode!r}; choose from {FEATURE_MODES}")
    mel = mel_project(stft_power(clip))
    # PCEN expects energies on a 16-bit-like scale
    scaled = mel * (2 ** 31)
    parts = {}
    names = mode.split("+")
    if "pcen" in names:
        parts["pcen"] = pcen(scaled, params)
    if "dmfcc" in names:
        parts["dmfcc"] = mfcc_delta(mel)
    if "logmel" in names:
        parts["logmel"] = np.log(mel + LOG_FLOOR)
    chans = [parts[n] for n in names]
    if len(chans) == 1:
        chans = chans * 2
    return FeatureMap(np.stack(chans).astype(np.float32))


# ---------------------------------------------------------------------------
# on-disk cache: three little-endian int32 (channels, time, freq) then float32 values


def save_feature_cache(fm: FeatureMap, path):
    v = np.ascontiguousarray(fm.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", *v.shape))
        fh.write(v.tobytes())


def load_feature_cache(path) -> FeatureMap:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated feature cache")
    shape = struct.unpack_from("<3i", data, 0)
    count = int(np.prod(shape))
    if len(data) != 12 + 4 * count:
        raise ValueError(f"{path}: feature cache size does not match header {shape}")
    return FeatureMap(np.frombuffer(data, dtype="<f4", offset=12).reshape(shape).copy())
