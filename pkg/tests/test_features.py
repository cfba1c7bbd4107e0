import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segfsl import features as F
from segfsl.corpus_io import AudioClip


def sine(freq, seconds=1.0, rate=22050, amp=1.0):
    return AudioClip(amp * np.sin(2 * np.pi * freq * np.arange(int(seconds * rate)) / rate), rate)


def test_stft_shape_and_zero():
    spec = F.stft_power(AudioClip(np.zeros(22050), 22050))
    assert spec.values.shape == (87, 513)
    assert not spec.values.any()


def test_stft_sine_peak_against_direct_dft():
    clip = sine(1000.0)
    spec = F.stft_power(clip)
    assert int(np.argmax(spec.values[40])) == round(1000 * 1024 / 22050) == 46
    # direct DFT of one interior windowed frame
    n = np.arange(1024)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / 1024)
    frame = clip.samples[40 * 256 - 512:40 * 256 + 512] * w
    k = np.arange(513)[:, None]
    dft = (frame[None, :] * np.exp(-2j * np.pi * k * n[None, :] / 1024)).sum(axis=1)
    np.testing.assert_allclose(spec.values[40], np.abs(dft) ** 2, rtol=1e-8, atol=1e-6)


def test_frame_count_formula():
    for n in (1, 255, 256, 1000, 22051):
        assert F.stft_power(AudioClip(np.ones(n) * 0.1, 22050)).values.shape[0] == n // 256 + 1


def loop_filterbank(sr=22050, n_fft=1024, n_mels=128):
    """Triangles evaluated bin by bin from Slaney mel edges, scaled to unit area in Hz."""
    from segfsl.corpus_io import hz_to_mel, mel_to_hz

    lo, hi = float(hz_to_mel(0.0)), float(hz_to_mel(sr / 2))
    edges = [float(mel_to_hz(lo + (hi - lo) * k / (n_mels + 1))) for k in range(n_mels + 2)]
    out = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, centre, right = edges[m], edges[m + 1], edges[m + 2]
        for b in range(n_fft // 2 + 1):
            f = b * sr / n_fft
            if left < f <= centre:
                v = (f - left) / (centre - left)
            elif centre < f < right:
                v = (right - f) / (right - centre)
            else:
                v = 0.0
            out[m, b] = v * 2.0 / (right - left)
    return out


def test_filterbank_rows_and_linearity():
    fb = F.mel_filterbank()
    assert fb.shape == (128, 513)
    assert (fb >= 0).all() and (fb.sum(axis=1) > 0).all()
    np.testing.assert_allclose(fb, loop_filterbank(), rtol=1e-10, atol=1e-14)
    # wide upper triangles are well sampled, so their Riemann area is close to one
    areas = fb.sum(axis=1) * 22050 / 1024
    np.testing.assert_allclose(areas[64:], 1.0, rtol=0.05)
    spec = F.stft_power(sine(440.0))
    a = F.mel_project(spec)
    spec.values *= 2
    np.testing.assert_allclose(F.mel_project(spec), 2 * a)
    with pytest.raises(ValueError):
        F.mel_project(F.Spectrogram(np.ones((3, 65)), frame_len=128), n_mels=128)


def test_pcen_zero_and_closed_form():
    p = F.PcenParams()
    assert not F.pcen(np.zeros((10, 4)), p).any()
    c = 3.7e4
    out = F.pcen(np.full((4000, 2), c), p)
    # iterate the smoother by hand to its fixed point
    m = c
    for _ in range(4000):
        m = (1 - p.smoothing) * m + p.smoothing * c
    closed = (c / (p.eps + m) ** p.gain + p.bias) ** p.power - p.bias ** p.power
    np.testing.assert_allclose(out[-1], closed, rtol=1e-9)


def test_pcen_scale_invariance_at_full_gain():
    p = F.PcenParams(gain=1.0)
    e = np.random.default_rng(0).uniform(1e3, 1e5, (400, 8))
    a, b = F.pcen(e, p), F.pcen(10 * e, p)
    np.testing.assert_allclose(a, b, rtol=0.01)


def test_pcen_smoother_against_loop():
    p = F.PcenParams(smoothing=0.2)
    e = np.random.default_rng(1).uniform(0, 10, (50, 3))
    m = np.empty_like(e)
    m[0] = e[0]
    for t in range(1, 50):
        m[t] = (1 - p.smoothing) * m[t - 1] + p.smoothing * e[t]
    ref = (e / (p.eps + m) ** p.gain + p.bias) ** p.power - p.bias ** p.power
    np.testing.assert_allclose(F.pcen(e, p), ref, rtol=1e-10)


def test_pcen_params_validated():
    for bad in (dict(smoothing=0), dict(gain=1.5), dict(bias=-1), dict(power=0), dict(eps=0)):
        with pytest.raises(ValueError):
            F.PcenParams(**bad)


def test_delta_properties():
    assert not F.delta(np.ones((20, 5))).any()
    t = np.arange(30, dtype=float)[:, None] * np.array([[0.5, -2.0]])
    d = F.delta(t)
    np.testing.assert_allclose(d[4:-4], np.tile([0.5, -2.0], (22, 1)))
    c = np.random.default_rng(0).standard_normal((40, 3))
    np.testing.assert_allclose(F.delta(c[::-1])[4:-4], -F.delta(c)[::-1][4:-4])
    assert np.isfinite(F.mfcc_delta(np.zeros((10, 128)))).all()


def test_extract_shapes_and_silence():
    fm = F.extract_features(sine(1000.0))
    assert fm.values.shape == (2, 87, 128) and fm.values.dtype == np.float32
    assert fm.frame_rate == pytest.approx(22050 / 256)
    silent = F.extract_features(AudioClip(np.zeros(22050), 22050))
    assert not silent.values[0].any()
    with pytest.raises(ValueError):
        F.extract_features(sine(1000.0, rate=16000))
    with pytest.raises(ValueError):
        F.extract_features(sine(1000.0), mode="mfcc")


@pytest.mark.parametrize("mode", F.FEATURE_MODES)
def test_feature_modes_share_shape(mode):
    assert F.extract_features(sine(500.0, 0.5), mode=mode).values.shape == (2, 44, 128)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), n=st.integers(1, 6000), scale=st.sampled_from([0.0, 1e-6, 0.3, 1.0]))
def test_features_finite_for_random_audio(seed, n, scale):
    x = np.random.default_rng(seed).uniform(-1, 1, n) * scale
    fm = F.extract_features(AudioClip(x, 22050))
    assert np.isfinite(fm.values).all()
    assert fm.values.shape == (2, n // 256 + 1, 128)


def test_extract_is_deterministic_across_threads():
    clip = AudioClip(np.random.default_rng(2).uniform(-0.5, 0.5, 11025), 22050)
    ref = F.extract_features(clip).values.tobytes()
    out = []
    threads = [threading.Thread(target=lambda: out.append(F.extract_features(clip).values.tobytes()))
               for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(o == ref for o in out)


def test_frame_time_mapping():
    t = np.arange(0, 5000)
    np.testing.assert_array_equal(F.time_to_frame(F.frame_to_time(t)), t)
    secs = np.random.default_rng(0).uniform(0, 60, 100)
    assert np.all(np.abs(F.frame_to_time(F.time_to_frame(secs)) - secs) <= 256 / 22050)


def test_feature_cache_round_trip(tmp_path):
    fm = F.extract_features(sine(700.0, 0.3))
    F.save_feature_cache(fm, tmp_path / "x.feat")
    raw = (tmp_path / "x.feat").read_bytes()
    assert np.frombuffer(raw[:12], "<i4").tolist() == list(fm.values.shape)
    back = F.load_feature_cache(tmp_path / "x.feat")
    assert back.values.tobytes() == fm.values.tobytes()
    (tmp_path / "y.feat").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        F.load_feature_cache(tmp_path / "y.feat")
