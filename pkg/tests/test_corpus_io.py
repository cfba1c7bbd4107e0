import struct

import numpy as np
import pytest
from scipy.io import wavfile

from segfsl import corpus_io as C


def _raw_wav(path, fmt_tag, channels=1, rate=8000, bits=4, data=b"\x00" * 16):
    block = channels * max(bits // 8, 1)
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_read_silence(tmp_path):
    wavfile.write(tmp_path / "s.wav", 22050, np.zeros(22050, np.int16))
    clip = C.read_wav(tmp_path / "s.wav")
    assert clip.sample_rate == 22050 and clip.samples.size == 22050
    assert not clip.samples.any()


def test_read_pcm16_scaling(tmp_path):
    wavfile.write(tmp_path / "s.wav", 8000, np.array([16384, -32768, 0], np.int16))
    clip = C.read_wav(tmp_path / "s.wav")
    assert clip.samples[0] == pytest.approx(0.5, abs=1 / 32768)
    assert clip.samples[1] == -1.0


def test_read_stereo_averages(tmp_path):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 1000).astype(np.float32)
    wavfile.write(tmp_path / "st.wav", 16000, np.stack([x, -x], axis=1))
    clip = C.read_wav(tmp_path / "st.wav")
    np.testing.assert_array_equal(clip.samples, 0.0)


def test_read_float32(tmp_path):
    x = np.linspace(-1, 1, 50).astype(np.float32)
    wavfile.write(tmp_path / "f.wav", 16000, x)
    np.testing.assert_allclose(C.read_wav(tmp_path / "f.wav").samples, x)


def test_malformed_and_unsupported(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(C.AudioFormatError):
        C.read_wav(tmp_path / "junk.wav")
    _raw_wav(tmp_path / "adpcm.wav", fmt_tag=2)
    with pytest.raises(C.UnsupportedEncodingError):
        C.read_wav(tmp_path / "adpcm.wav")


def test_audio_clip_invariants():
    with pytest.raises(ValueError):
        C.AudioClip(np.zeros(0), 22050)
    with pytest.raises(ValueError):
        C.AudioClip(np.array([0.0, np.nan]), 22050)
    with pytest.raises(ValueError):
        C.AudioClip(np.zeros(4), 0)


def test_resample_identity_and_lengths():
    x = np.random.default_rng(1).standard_normal(1234) * 0.1
    out = C.resample(C.AudioClip(x, 22050), 22050)
    np.testing.assert_array_equal(out.samples, x)
    for n in (1000, 8000, 12345):
        out = C.resample(C.AudioClip(np.zeros(n), 8000), 22050)
        assert abs(out.samples.size - round(n * 22050 / 8000)) <= 1
    with pytest.raises(ValueError):
        C.resample(C.AudioClip(x, 22050), 0)


def test_resample_sine_against_analytic():
    n = 44100
    t = np.arange(n) / 44100
    out = C.resample(C.AudioClip(0.8 * np.sin(2 * np.pi * 1000 * t), 44100), 22050)
    ref = 0.8 * np.sin(2 * np.pi * 1000 * np.arange(out.samples.size) / 22050)
    mid = slice(500, -500)
    assert np.max(np.abs(out.samples[mid] - ref[mid])) <= 0.01 * 0.8
    assert np.max(np.abs(out.samples[mid])) == pytest.approx(0.8, rel=0.01)


def _write_csv(path, text):
    path.write_text(text)
    return path


def test_parse_annotation_examples(tmp_path):
    p = _write_csv(tmp_path / "a.csv", "Audiofilename,Starttime,Endtime,Q\na.wav,1.0,2.0,POS\n"
                                      "a.wav,3.0,4.0,NEG\na.wav,5.0,6.0,UNK\n")
    regs = C.parse_annotation_csv(p)["a.wav"]
    assert [(r.onset, r.offset, r.polarity) for r in regs] == [
        (1.0, 2.0, C.POSITIVE), (3.0, 4.0, C.NEGATIVE), (5.0, 6.0, C.UNKNOWN)]
    assert regs[0].class_id == "Q"
    assert C.parse_annotation_csv(p, class_override="owl")["a.wav"][0].class_id == "owl"


def test_parse_rejects_bad_header_and_rows(tmp_path, caplog):
    with pytest.raises(C.AnnotationParseError):
        C.parse_annotation_csv(_write_csv(tmp_path / "b.csv", "file,start,end,Q\na.wav,1,2,POS\n"))
    p = _write_csv(tmp_path / "c.csv", "Audiofilename,Starttime,Endtime,Q\na.wav,2.0,1.0,POS\na.wav,3,4,POS\n")
    regs = C.parse_annotation_csv(p)["a.wav"]
    assert len(regs) == 1 and "row rejected" in caplog.text
    with pytest.raises(C.AnnotationParseError):
        C.parse_annotation_csv(_write_csv(tmp_path / "d.csv", "Audiofilename,Starttime,Endtime,Q\na.wav,x,2,POS\n"))


def test_index_excludes_unknown_and_builds_complement(tmp_path):
    d = tmp_path / "owl"
    d.mkdir()
    wavfile.write(d / "a.wav", 22050, np.zeros(22050 * 10, np.int16))
    _write_csv(d / "a.csv", "Audiofilename,Starttime,Endtime,Q\na.wav,1.0,2.0,POS\na.wav,4.0,5.0,UNK\n"
                            "a.wav,7.0,8.0,POS\n")
    idx = C.index_split(tmp_path, "evaluation")
    assert idx.classes == ["owl"]
    af = next(iter(idx.files.values()))
    assert [(r.onset, r.offset) for r in af.positives] == [(1.0, 2.0), (7.0, 8.0)]
    assert [(r.onset, r.offset) for r in af.negatives] == [(0.0, 1.0), (2.0, 4.0), (5.0, 7.0), (8.0, 10.0)]
    # unknown material sits in neither pool
    assert sum(r.duration for r in af.positives + af.negatives) == pytest.approx(9.0)
    assert len(af.unknowns) == 1


def test_multiple_class_columns_are_independent(tmp_path):
    d = tmp_path / "x"
    d.mkdir()
    wavfile.write(d / "m.wav", 22050, np.zeros(22050 * 4, np.int16))
    _write_csv(d / "m.csv", "Audiofilename,Starttime,Endtime,A,B\nm.wav,1.0,1.5,POS,NEG\nm.wav,2.0,2.5,NEG,POS\n")
    idx = C.index_split(tmp_path, "train")
    assert idx.classes == ["A", "B"]
    assert [(r.onset, r.offset) for r in idx.positives("A")] == [(1.0, 1.5)]
    assert [(r.onset, r.offset) for r in idx.positives("B")] == [(2.0, 2.5)]
    assert [(r.onset, r.offset) for r in idx.negatives("A")] == [(2.0, 2.5)]


def test_detections_csv_examples(tmp_path):
    C.write_detections_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "Audiofilename,Starttime,Endtime\n"
    C.write_detections_csv([("a.wav", (1.5, 2.25))], tmp_path / "o.csv")
    assert (tmp_path / "o.csv").read_text().splitlines()[1] == "a.wav,1.500000,2.250000"
    with pytest.raises(ValueError):
        C.write_detections_csv([("a.wav", (2.0, 2.0))], tmp_path / "bad.csv")


def test_detections_round_trip_sorted(tmp_path):
    rng = np.random.default_rng(0)
    events = []
    for _ in range(50):
        on = float(rng.uniform(0, 100))
        events.append((f"f{rng.integers(3)}.wav", (on, on + float(rng.uniform(0.01, 2)))))
    C.write_detections_csv(events, tmp_path / "d.csv")
    back = C.read_detections_csv(tmp_path / "d.csv")
    assert [(n, on) for n, on, _ in back] == sorted((n, on) for n, on, _ in back)
    ref = sorted((n, e[0], e[1]) for n, e in events)
    for (n1, a1, b1), (n2, a2, b2) in zip(back, ref):
        assert n1 == n2 and abs(a1 - a2) <= 1e-6 and abs(b1 - b2) <= 1e-6


def small_spec(**kw):
    base = dict(n_classes=3, files_per_class=1, events_per_file=5, file_duration=6.0, seed=3)
    base.update(kw)
    return C.SyntheticSpec(**base)


def test_synthesis_is_deterministic(tmp_path):
    C.generate_synthetic_corpus(small_spec(), tmp_path / "a")
    C.generate_synthetic_corpus(small_spec(), tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_synthesis_counts_gaps_and_rms(tmp_path):
    spec = small_spec()
    idx = C.generate_synthetic_corpus(spec, tmp_path)
    assert len(idx.files) == 3
    for path, af in idx.files.items():
        csv_rows = open(path[:-4] + ".csv").read().splitlines()[1:]
        assert sum(r.endswith(",POS") for r in csv_rows) == 5
        clip = C.read_wav(path)
        spans = sorted((r.onset, r.offset) for r in af.positives)
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            assert b0 - a1 >= 0.1 - 1e-9
        for on, off in spans:
            # six-decimal seconds resolve the sample grid to well under a sample
            assert abs(on * 22050 - round(on * 22050)) < 0.05
            assert abs(off * 22050 - round(off * 22050)) < 0.05
            inside = clip.samples[int(round(on * 22050)):int(round(off * 22050))]
            gap = clip.samples[int(round((on - 0.09) * 22050)):int(round(on * 22050))]
            assert np.sqrt(np.mean(inside ** 2)) >= 3 * np.sqrt(np.mean(gap ** 2))


def test_synthesis_rejects_infeasible_and_close_tones(tmp_path):
    with pytest.raises(C.ConfigError):
        C.generate_synthetic_corpus(small_spec(events_per_file=40, file_duration=5.0), tmp_path)
    tones = [C.ToneClass("a", 1000.0, 4.0), C.ToneClass("b", 1001.0, 4.0)]
    with pytest.raises(C.ConfigError):
        small_spec(n_classes=2, tones=tones).validate()
    with pytest.raises(C.ConfigError):
        small_spec(event_duration_range=(0.5, 0.2)).validate()


def test_synthetic_spec_round_trip():
    spec = C.CorpusSpec.default(seed=4)
    back = C.CorpusSpec.from_dict(spec.to_dict())
    assert back == spec
    with pytest.raises(C.ConfigError):
        C.CorpusSpec.from_dict({"train": {"bogus": 1}})


def test_file_seed_depends_on_name_only():
    assert C.file_seed(1, "/a/b/x.wav") == C.file_seed(1, "/c/x.wav")
    assert C.file_seed(1, "x.wav") != C.file_seed(2, "x.wav")
