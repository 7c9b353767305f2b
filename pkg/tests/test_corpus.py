import csv
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depvox.corpus import (DEPRESSED, HEALTHY, Manifest, ManifestError, Recording, SynthSpec, WavFormatError,
                           binarize, generate_synthetic_corpus, load_manifest, read_wav, save_manifest,
                           segment_audio, segment_fixed, segment_interview, segment_recording,
                           write_segments_csv, write_wav)


def _rec(rid="a", score=3, spans=None, dur=None, sr=100, **kw):
    r = Recording(rid, "s1", f"{rid}.wav", sr, score, response_spans=spans, **kw)
    if dur is not None:
        r.samples = np.zeros(int(round(dur * sr)))
    return r


def _write_manifest(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def _row(rid, score=3, **kw):
    return {"id": rid, "speaker_id": "s", "audio_path": f"{rid}.wav", "sample_rate": 16000,
            "depression_score": score, **kw}


# -- manifest --------------------------------------------------------------------

def test_load_three_records(tmp_path):
    _write_manifest(tmp_path / "m.jsonl", [_row("a"), _row("b"), _row("c")])
    m = load_manifest(tmp_path / "m.jsonl")
    assert [r.id for r in m.records] == ["a", "b", "c"]
    assert m.records[0].path == tmp_path / "a.wav"


def test_duplicate_id_rejected(tmp_path):
    _write_manifest(tmp_path / "m.jsonl", [_row("a"), _row("a")])
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path / "m.jsonl")


def test_malformed_line_reports_line_number(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps(_row("a")) + "\n{oops\n")
    with pytest.raises(ManifestError, match=r"m\.jsonl:2"):
        load_manifest(tmp_path / "m.jsonl")


def test_missing_field(tmp_path):
    row = _row("a")
    del row["sample_rate"]
    _write_manifest(tmp_path / "m.jsonl", [row])
    with pytest.raises(ManifestError, match="sample_rate"):
        load_manifest(tmp_path / "m.jsonl")


def test_score_at_threshold_is_depressed(tmp_path):
    _write_manifest(tmp_path / "m.jsonl", [_row("a", 10, threshold=10), _row("b", 9, threshold=10)])
    m = load_manifest(tmp_path / "m.jsonl")
    assert [m.label(r) for r in m.records] == [DEPRESSED, HEALTHY]


def test_score_out_of_scale_range():
    with pytest.raises(ManifestError, match="outside madrs"):
        Manifest([_rec(score=22)], scale="madrs")


def test_overlapping_spans_rejected():
    with pytest.raises(ManifestError, match="non-overlapping"):
        Manifest([_rec(spans=[(0.0, 2.0), (1.5, 3.0)])])


def test_manifest_roundtrip(tmp_path):
    m = Manifest([_rec("a", 12, spans=[(0.0, 6.0)], split="test"), _rec("b", 2)], threshold=12)
    save_manifest(m, tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert [r.to_json() for r in back.records] == [r.to_json() for r in m.records]
    assert back.threshold == 12


@pytest.mark.parametrize("score", range(25))
def test_binarization_rule(score):
    assert binarize(score) == (DEPRESSED if score >= 10 else HEALTHY)


# -- WAV ----------------------------------------------------------------------------

def _raw_wav(path, pcm: bytes, fmt=1, channels=1, bits=16, sr=16000, declared=None):
    data_len = len(pcm) if declared is None else declared
    block = channels * bits // 8
    hdr = b"RIFF" + struct.pack("<I", 36 + data_len) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, fmt, channels, sr, sr * block, block, bits)
    hdr += b"data" + struct.pack("<I", data_len)
    path.write_bytes(hdr + pcm)


def test_wav_silence(tmp_path):
    _raw_wav(tmp_path / "z.wav", bytes(32000))
    sr, x = read_wav(tmp_path / "z.wav")
    assert sr == 16000 and len(x) == 16000 and not x.any()


def test_wav_scaling_identities(tmp_path):
    _raw_wav(tmp_path / "v.wav", struct.pack("<3h", 16384, -32768, 32767))
    _, x = read_wav(tmp_path / "v.wav")
    assert x[0] == 0.5 and x[1] == -1.0 and x[2] == 32767 / 32768


def test_wav_rejects_float_format(tmp_path):
    _raw_wav(tmp_path / "f.wav", bytes(8), fmt=3, bits=32)
    with pytest.raises(WavFormatError, match="format"):
        read_wav(tmp_path / "f.wav")


def test_wav_rejects_stereo(tmp_path):
    _raw_wav(tmp_path / "s.wav", bytes(16), channels=2)
    with pytest.raises(WavFormatError, match="channels"):
        read_wav(tmp_path / "s.wav")


def test_wav_rejects_8bit(tmp_path):
    _raw_wav(tmp_path / "b.wav", bytes(16), bits=8)
    with pytest.raises(WavFormatError, match="sample width"):
        read_wav(tmp_path / "b.wav")


def test_wav_truncated_header(tmp_path):
    (tmp_path / "t.wav").write_bytes(b"RIFF\x10\x00")
    with pytest.raises(WavFormatError, match="header"):
        read_wav(tmp_path / "t.wav")


def test_wav_truncated_data(tmp_path):
    _raw_wav(tmp_path / "d.wav", bytes(10), declared=100)
    with pytest.raises(WavFormatError, match="data chunk"):
        read_wav(tmp_path / "d.wav")


def test_wav_write_read_roundtrip(tmp_path):
    x = np.round(np.random.default_rng(0).uniform(-1, 1, 1234) * 32768).clip(-32768, 32767) / 32768
    write_wav(tmp_path / "r.wav", x, 8000)
    sr, y = read_wav(tmp_path / "r.wav")
    assert sr == 8000
    np.testing.assert_array_equal(x, y)


# -- segmentation ----------------------------------------------------------------------

def _spans(durations, gap=1.0):
    out, t = [], 0.0
    for d in durations:
        out.append((t, t + d))
        t += d + gap
    return out


def test_interview_single_long_span():
    segs = segment_interview(_rec(spans=_spans([6])))
    assert len(segs) == 1 and segs[0].speech_sec == 6.0


def test_interview_greedy_merge_hand_trace():
    segs = segment_interview(_rec(spans=_spans([3, 3, 6])))
    assert [s.speech_sec for s in segs] == [6.0, 6.0]
    assert [s.index for s in segs] == [0, 1]
    # first segment spans two responses and the 1 s gap between them
    assert (segs[0].start_sec, segs[0].end_sec) == (0.0, 7.0)


def test_interview_trailing_dropped():
    assert segment_interview(_rec(spans=_spans([2, 2]))) == []


def test_interview_no_spans():
    assert segment_interview(_rec(spans=[])) == []


def test_interview_audio_excludes_gaps():
    r = _rec(spans=_spans([3, 3]), dur=8.0)
    seg = segment_interview(r)[0]
    assert len(segment_audio(r, seg)) == 600


@pytest.mark.parametrize("dur,n", [(300.0, 60), (12.5, 2), (4.9, 0)])
def test_fixed_segment_counts(dur, n):
    segs = segment_fixed(_rec(dur=dur))
    assert len(segs) == n
    assert all(s.duration == 5.0 for s in segs)


def test_segment_recording_dispatch():
    assert len(segment_recording(_rec(dur=11.0))) == 2
    assert len(segment_recording(_rec(spans=_spans([5, 5]), dur=12.0))) == 2


def test_segment_label_inherited():
    segs = segment_fixed(_rec(score=15, dur=20.0))
    assert {s.label for s in segs} == {DEPRESSED}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.1, 12.0), max_size=25), st.floats(0.0, 3.0))
def test_interview_invariants(durations, gap):
    spans = _spans(durations, gap)
    segs = segment_interview(_rec(spans=spans))
    assert all(s.speech_sec >= 5.0 - 1e-9 for s in segs)
    assert sum(s.speech_sec for s in segs) <= sum(durations) + 1e-9
    for a, b in zip(segs, segs[1:]):
        assert a.end_sec <= b.start_sec
    assert [s.index for s in segs] == list(range(len(segs)))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 400.0))
def test_fixed_invariants(dur):
    segs = segment_fixed(_rec(dur=dur))
    assert len(segs) == int(round(dur * 100)) // 500
    for i, s in enumerate(segs):
        assert s.start_sec == 5.0 * i and s.end_sec == 5.0 * (i + 1)


def test_segments_csv(tmp_path):
    write_segments_csv(segment_fixed(_rec(score=11, dur=10.0)), tmp_path / "s.csv")
    rows = list(csv.reader((tmp_path / "s.csv").open()))
    assert rows == [["recording_id", "index", "start_sec", "end_sec", "label"],
                    ["a", "0", "0.000", "5.000", "depressed"],
                    ["a", "1", "5.000", "10.000", "depressed"]]


# -- synthetic corpus -------------------------------------------------------------------

SMALL = SynthSpec(n_speakers=4, recordings_per_speaker=2, recording_dur=6.0)


def test_synthetic_corpus_deterministic_bytes(tmp_path):
    generate_synthetic_corpus(SMALL, seed=7, out_dir=tmp_path / "a")
    generate_synthetic_corpus(SMALL, seed=7, out_dir=tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 * 4 + 2
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synthetic_corpus_seed_changes_audio():
    a = generate_synthetic_corpus(SMALL, seed=1).records[0].samples
    b = generate_synthetic_corpus(SMALL, seed=2).records[0].samples
    assert not np.array_equal(a, b)


def test_synthetic_in_memory_matches_files(tmp_path):
    m = generate_synthetic_corpus(SMALL, seed=3, out_dir=tmp_path)
    back = load_manifest(tmp_path / "manifest.jsonl")
    np.testing.assert_array_equal(back.records[0].samples, m.records[0].samples)


def test_synthetic_labels_splits_and_ranges():
    m = generate_synthetic_corpus(SynthSpec(n_speakers=10, recordings_per_speaker=1, recording_dur=1.0), seed=0)
    labels = [m.label(r) for r in m.records]
    assert labels.count(DEPRESSED) == 5
    assert {r.split for r in m.records} == {"train", "valid", "test"}
    for r in m.records:
        assert np.abs(r.samples).max() < 1.0
    # every speaker lives in exactly one split
    by_spk = {}
    for r in m.records:
        by_spk.setdefault(r.speaker_id, set()).add(r.split)
    assert all(len(v) == 1 for v in by_spk.values())


def test_synthetic_negative_effect_rejected():
    with pytest.raises(ValueError, match="class_effect_size"):
        generate_synthetic_corpus(SynthSpec(class_effect_size=-0.1), seed=0)


def test_synthetic_interview_protocol():
    spec = SynthSpec(n_speakers=2, recordings_per_speaker=1, recording_dur=40.0, protocol="interview")
    m = generate_synthetic_corpus(spec, seed=5)
    for r in m.records:
        assert r.response_spans
        segs = segment_recording(r)
        assert segs and all(s.speech_sec >= 5.0 for s in segs)


def test_null_effect_makes_classes_exchangeable():
    # with no effect the class label never enters the waveform model
    spec = SynthSpec(n_speakers=2, recordings_per_speaker=1, recording_dur=2.0, class_effect_size=0.0)
    m = generate_synthetic_corpus(spec, seed=9)
    from depvox.corpus import SpeakerTraits, synthesize_recording

    t = SpeakerTraits("x", DEPRESSED, 120.0, 0.05, ((500.0, 80.0), (1500.0, 100.0)), True, True)
    h = SpeakerTraits("x", HEALTHY, 120.0, 0.05, ((500.0, 80.0), (1500.0, 100.0)), True, True)
    a = synthesize_recording(t, spec, np.random.default_rng(0))
    b = synthesize_recording(h, spec, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)
    assert len(m.records) == 2
