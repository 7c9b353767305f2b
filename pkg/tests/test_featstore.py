import csv
import struct
import zlib

import numpy as np
import pytest

from depvox.corpus import SynthSpec, generate_synthetic_corpus
from depvox.featstore import (CacheIntegrityError, FeatureCache, decode_record, encode_record, functional_table,
                              segments_for, split_tables, worker_count)


def test_record_layout_by_hand():
    buf = encode_record("is09", np.array([1.0, -2.5]))
    body = bytes([1]) + struct.pack("<I", 2) + struct.pack("<2f", 1.0, -2.5)
    assert buf == body + struct.pack("<I", zlib.crc32(body))


def test_record_roundtrip():
    v = np.random.default_rng(0).standard_normal(444)
    kind, back = decode_record(encode_record("covarep_stats", v))
    assert kind == "covarep_stats"
    np.testing.assert_array_equal(back, v.astype(np.float32))


def test_flipped_byte_detected():
    buf = bytearray(encode_record("spk_emb", np.ones(256)))
    buf[20] ^= 0x01
    with pytest.raises(CacheIntegrityError, match="rec.bin: checksum"):
        decode_record(bytes(buf), "rec.bin")


def test_truncated_record():
    with pytest.raises(CacheIntegrityError, match="truncated"):
        decode_record(b"\x00\x01", "x")


@pytest.mark.parametrize("value,expected", [("4", 4), ("0", 1), ("junk", 1), (None, 1)])
def test_worker_count_env(monkeypatch, value, expected):
    if value is None:
        monkeypatch.delenv("DEPR_SPEECH_THREADS", raising=False)
    else:
        monkeypatch.setenv("DEPR_SPEECH_THREADS", value)
    assert worker_count() == expected


@pytest.fixture(scope="module")
def corpus():
    m = generate_synthetic_corpus(SynthSpec(n_speakers=4, recordings_per_speaker=1, recording_dur=12.0), seed=2)
    return m, segments_for(m)


def test_fill_and_reuse(corpus, tmp_path):
    m, segs = corpus
    n_seg = sum(len(v) for v in segs.values())
    cache = FeatureCache(tmp_path)
    assert cache.fill_functionals(m, segs, "is09") == (n_seg, 0)
    assert cache.fill_functionals(m, segs, "is09") == (0, n_seg)
    assert cache.fill_functionals(m, segs, "is09", force=True) == (n_seg, 0)


def test_cache_matches_direct_table(corpus, tmp_path):
    m, segs = corpus
    cache = FeatureCache(tmp_path)
    cache.fill_functionals(m, segs, "is09")
    got = cache.load_table("is09", m)
    want = functional_table(m, segs, "is09")
    assert list(got.vectors) == list(want.vectors)
    for rid in want.vectors:
        assert got.vectors[rid].shape[1] == 384
        np.testing.assert_array_equal(got.vectors[rid], want.vectors[rid].astype(np.float32))
        assert got.labels[rid] == want.labels[rid]


def test_index_csv(corpus, tmp_path):
    m, segs = corpus
    cache = FeatureCache(tmp_path)
    cache.fill_functionals(m, segs, "is09")
    with (tmp_path / "index.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == sum(len(v) for v in segs.values())
    for r in rows:
        buf = (tmp_path / r["file"]).read_bytes()
        assert int(r["dim"]) == 384
        assert int(r["crc32"]) == zlib.crc32(buf[:-4])


def test_corrupt_record_is_named_and_refilled(corpus, tmp_path):
    m, segs = corpus
    cache = FeatureCache(tmp_path)
    cache.fill_functionals(m, segs, "is09")
    rid = next(iter(segs))
    p = cache.path("is09", rid, 0)
    buf = bytearray(p.read_bytes())
    buf[10] ^= 0xFF
    p.write_bytes(bytes(buf))
    with pytest.raises(CacheIntegrityError, match=p.name):
        cache.load_table("is09", m)
    computed, _ = cache.fill_functionals(m, segs, "is09")
    assert computed == 1
    cache.load_table("is09", m)


def test_load_missing_index(corpus, tmp_path):
    with pytest.raises(FileNotFoundError):
        FeatureCache(tmp_path).load_table("is09", corpus[0])


def test_threaded_fill_identical(corpus, tmp_path):
    m, segs = corpus
    a, b = FeatureCache(tmp_path / "a"), FeatureCache(tmp_path / "b")
    a.fill_functionals(m, segs, "is09", workers=1)
    b.fill_functionals(m, segs, "is09", workers=3)
    assert (tmp_path / "a" / "index.csv").read_bytes() == (tmp_path / "b" / "index.csv").read_bytes()


def test_split_tables_partition(corpus):
    m, segs = corpus
    parts = split_tables(functional_table(m, segs, "is09"), m)
    ids = [rid for t in parts.values() for rid in t.vectors]
    assert sorted(ids) == sorted(r.id for r in m.records)
