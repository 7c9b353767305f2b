"""Per-segment vector cache and table builders.

Cache layout under a root directory::

    index.csv                 recording_id,segment_index,kind,file,dim,crc32
    <kind>/<recording_id>__<segment_index:05d>.bin

Each ``.bin`` record (little-endian)::

    u8  kind tag (0 spk_emb, 1 is09, 2 covarep_stats)
    u32 dim
    f32 * dim values
    u32 CRC-32 of the preceding bytes
"""

from __future__ import annotations

import csv
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .classifiers import VectorTable
from .corpus import Manifest, segment_audio, segment_recording
from .features import KIND_DIMS, segment_vector

KIND_TAGS = {"spk_emb": 0, "is09": 1, "covarep_stats": 2}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


class CacheIntegrityError(ValueError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DEPR_SPEECH_THREADS", "1")))
    except ValueError:
        return 1


def encode_record(kind: str, values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype="<f4")
    body = struct.pack("<BI", KIND_TAGS[kind], values.size) + values.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_record(buf: bytes, name: str = "record") -> tuple[str, np.ndarray]:
    if len(buf) < 9:
        raise CacheIntegrityError(f"{name}: truncated record ({len(buf)} bytes)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CacheIntegrityError(f"{name}: checksum mismatch")
    tag, dim = struct.unpack_from("<BI", body)
    if tag not in TAG_KINDS or len(body) != 5 + 4 * dim:
        raise CacheIntegrityError(f"{name}: bad header (tag={tag}, dim={dim})")
    return TAG_KINDS[tag], np.frombuffer(body, dtype="<f4", offset=5).astype(np.float64)


def segments_for(manifest: Manifest, seg_dur: float = 5.0) -> dict[str, list]:
    return {r.id: segment_recording(r, manifest.threshold, seg_dur) for r in manifest.records}


def functional_table(manifest: Manifest, segments: dict[str, list], kind: str,
                     workers: int | None = None) -> VectorTable:
    """IS09-style or COVAREP-style vectors for every segment."""
    recs = manifest.by_id()

    def one(rid):
        rec = recs[rid]
        return rid, np.stack([segment_vector(kind, segment_audio(rec, s), rec.sample_rate).values
                              for s in segments[rid]]) if segments[rid] else np.empty((0, KIND_DIMS[kind]))

    ids = list(segments)
    n = workers or worker_count()
    if n > 1:
        with ThreadPoolExecutor(n) as ex:
            results = list(ex.map(one, ids))
    else:
        results = [one(r) for r in ids]
    vectors = {rid: v for rid, v in results if len(v)}
    return VectorTable(kind, vectors, {rid: manifest.label(recs[rid]) for rid in vectors},
                       {rid: np.array([s.index for s in segments[rid]]) for rid in vectors})


def embedding_table(manifest: Manifest, segments: dict[str, list], model) -> VectorTable:
    from .ge2e import extract_segment_embeddings

    table, report = extract_segment_embeddings(manifest, segments, model)
    skipped = {(rid, idx) for rid, idx, _ in report.skipped}
    recs = manifest.by_id()
    indices = {rid: np.array([s.index for s in segments[rid] if (rid, s.index) not in skipped]) for rid in table}
    return VectorTable("spk_emb", table, {rid: manifest.label(recs[rid]) for rid in table}, indices)


def split_tables(table: VectorTable, manifest: Manifest) -> dict[str, VectorTable]:
    return {name: table.subset([r.id for r in manifest.split(name)]) for name in ("train", "valid", "test")}


class FeatureCache:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, kind: str, rid: str, idx: int) -> Path:
        return self.root / kind / f"{rid}__{idx:05d}.bin"

    def has(self, kind: str, rid: str, idx: int) -> bool:
        p = self.path(kind, rid, idx)
        if not p.exists():
            return False
        try:
            decode_record(p.read_bytes(), str(p))
        except CacheIntegrityError:
            return False
        return True

    def write(self, kind: str, rid: str, idx: int, values: np.ndarray) -> None:
        p = self.path(kind, rid, idx)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(encode_record(kind, values))

    def read(self, kind: str, rid: str, idx: int) -> np.ndarray:
        p = self.path(kind, rid, idx)
        got, v = decode_record(p.read_bytes(), f"{kind}/{p.name}")
        if got != kind:
            raise CacheIntegrityError(f"{kind}/{p.name}: kind tag says {got}")
        return v

    def store_table(self, table: VectorTable) -> None:
        for rid, v in table.vectors.items():
            for idx, row in zip(table.indices[rid], v):
                self.write(table.kind, rid, int(idx), row)
        self.write_index()

    def write_index(self) -> None:
        rows = []
        for kdir in sorted(p for p in self.root.iterdir() if p.is_dir() and p.name in KIND_TAGS):
            for f in sorted(kdir.glob("*.bin")):
                rid, idx = f.stem.rsplit("__", 1)
                buf = f.read_bytes()
                (dim,) = struct.unpack_from("<I", buf, 1)
                rows.append([rid, int(idx), kdir.name, f"{kdir.name}/{f.name}", dim, struct.unpack("<I", buf[-4:])[0]])
        with (self.root / "index.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["recording_id", "segment_index", "kind", "file", "dim", "crc32"])
            w.writerows(rows)

    def load_table(self, kind: str, manifest: Manifest) -> VectorTable:
        """All cached vectors of ``kind``, grouped per recording in segment order."""
        index = self.root / "index.csv"
        if not index.exists():
            raise FileNotFoundError(f"no feature index at {index}")
        per: dict[str, list[tuple[int, np.ndarray]]] = {}
        with index.open() as fh:
            for row in csv.DictReader(fh):
                if row["kind"] != kind:
                    continue
                v = self.read(kind, row["recording_id"], int(row["segment_index"]))
                per.setdefault(row["recording_id"], []).append((int(row["segment_index"]), v))
        if not per:
            raise FileNotFoundError(f"no cached {kind} vectors under {self.root}")
        recs = manifest.by_id()
        vectors, indices = {}, {}
        for rid in [r.id for r in manifest.records if r.id in per]:
            items = sorted(per[rid], key=lambda t: t[0])
            indices[rid] = np.array([i for i, _ in items])
            vectors[rid] = np.stack([v for _, v in items])
        return VectorTable(kind, vectors, {rid: manifest.label(recs[rid]) for rid in vectors}, indices)

    def fill_functionals(self, manifest: Manifest, segments: dict[str, list], kind: str, force: bool = False,
                         workers: int | None = None) -> tuple[int, int]:
        """Compute and cache missing (or all, with ``force``) vectors; returns (computed, reused)."""
        recs = manifest.by_id()
        todo = [(rid, s) for rid in segments for s in segments[rid]
                if force or not self.has(kind, rid, s.index)]

        def one(item):
            rid, s = item
            rec = recs[rid]
            return rid, s.index, segment_vector(kind, segment_audio(rec, s), rec.sample_rate).values

        n = workers or worker_count()
        if n > 1:
            with ThreadPoolExecutor(n) as ex:
                results = list(ex.map(one, todo))
        else:
            results = [one(t) for t in todo]
        for rid, idx, v in results:
            self.write(kind, rid, idx, v)
        self.write_index()
        return len(todo), sum(len(v) for v in segments.values()) - len(todo)
