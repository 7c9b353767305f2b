"""Recordings, manifests, segmentation and the synthetic corpus generator.

Two segmentation protocols are supported:

* interview recordings with client response timestamps: contiguous responses
  are merged greedily until they hold at least ``min_dur`` seconds of speech
  (:func:`segment_interview`);
* monologue recordings cut into fixed, non-overlapping windows
  (:func:`segment_fixed`).

Both drop a trailing remainder that is too short, and every segment inherits
the recording-level binary label.
"""

from __future__ import annotations

import csv
import json
import math
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

DEPRESSED = 1
HEALTHY = 0
LABEL_NAMES = {DEPRESSED: "depressed", HEALTHY: "healthy"}

SCALE_RANGES = {"phq8": (0, 24), "madrs": (0, 21)}
SPLITS = ("train", "valid", "test")


class ManifestError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


def binarize(score: int, threshold: int = 10) -> int:
    return DEPRESSED if score >= threshold else HEALTHY


@dataclass
class Recording:
    id: str
    speaker_id: str
    audio_path: str
    sample_rate: int
    depression_score: int
    split: str = "train"
    response_spans: list[tuple[float, float]] | None = None
    root: Path | None = field(default=None, repr=False, compare=False)
    _samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def path(self) -> Path:
        p = Path(self.audio_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    @property
    def samples(self) -> np.ndarray:
        if self._samples is None:
            sr, x = read_wav(self.path)
            if sr != self.sample_rate:
                raise ManifestError(f"{self.id}: file rate {sr} Hz != declared {self.sample_rate} Hz")
            self._samples = x
        return self._samples

    @samples.setter
    def samples(self, value: np.ndarray) -> None:
        self._samples = value

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("root", "_samples")}
        if self.response_spans is None:
            d.pop("response_spans")
        else:
            d["response_spans"] = [list(s) for s in self.response_spans]
        return d


@dataclass(frozen=True)
class Segment:
    recording_id: str
    index: int
    start_sec: float
    end_sec: float
    label: int
    # interview segments: the response spans merged into this segment
    spans: tuple[tuple[float, float], ...] | None = None

    @property
    def duration(self) -> float:
        return self.end_sec - self.start_sec

    @property
    def speech_sec(self) -> float:
        if self.spans is None:
            return self.duration
        return sum(e - s for s, e in self.spans)


@dataclass
class Manifest:
    records: list[Recording]
    scale: str = "phq8"
    threshold: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scale not in SCALE_RANGES:
            raise ManifestError(f"unknown scale {self.scale!r}")
        lo, hi = SCALE_RANGES[self.scale]
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate recording id {r.id!r}")
            seen.add(r.id)
            if not lo <= r.depression_score <= hi:
                raise ManifestError(f"{r.id}: score {r.depression_score} outside {self.scale} range {lo}-{hi}")
            if r.split not in SPLITS:
                raise ManifestError(f"{r.id}: unknown split {r.split!r}")
            if r.sample_rate <= 0:
                raise ManifestError(f"{r.id}: sample_rate must be positive")
            if r.response_spans is not None:
                prev_end = -math.inf
                for s, e in r.response_spans:
                    if e < s or s < prev_end:
                        raise ManifestError(f"{r.id}: response spans must be ordered and non-overlapping")
                    prev_end = e

    def label(self, rec: Recording) -> int:
        return binarize(rec.depression_score, self.threshold)

    def split(self, name: str) -> list[Recording]:
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict[str, Recording]:
        return {r.id: r for r in self.records}

    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})


_REQUIRED = ("id", "speaker_id", "audio_path", "sample_rate", "depression_score")


def load_manifest(path) -> Manifest:
    """Parse a JSON-lines manifest; audio paths resolve relative to its directory.

    Optional per-line keys ``scale`` and ``threshold`` must agree across lines.
    """
    path = Path(path)
    records, scales, thresholds = [], set(), set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in _REQUIRED if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {missing}")
            scales.add(obj.get("scale", "phq8"))
            thresholds.add(int(obj.get("threshold", 10)))
            spans = obj.get("response_spans")
            records.append(Recording(
                id=str(obj["id"]),
                speaker_id=str(obj["speaker_id"]),
                audio_path=str(obj["audio_path"]),
                sample_rate=int(obj["sample_rate"]),
                depression_score=int(obj["depression_score"]),
                split=obj.get("split", "train"),
                response_spans=None if spans is None else [(float(s), float(e)) for s, e in spans],
                root=path.parent,
            ))
    if len(scales) > 1 or len(thresholds) > 1:
        raise ManifestError(f"{path}: inconsistent scale/threshold across lines")
    return Manifest(records, scale=scales.pop() if scales else "phq8",
                    threshold=thresholds.pop() if thresholds else 10)


def save_manifest(manifest: Manifest, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in manifest.records:
            d = r.to_json()
            d["scale"] = manifest.scale
            d["threshold"] = manifest.threshold
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def read_wav(path) -> tuple[int, np.ndarray]:
    """Read 16-bit PCM mono WAV; amplitudes are ``int16 / 32768``."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: audio format is {w.getcomptype()!r}, expected PCM")
            if w.getnchannels() != 1:
                raise WavFormatError(f"{path}: channels = {w.getnchannels()}, expected 1")
            if w.getsampwidth() != 2:
                raise WavFormatError(f"{path}: sample width = {8 * w.getsampwidth()} bits, expected 16")
            sr, n = w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: header: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: header truncated") from exc
    if len(raw) != 2 * n:
        raise WavFormatError(f"{path}: data chunk truncated ({len(raw) // 2} of {n} samples)")
    return sr, np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def segment_interview(rec: Recording, min_dur: float = 5.0, threshold: int = 10) -> list[Segment]:
    """Greedy left-to-right merge of response spans into >= ``min_dur`` s of speech.

    Silence between spans does not count toward the budget. A trailing
    accumulation shorter than ``min_dur`` is dropped.
    """
    label = binarize(rec.depression_score, threshold)
    out: list[Segment] = []
    acc: list[tuple[float, float]] = []
    speech = 0.0
    for s, e in rec.response_spans or []:
        acc.append((s, e))
        speech += e - s
        if speech >= min_dur - 1e-9:
            out.append(Segment(rec.id, len(out), acc[0][0], acc[-1][1], label, tuple(acc)))
            acc, speech = [], 0.0
    return out


def segment_fixed(rec: Recording, dur: float = 5.0, threshold: int = 10) -> list[Segment]:
    label = binarize(rec.depression_score, threshold)
    n_win = int(len(rec.samples) // round(dur * rec.sample_rate))
    return [Segment(rec.id, i, i * dur, (i + 1) * dur, label) for i in range(n_win)]


def segment_recording(rec: Recording, threshold: int = 10, dur: float = 5.0) -> list[Segment]:
    """Interview protocol when response spans exist, fixed windows otherwise."""
    if rec.response_spans is not None:
        return segment_interview(rec, dur, threshold)
    return segment_fixed(rec, dur, threshold)


def segment_audio(rec: Recording, seg: Segment) -> np.ndarray:
    """Samples of a segment; interview segments concatenate their spans only."""
    sr = rec.sample_rate
    x = rec.samples
    spans = seg.spans or ((seg.start_sec, seg.end_sec),)
    parts = [x[int(round(s * sr)):int(round(e * sr))] for s, e in spans]
    return parts[0] if len(parts) == 1 else np.concatenate(parts)


def write_segments_csv(segments: list[Segment], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recording_id", "index", "start_sec", "end_sec", "label"])
        for s in segments:
            w.writerow([s.recording_id, s.index, f"{s.start_sec:.3f}", f"{s.end_sec:.3f}", LABEL_NAMES[s.label]])


# --------------------------------------------------------------------------
# synthetic corpus

@dataclass
class SynthSpec:
    """Parameters of the synthetic stand-in corpus.

    Each speaker is a sawtooth glottal source at a speaker-specific base F0
    (85-255 Hz), shaped by two speaker-specific formant resonators, with a
    speaker-specific floor of unfiltered aspiration noise (0.01-0.15 of the
    voiced RMS) and a slow syllabic energy envelope. Depressed speakers carry
    two cues, both scaled by ``class_effect_size``:

    * voice quality (breathy voice): the aspiration floor rises by
      ``breathiness`` and F0 drops by ``f0_shift`` (relative);
    * prosody: envelope depth and F0 excursions are divided by
      ``1 + prosody_flattening``.

    ``cue_split`` makes each depressed speaker express only one cue,
    alternating voice quality and prosody.
    """

    n_speakers: int = 20
    recordings_per_speaker: int = 4
    recording_dur: float = 30.0
    class_effect_size: float = 1.0
    sample_rate: int = 16000
    depressed_fraction: float = 0.5
    protocol: str = "fixed"
    scale: str = "phq8"
    threshold: int = 10
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    f0_shift: float = 0.1
    breathiness: float = 0.5
    envelope_depth: float = 0.8
    prosody_flattening: float = 2.0
    cue_split: bool = False

    def validate(self) -> None:
        if self.class_effect_size < 0:
            raise ValueError(f"class_effect_size must be >= 0, got {self.class_effect_size}")
        if self.n_speakers < 1 or self.recordings_per_speaker < 1:
            raise ValueError("need at least one speaker and one recording per speaker")
        if self.recording_dur <= 0:
            raise ValueError("recording_dur must be positive")
        if self.protocol not in ("fixed", "interview"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not 0.0 <= self.depressed_fraction <= 1.0:
            raise ValueError("depressed_fraction must be in [0, 1]")
        if self.scale not in SCALE_RANGES:
            raise ValueError(f"unknown scale {self.scale!r}")


@dataclass(frozen=True)
class SpeakerTraits:
    speaker_id: str
    label: int
    f0_base: float
    aspiration: float
    formants: tuple[tuple[float, float], tuple[float, float]]
    voice_cue: bool
    prosody_cue: bool


def _smooth_noise(rng: np.random.Generator, n: int, sr: int, rate_hz: float) -> np.ndarray:
    """Unit-scale random curve with about ``rate_hz`` fluctuations per second."""
    n_knots = max(2, int(math.ceil(n / sr * rate_hz)) + 2)
    knots = rng.standard_normal(n_knots)
    return np.interp(np.linspace(0, n_knots - 1, n), np.arange(n_knots), knots)


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    r = math.exp(-math.pi * bw / sr)
    theta = 2 * math.pi * freq / sr
    a = [1.0, -2 * r * math.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def _interview_spans(rng: np.random.Generator, dur: float) -> list[tuple[float, float]]:
    spans, t = [], float(rng.uniform(0.5, 2.0))
    while True:
        length = float(rng.uniform(1.5, 9.0))
        if t + length > dur:
            break
        spans.append((round(t, 3), round(t + length, 3)))
        t += length + float(rng.uniform(1.0, 3.0))
    return spans


def synthesize_recording(traits: SpeakerTraits, spec: SynthSpec, rng: np.random.Generator,
                         spans: list[tuple[float, float]] | None = None) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(spec.recording_dur * sr))
    dep = traits.label == DEPRESSED
    effect = spec.class_effect_size
    voice = dep and traits.voice_cue
    prosody = dep and traits.prosody_cue
    f0_scale = max(1.0 - spec.f0_shift * effect, 0.3) if voice else 1.0
    aspiration = traits.aspiration + (spec.breathiness * effect if voice else 0.0)
    flatten = 1.0 + (spec.prosody_flattening * effect if prosody else 0.0)
    depth = spec.envelope_depth / flatten

    f0 = traits.f0_base * f0_scale * (1.0 + 0.06 / flatten * np.clip(_smooth_noise(rng, n, sr, 1.5), -2.5, 2.5))
    phase = np.cumsum(f0) / sr
    source = 2.0 * (phase - np.floor(phase)) - 1.0
    source += 0.03 * rng.standard_normal(n)
    y = source
    for freq, bw in traits.formants:
        y = _resonator(y, freq, bw, sr)
    y = y / np.sqrt(np.mean(y ** 2)) + aspiration * rng.standard_normal(n)
    env = 1.0 + depth * np.tanh(_smooth_noise(rng, n, sr, 4.0))
    # short pauses every few seconds
    gate = np.ones(n)
    t = float(rng.uniform(1.0, 3.0))
    while t < spec.recording_dur:
        p = float(rng.uniform(0.15, 0.4))
        gate[int(t * sr):int(min(t + p, spec.recording_dur) * sr)] = 0.0
        t += p + float(rng.uniform(1.0, 3.0))
    y = y * env * gate
    if spans is not None:
        mask = np.zeros(n)
        for s, e in spans:
            mask[int(round(s * sr)):int(round(e * sr))] = 1.0
        y = y * mask
    rms = np.sqrt(np.mean(y[y != 0] ** 2)) if np.any(y != 0) else 1.0
    y = 0.1 * y / rms
    # room noise floor, 50 dB below the speech level
    y = y + 10 ** (-50 / 20) * 0.1 * rng.standard_normal(n)
    return np.clip(y, -0.99, 0.99)


def _speaker_traits(spec: SynthSpec, rng: np.random.Generator) -> list[SpeakerTraits]:
    n = spec.n_speakers
    n_dep = int(round(n * spec.depressed_fraction))
    labels = np.array([DEPRESSED] * n_dep + [HEALTHY] * (n - n_dep))
    rng.shuffle(labels)
    traits, k = [], 0
    for i in range(n):
        f0 = float(rng.uniform(85.0, 255.0))
        f1 = float(rng.uniform(300.0, 900.0))
        f2 = float(rng.uniform(1000.0, 2500.0))
        bw1, bw2 = float(rng.uniform(60.0, 150.0)), float(rng.uniform(80.0, 200.0))
        asp = float(rng.uniform(0.01, 0.15))
        lab = int(labels[i])
        voice_cue = prosody_cue = True
        if spec.cue_split and lab == DEPRESSED:
            voice_cue, prosody_cue = (k % 2 == 0), (k % 2 == 1)
            k += 1
        traits.append(SpeakerTraits(f"spk{i:03d}", lab, f0, asp, ((f1, bw1), (f2, bw2)), voice_cue, prosody_cue))
    return traits


def _assign_splits(traits: list[SpeakerTraits], fractions, rng: np.random.Generator) -> dict[str, str]:
    out = {}
    for lab in (DEPRESSED, HEALTHY):
        ids = [t.speaker_id for t in traits if t.label == lab]
        rng.shuffle(ids)
        n = len(ids)
        n_test = int(round(n * fractions[2]))
        n_valid = int(round(n * fractions[1]))
        for j, sid in enumerate(ids):
            out[sid] = "test" if j < n_test else "valid" if j < n_test + n_valid else "train"
    return out


def generate_synthetic_corpus(spec: SynthSpec, seed: int, out_dir=None) -> Manifest:
    """Generate a labelled corpus; deterministic given ``(spec, seed)``.

    With ``out_dir`` the WAVs, ``manifest.jsonl`` and ``ground_truth.csv``
    are written there and audio paths in the manifest are relative to it.
    Otherwise samples are kept in memory on each :class:`Recording`.
    """
    spec.validate()
    root = np.random.SeedSequence(seed)
    trait_ss, split_ss, rec_ss = root.spawn(3)
    traits = _speaker_traits(spec, np.random.default_rng(trait_ss))
    splits = _assign_splits(traits, spec.split_fractions, np.random.default_rng(split_ss))
    lo, hi = SCALE_RANGES[spec.scale]
    rec_seeds = rec_ss.spawn(spec.n_speakers * spec.recordings_per_speaker)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    records, truth = [], []
    for si, tr in enumerate(traits):
        for ri in range(spec.recordings_per_speaker):
            rng = np.random.default_rng(rec_seeds[si * spec.recordings_per_speaker + ri])
            if tr.label == DEPRESSED:
                score = int(rng.integers(spec.threshold, hi + 1))
            else:
                score = int(rng.integers(lo, spec.threshold))
            spans = _interview_spans(rng, spec.recording_dur) if spec.protocol == "interview" else None
            x = synthesize_recording(tr, spec, rng, spans)
            rid = f"{tr.speaker_id}_r{ri:02d}"
            rel = f"wav/{rid}.wav"
            rec = Recording(rid, tr.speaker_id, rel, spec.sample_rate, score, splits[tr.speaker_id], spans, root=out)
            if out is not None:
                write_wav(out / rel, x, spec.sample_rate)
            # keep exactly what a reader of the file would see
            rec.samples = np.round(x * 32768.0).clip(-32768, 32767) / 32768.0
            records.append(rec)
            truth.append((rid, tr.speaker_id, LABEL_NAMES[tr.label], score, rec.split, round(tr.f0_base, 3),
                          int(tr.voice_cue), int(tr.prosody_cue)))
    manifest = Manifest(records, scale=spec.scale, threshold=spec.threshold)
    if out is not None:
        save_manifest(manifest, out / "manifest.jsonl")
        with (out / "ground_truth.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["recording_id", "speaker_id", "label", "score", "split", "f0_base", "voice_cue", "prosody_cue"])
            w.writerows(truth)
    return manifest
