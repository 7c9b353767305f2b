"""Frame-level acoustic descriptors and segment-level functionals.

Three segment vector families are produced:

* ``spk_emb``       256-d speaker embeddings (see :mod:`depvox.ge2e`; MFCC frontend here)
* ``is09``          384-d: 16 LLDs + deltas (25/10 ms) x 12 functionals
* ``covarep_stats`` 444-d: 74 LLDs (20/10 ms) x 6 statistics

The IS09-style and COVAREP-style stacks are dimension- and framing-compatible
surrogates, not bit-exact toolkit replicas.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct, irfft, rfft
from scipy.signal import get_window

LOG_FLOOR = 1e-10

KIND_DIMS = {"spk_emb": 256, "is09": 384, "covarep_stats": 444}


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FrameSpec:
    window_ms: float
    hop_ms: float
    n_mel: int = 40
    n_mfcc: int = 40
    n_fft: int | None = None

    def __post_init__(self):
        if self.hop_ms > self.window_ms:
            raise ValueError(f"hop ({self.hop_ms} ms) longer than window ({self.window_ms} ms)")
        if self.n_mfcc > self.n_mel:
            raise ValueError(f"n_mfcc={self.n_mfcc} exceeds n_mel={self.n_mel}")

    def window_samples(self, sr: int) -> int:
        return int(round(self.window_ms * sr / 1000.0))

    def hop_samples(self, sr: int) -> int:
        return int(round(self.hop_ms * sr / 1000.0))

    def fft_size(self, sr: int) -> int:
        win = self.window_samples(sr)
        n = self.n_fft or 1 << (win - 1).bit_length()
        if n < win or n & (n - 1):
            raise ValueError(f"n_fft={n} must be a power of two >= window ({win} samples)")
        return n


GE2E_FRAMES = FrameSpec(30.0, 10.0, n_mel=40, n_mfcc=40)
COVAREP_FRAMES = FrameSpec(20.0, 10.0, n_mel=40, n_mfcc=24)
IS09_FRAMES = FrameSpec(25.0, 10.0, n_mel=26, n_mfcc=13)


@dataclass
class FeatureMatrix:
    data: np.ndarray
    spec: FrameSpec
    dim_names: list[str] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]


@dataclass
class SegmentVector:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in KIND_DIMS:
            raise FeatureError(f"unknown segment vector kind {self.kind!r}")
        if self.values.shape != (KIND_DIMS[self.kind],):
            raise FeatureError(f"{self.kind} vector must have dim {KIND_DIMS[self.kind]}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise FeatureError(f"{self.kind} vector has non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def n_frames(n_samples: int, win: int, hop: int) -> int:
    return 0 if n_samples < win else 1 + (n_samples - win) // hop


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < win:
        raise FeatureError(f"audio shorter than one window ({len(x)} < {win} samples)")
    return sliding_window_view(x, win)[::hop]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mel: int, n_fft: int, sr: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters evaluated at rfft bin frequencies, (n_mel, n_fft//2+1)."""
    fmax = sr / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mel + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (ctr - lo)
    down = (hi - freqs) / (hi - ctr)
    return np.maximum(0.0, np.minimum(up, down))


def magnitude_spectrum(x: np.ndarray, sr: int, spec: FrameSpec) -> np.ndarray:
    win, hop = spec.window_samples(sr), spec.hop_samples(sr)
    frames = frame_signal(x, win, hop) * get_window("hann", win, fftbins=True)
    return np.abs(rfft(frames, n=spec.fft_size(sr), axis=1))


def log_mel(x: np.ndarray, sr: int, spec: FrameSpec) -> np.ndarray:
    mag = magnitude_spectrum(x, sr, spec)
    fb = mel_filterbank(spec.n_mel, spec.fft_size(sr), sr)
    return np.log(np.maximum(mag @ fb.T, LOG_FLOOR))


def mfcc(samples: np.ndarray, sample_rate: int, spec: FrameSpec = GE2E_FRAMES) -> FeatureMatrix:
    """Hann window -> |FFT| -> HTK mel filterbank -> log (floor 1e-10) -> orthonormal DCT-II."""
    lm = log_mel(samples, sample_rate, spec)
    c = dct(lm, type=2, norm="ortho", axis=1)[:, :spec.n_mfcc]
    return FeatureMatrix(c, spec, [f"mfcc{i}" for i in range(spec.n_mfcc)])


def deltas(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    T = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], width, axis=0), x, np.repeat(x[-1:], width, axis=0)])
    num = sum(n * (padded[width + n:width + n + T] - padded[width - n:width - n + T]) for n in range(1, width + 1))
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def _analysis_frames(x: np.ndarray, sr: int, spec: FrameSpec, min_ms: float = 40.0) -> np.ndarray:
    """Frames for pitch analysis: same centres as ``spec``, at least ``min_ms`` long."""
    win, hop = spec.window_samples(sr), spec.hop_samples(sr)
    T = n_frames(len(x), win, hop)
    awin = max(win, int(round(min_ms * sr / 1000.0)))
    extra = (awin - win) // 2
    padded = np.concatenate([np.zeros(extra), x, np.zeros(awin - win - extra)])
    return sliding_window_view(padded, awin)[::hop][:T]


def nccf_peak(frames: np.ndarray, sr: int, fmin: float = 60.0, fmax: float = 400.0,
              energy_floor: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Normalized cross-correlation pitch search per frame.

    Returns ``(lag_samples, peak)``; lag is fractional (parabolic refinement),
    peak in [0, 1]. Frames below ``energy_floor`` mean-square get peak 0.
    """
    n = frames.shape[1]
    lag_lo = max(1, int(np.floor(sr / fmax)))
    lag_hi = min(n - 2, int(np.ceil(sr / fmin)))
    frames = frames - frames.mean(axis=1, keepdims=True)
    lags = np.arange(lag_lo - 1, lag_hi + 2)
    nfft = 1 << (2 * n - 1).bit_length()
    spec = rfft(frames, n=nfft, axis=1)
    acf = irfft(spec * np.conj(spec), n=nfft, axis=1)[:, lags]
    sq = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    head = sq[:, n - lags]                      # sum of x[t]^2, t < n - tau
    tail = sq[:, n:n + 1] - sq[:, lags]         # sum of x[t]^2, t >= tau
    den = np.sqrt(np.maximum(head * tail, 0.0))
    r = np.where(den > 1e-300, acf / np.where(den > 1e-300, den, 1.0), 0.0)
    inner = r[:, 1:-1]
    best = inner.max(axis=1)
    # smallest lag within 90% of the best peak: avoids sub-harmonic picks
    cand = inner >= 0.9 * best[:, None]
    is_peak = (inner >= r[:, :-2]) & (inner >= r[:, 2:])
    pick = np.argmax(cand & is_peak, axis=1)
    no_peak = ~np.any(cand & is_peak, axis=1)
    pick[no_peak] = np.argmax(inner[no_peak], axis=1)
    rows = np.arange(r.shape[0])
    y0, y1, y2 = r[rows, pick], r[rows, pick + 1], r[rows, pick + 2]
    den = y0 - 2 * y1 + y2
    shift = np.where(np.abs(den) > 1e-12, 0.5 * (y0 - y2) / np.where(np.abs(den) > 1e-12, den, 1.0), 0.0)
    shift = np.clip(shift, -0.5, 0.5)
    lag = lags[pick + 1] + shift
    peak = np.clip(y1, 0.0, 1.0)
    silent = (frames ** 2).mean(axis=1) < energy_floor
    peak[silent] = 0.0
    return lag, peak


def pitch_track(x: np.ndarray, sr: int, spec: FrameSpec, fmin: float = 60.0, fmax: float = 400.0,
                voicing_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """F0 per frame in Hz (0 when unvoiced) and the NCCF peak per frame."""
    frames = _analysis_frames(np.asarray(x, dtype=np.float64), sr, spec)
    lag, peak = nccf_peak(frames, sr, fmin, fmax)
    f0 = np.where(peak >= voicing_threshold, sr / lag, 0.0)
    f0[(f0 < fmin) | (f0 > fmax)] = 0.0
    return f0, peak


def lld_stack(samples: np.ndarray, sample_rate: int) -> FeatureMatrix:
    """74 LLDs at 20/10 ms: 24 MFCC, 24 delta, 24 delta-delta, log-energy, F0."""
    spec = COVAREP_FRAMES
    x = np.asarray(samples, dtype=np.float64)
    c = mfcc(x, sample_rate, spec).data
    d1 = deltas(c)
    d2 = deltas(d1)
    frames = frame_signal(x, spec.window_samples(sample_rate), spec.hop_samples(sample_rate))
    log_e = np.log(np.maximum((frames ** 2).sum(axis=1), LOG_FLOOR))
    f0, _ = pitch_track(x, sample_rate, spec)
    data = np.column_stack([c, d1, d2, log_e, f0])
    names = ([f"mfcc{i}" for i in range(24)] + [f"d_mfcc{i}" for i in range(24)]
             + [f"dd_mfcc{i}" for i in range(24)] + ["log_energy", "f0"])
    return FeatureMatrix(data, spec, names)


def hnr_proxy(peak: np.ndarray, floor_db: float = 60.0) -> np.ndarray:
    """Harmonics-to-noise ratio from the autocorrelation peak, ``10 log10(r / (1 - r))``."""
    eps = 10.0 ** (-floor_db / 10.0)
    r = np.clip(peak, eps / (1 + eps), 1.0 / (1 + eps))
    return 10.0 * np.log10(r / (1.0 - r))


IS09_LLD_NAMES = ["zcr", "rms", "f0", "hnr"] + [f"mfcc{i}" for i in range(1, 13)]


def is09_lld(samples: np.ndarray, sample_rate: int) -> FeatureMatrix:
    """16 LLDs (ZCR, RMS, F0, HNR proxy, MFCC 1-12) and their deltas at 25/10 ms."""
    spec = IS09_FRAMES
    x = np.asarray(samples, dtype=np.float64)
    frames = frame_signal(x, spec.window_samples(sample_rate), spec.hop_samples(sample_rate))
    signs = np.signbit(frames)
    nonzero = frames != 0
    crossings = (signs[:, 1:] != signs[:, :-1]) & nonzero[:, 1:] & nonzero[:, :-1]
    zcr = crossings.sum(axis=1) / (frames.shape[1] - 1)
    rms = np.sqrt((frames ** 2).mean(axis=1))
    f0, peak = pitch_track(x, sample_rate, spec)
    c = mfcc(x, sample_rate, spec).data[:, 1:13]
    base = np.column_stack([zcr, rms, f0, hnr_proxy(peak), c])
    names = IS09_LLD_NAMES + [f"d_{n}" for n in IS09_LLD_NAMES]
    return FeatureMatrix(np.column_stack([base, deltas(base)]), spec, names)


# --------------------------------------------------------------------------
# functionals

def _moments(x: np.ndarray):
    """Population mean/std and standardized skew/kurtosis per column.

    Zero-variance columns get std 0, skew 0, kurtosis 0.
    """
    mean = x.mean(axis=0)
    dev = x - mean
    m2 = (dev ** 2).mean(axis=0)
    scale = np.maximum(np.abs(x).max(axis=0), 1e-300)
    flat = np.sqrt(m2) <= 1e-12 * scale
    safe = np.where(flat, 1.0, m2)
    skew = np.where(flat, 0.0, (dev ** 3).mean(axis=0) / safe ** 1.5)
    kurt = np.where(flat, 0.0, (dev ** 4).mean(axis=0) / safe ** 2)
    std = np.where(flat, 0.0, np.sqrt(m2))
    return mean, std, skew, kurt


def _require_frames(m: FeatureMatrix, n: int = 2) -> np.ndarray:
    data = np.asarray(m.data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < n:
        raise FeatureError(f"need at least {n} frames, got {data.shape[0] if data.ndim == 2 else data.shape}")
    return data


IS09_FUNCTIONALS = ["mean", "stddev", "skewness", "kurtosis", "min", "max", "relpos_min", "relpos_max",
                    "range", "linreg_offset", "linreg_slope", "linreg_mse"]
STATS6 = ["mean", "max", "min", "std", "skew", "kurtosis"]


def functionals_12(data: np.ndarray) -> np.ndarray:
    """(T, C) -> (C, 12) functionals in ``IS09_FUNCTIONALS`` order."""
    T = data.shape[0]
    mean, std, skew, kurt = _moments(data)
    mn, mx = data.min(axis=0), data.max(axis=0)
    t = np.arange(T, dtype=np.float64)
    tc = t - t.mean()
    slope = (tc[:, None] * (data - mean)).sum(axis=0) / (tc ** 2).sum()
    offset = mean - slope * t.mean()
    resid = data - (offset + slope * t[:, None])
    mse = (resid ** 2).mean(axis=0)
    return np.column_stack([
        mean, std, skew, kurt, mn, mx,
        data.argmin(axis=0) / (T - 1), data.argmax(axis=0) / (T - 1),
        mx - mn, offset, slope, mse,
    ])


def functionals_is09(m: FeatureMatrix) -> SegmentVector:
    """32 channels x 12 functionals = 384, channel-major."""
    data = _require_frames(m)
    if data.shape[1] != 32:
        raise FeatureError(f"IS09 functionals expect 32 LLD channels, got {data.shape[1]}")
    return SegmentVector("is09", functionals_12(data).reshape(-1))


def stats6(data: np.ndarray) -> np.ndarray:
    mean, std, skew, kurt = _moments(data)
    return np.column_stack([mean, data.max(axis=0), data.min(axis=0), std, skew, kurt])


def functionals_stats6(m: FeatureMatrix) -> SegmentVector:
    """74 channels x (mean, max, min, std, skew, kurtosis) = 444, channel-major."""
    data = _require_frames(m)
    if data.shape[1] != 74:
        raise FeatureError(f"COVAREP-style statistics expect 74 LLD channels, got {data.shape[1]}")
    return SegmentVector("covarep_stats", stats6(data).reshape(-1))


def segment_vector(kind: str, samples: np.ndarray, sample_rate: int) -> SegmentVector:
    if kind == "is09":
        return functionals_is09(is09_lld(samples, sample_rate))
    if kind == "covarep_stats":
        return functionals_stats6(lld_stack(samples, sample_rate))
    raise FeatureError(f"{kind!r} vectors are not computed from functionals")
