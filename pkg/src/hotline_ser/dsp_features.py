"""Frame-level signal features: 39-dim MFCC (+deltas) and a YIN pitch contour.

Both extractors use the same centered 10 ms frame grid, so a 10 s segment at
16 kHz yields 1 + 160000 // 160 = 1001 frames.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

SOURCES = ("mfcc", "pitch", "deep", "pitch_encoded", "mfcc_encoded")
FEATURE_SCHEMA_VERSION = 1
_FEAT_MAGIC = b"SERFEAT1"


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_hop_s: float
    source: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be T x D with T >= 1, got {self.frames.shape}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature frames must be finite")
        if self.source == "mfcc" and self.frames.shape[1] != 39:
            raise ValueError("mfcc features must have 39 columns")
        if self.source == "pitch" and self.frames.shape[1] != 1:
            raise ValueError("pitch features must have 1 column")

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    n_samples: int = 160000
    preemphasis: float = 0.97
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 512
    n_mels: int = 40
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    n_mfcc: int = 13
    delta_width: int = 2


@dataclass(frozen=True)
class PitchConfig:
    sample_rate: int = 16000
    n_samples: int = 160000
    win_length: int = 400
    hop_length: int = 160
    fmin: float = 50.0
    fmax: float = 500.0
    threshold: float = 0.3


def _check_input(samples, sample_rate: int, rate: int, n: int) -> np.ndarray:
    if hasattr(samples, "samples"):
        samples, sample_rate = samples.samples, samples.sample_rate
    x = np.asarray(samples, dtype=np.float64)
    if sample_rate != rate:
        raise ValueError(f"expected {rate} Hz audio, got {sample_rate}")
    if x.ndim != 1 or len(x) != n:
        raise ValueError(f"expected {n} samples, got {x.shape}")
    return x


def n_frames(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def _frame(x: np.ndarray, length: int, hop: int, count: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, length)[::hop][:count]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft // 2 + 1)."""
    freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, len(freqs)))
    for m in range(cfg.n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-width frames with edge replication."""
    T = len(feat)
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(feat)
    for n in range(1, width + 1):
        out += n * (padded[width + n:width + n + T] - padded[width - n:width - n + T])
    return out / denom


def mfcc_39(samples, sample_rate: int = 16000, cfg: MfccConfig = MfccConfig()) -> FeatureSequence:
    x = _check_input(samples, sample_rate, cfg.sample_rate, cfg.n_samples)
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - cfg.preemphasis * x[:-1]
    half = cfg.win_length // 2
    yp = np.pad(y, (half, half), mode="reflect")
    T = n_frames(cfg.n_samples, cfg.hop_length)
    frames = _frame(yp, cfg.win_length, cfg.hop_length, T)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.win_length) / cfg.win_length)
    spec = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)) ** 2
    mel = spec @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    c = dct(logmel, type=2, norm="ortho", axis=1)[:, :cfg.n_mfcc]
    d1 = deltas(c, cfg.delta_width)
    d2 = deltas(d1, cfg.delta_width)
    return FeatureSequence(np.hstack([c, d1, d2]), cfg.hop_length / cfg.sample_rate, "mfcc")


def yin_cmndf(frames: np.ndarray, integration: int, max_lag: int) -> np.ndarray:
    """Cumulative-mean-normalized difference for lags 0..max_lag, per frame row."""
    n_fft = 1 << int(np.ceil(np.log2(frames.shape[1])))
    head = frames[:, :integration]
    r = np.fft.irfft(np.conj(np.fft.rfft(head, n_fft, axis=1)) * np.fft.rfft(frames, n_fft, axis=1),
                     n_fft, axis=1)[:, :max_lag + 1]
    sq = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    energy0 = sq[:, integration][:, None]
    energy_tau = sq[:, lags + integration] - sq[:, lags]
    diff = np.maximum(energy0 + energy_tau - 2.0 * r, 0.0)
    cum = np.cumsum(diff[:, 1:], axis=1)
    out = np.ones_like(diff)
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = diff[:, 1:] * lags[1:] / cum
    out[:, 1:] = np.where(cum > 1e-12 * max(1.0, float(energy0.max())), norm, 1.0)
    return out


def pitch_contour(samples, sample_rate: int = 16000, cfg: PitchConfig = PitchConfig()) -> FeatureSequence:
    """Per-frame f0 in Hz (0 for unvoiced) via the YIN difference function.

    Each frame integrates ``win_length`` samples starting half a window before
    the frame center and compares against lags up to sample_rate / fmin.
    """
    x = _check_input(samples, sample_rate, cfg.sample_rate, cfg.n_samples)
    min_lag = int(np.floor(cfg.sample_rate / cfg.fmax))
    max_lag = int(np.ceil(cfg.sample_rate / cfg.fmin))
    half = cfg.win_length // 2
    span = cfg.win_length + max_lag
    xp = np.pad(x, (half, span - half), mode="reflect")
    T = n_frames(cfg.n_samples, cfg.hop_length)
    frames = _frame(xp, span, cfg.hop_length, T)
    d = yin_cmndf(frames, cfg.win_length, max_lag)

    region = d[:, min_lag:max_lag + 1]
    below = region < cfg.threshold
    voiced = below.any(axis=1)
    tau = np.argmax(below, axis=1) + min_lag
    rows = np.arange(T)
    # descend to the bottom of the dip
    for _ in range(max_lag - min_lag):
        nxt = np.minimum(tau + 1, max_lag)
        move = voiced & (tau < max_lag) & (d[rows, nxt] < d[rows, tau])
        if not move.any():
            break
        tau = np.where(move, tau + 1, tau)

    left = d[rows, np.maximum(tau - 1, 0)]
    mid = d[rows, tau]
    right = d[rows, np.minimum(tau + 1, max_lag)]
    denom = left - 2 * mid + right
    with np.errstate(invalid="ignore", divide="ignore"):
        shift = np.where((np.abs(denom) > 1e-12) & (tau > min_lag) & (tau < max_lag),
                         0.5 * (left - right) / denom, 0.0)
    shift = np.clip(shift, -1.0, 1.0)
    f0 = np.where(voiced, cfg.sample_rate / (tau + shift), 0.0)
    return FeatureSequence(f0[:, None], cfg.hop_length / cfg.sample_rate, "pitch")


def standardize_pitch(seq: FeatureSequence) -> FeatureSequence:
    """Z-score voiced frames within the segment; unvoiced frames stay 0."""
    f = seq.frames[:, 0].astype(np.float64)
    voiced = f > 0
    out = np.zeros_like(f)
    if voiced.any():
        v = f[voiced]
        sd = v.std()
        out[voiced] = (v - v.mean()) / sd if sd > 0 else v - v.mean()
    return FeatureSequence(out[:, None], seq.frame_hop_s, "pitch")


# -- feature dump files ------------------------------------------------------
def save_features(path, seq: FeatureSequence) -> None:
    header = json.dumps({
        "schema_version": FEATURE_SCHEMA_VERSION, "shape": list(seq.frames.shape),
        "frame_hop_s": seq.frame_hop_s, "source": seq.source, "dtype": "<f4",
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def load_features(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        if fh.read(8) != _FEAT_MAGIC:
            raise ValueError(f"{path}: not a feature dump")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        data = np.frombuffer(fh.read(), dtype="<f4")
    shape = tuple(header["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {shape} values, found {data.size}")
    return FeatureSequence(data.reshape(shape).astype(np.float32), header["frame_hop_s"], header["source"])
