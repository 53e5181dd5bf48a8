"""WAV ingest and conversion to fixed-length 16 kHz mono segments."""
from __future__ import annotations

import json
import wave
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

TARGET_RATE = 16000
TARGET_SECONDS = 10.0
LABELS = ("negative", "non_negative")
MANIFEST_SCHEMA_VERSION = 1


class IngestError(ValueError):
    """Unreadable, malformed or unsupported audio input."""


@dataclass(frozen=True)
class AudioSegment:
    samples: np.ndarray
    sample_rate: int
    session_id: str = ""
    start_s: float | None = None
    end_s: float | None = None
    label: str | None = None
    padded_samples: int = 0

    def __post_init__(self):
        if self.start_s is not None and self.end_s is not None and not self.start_s < self.end_s:
            raise ValueError(f"start_s {self.start_s} must precede end_s {self.end_s}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def _decode_pcm(raw: bytes, width: int) -> np.ndarray:
    if width == 1:
        return (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    if width == 2:
        return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v & 0x800000, v - (1 << 24), v)
        return v.astype(np.float64) / float(1 << 23)
    if width == 4:
        return np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    raise IngestError(f"unsupported sample width {width}")


def load_wav(path, session_id: str | None = None, start_s=None, end_s=None, label=None) -> AudioSegment:
    """Read a PCM WAV file; stereo is averaged to mono, integers scaled to [-1, 1]."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except (wave.Error, EOFError, OSError, RuntimeError) as exc:
        raise IngestError(f"{path}: {exc}") from exc
    if rate <= 0 or channels < 1:
        raise IngestError(f"{path}: invalid header (rate={rate}, channels={channels})")
    if len(raw) != n * channels * width:
        raise IngestError(f"{path}: truncated data ({len(raw)} of {n * channels * width} bytes)")
    x = _decode_pcm(raw, width).reshape(-1, channels).mean(axis=1)
    return AudioSegment(
        samples=x, sample_rate=rate, session_id=session_id or path.stem,
        start_s=start_s, end_s=end_s, label=label)


def write_wav(path, samples: np.ndarray, sample_rate: int = TARGET_RATE) -> None:
    """16-bit mono PCM with rounding and clipping."""
    q = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(q.tobytes())


def resample(a: AudioSegment, target_hz: int = TARGET_RATE) -> AudioSegment:
    """Band-limited rational resampling (polyphase Kaiser-windowed sinc)."""
    if a.sample_rate <= 0 or target_hz <= 0:
        raise ValueError("sample rates must be positive")
    if a.sample_rate == target_hz:
        return a
    ratio = Fraction(int(target_hz), int(a.sample_rate))
    y = resample_poly(np.asarray(a.samples, dtype=np.float64), ratio.numerator, ratio.denominator)
    return replace(a, samples=y, sample_rate=int(target_hz))


def pad_or_truncate(a: AudioSegment, target_s: float = TARGET_SECONDS) -> AudioSegment:
    """Zero-pad or cut at the tail to exactly ``target_s`` seconds."""
    if len(a.samples) == 0:
        raise ValueError("cannot length-normalize an empty segment")
    n = int(round(target_s * a.sample_rate))
    x = np.asarray(a.samples)
    if len(x) >= n:
        return replace(a, samples=x[:n], padded_samples=max(0, a.padded_samples - (len(x) - n)))
    pad = n - len(x)
    return replace(a, samples=np.concatenate([x, np.zeros(pad, dtype=x.dtype)]),
                   padded_samples=a.padded_samples + pad)


def preprocess(a: AudioSegment) -> AudioSegment:
    return pad_or_truncate(resample(a, TARGET_RATE), TARGET_SECONDS)


# -- manifests -------------------------------------------------------------
def read_manifest(path) -> list[dict]:
    """JSON Lines segment manifest; relative ``path`` fields resolve against the manifest's directory."""
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from exc
            for key in ("path", "session_id"):
                if key not in rec:
                    raise IngestError(f"{path}:{lineno}: missing '{key}'")
            label = rec.get("label")
            if label is not None and label not in LABELS:
                raise IngestError(f"{path}:{lineno}: unknown label {label!r}")
            rec["path"] = str((path.parent / rec["path"]).resolve()) if not Path(rec["path"]).is_absolute() else rec["path"]
            rows.append(rec)
    return rows


def write_manifest(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps({"schema_version": MANIFEST_SCHEMA_VERSION, **r}, sort_keys=True) + "\n")


def load_segment(record: dict) -> AudioSegment:
    a = load_wav(record["path"], session_id=record["session_id"], start_s=record.get("start_s"),
                 end_s=record.get("end_s"), label=record.get("label"))
    return preprocess(a)
