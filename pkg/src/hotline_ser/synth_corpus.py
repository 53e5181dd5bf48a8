"""Synthetic labeled audio and scored session timelines for desk-scale runs.

Segments are harmonic stacks with a class-dependent f0 trajectory and
spectral tilt, so the true pitch of every frame is known.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import AudioSegment, LABELS, write_manifest, write_wav

_TABLE_SIZE = 4096


@dataclass(frozen=True)
class ClassParams:
    f0_mean: float
    f0_slope: float = 0.0          # Hz per second, centered on the segment midpoint
    spectral_tilt: float = -6.0    # dB per octave of harmonic number
    jitter: float = 0.005          # relative f0 perturbation per 10 ms block


def default_class_params() -> dict[str, ClassParams]:
    return {
        "negative": ClassParams(f0_mean=140.0, f0_slope=-4.0, spectral_tilt=-12.0, jitter=0.005),
        "non_negative": ClassParams(f0_mean=220.0, f0_slope=0.0, spectral_tilt=-6.0, jitter=0.005),
    }


@dataclass(frozen=True)
class CorpusSpec:
    n_subjects: int = 20
    segments_per_subject: int = 20
    class_params: dict[str, ClassParams] = field(default_factory=default_class_params)
    noise_level: float = 0.02
    duration_s: float = 10.0
    sample_rate: int = 16000
    seed: int = 0
    # scored-session generator
    sessions_per_group: int = 20
    points_per_session: int = 80
    session_duration_s: float = 2700.0
    alternation: dict[str, float] = field(default_factory=lambda: {"suicide": 0.8, "non_suicide": 0.1})

    def __post_init__(self):
        params = list(self.class_params.values())
        if len(set(params)) != len(params):
            raise ValueError("class parameter sets must differ in at least one field")
        unknown = set(self.class_params) - set(LABELS)
        if unknown:
            raise ValueError(f"unknown labels {sorted(unknown)}")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _wavetable(tilt_db: float, n_harmonics: int) -> np.ndarray:
    k = np.arange(1, n_harmonics + 1)
    amps = 10.0 ** (tilt_db * np.log2(k) / 20.0)
    phase = np.arange(_TABLE_SIZE) / _TABLE_SIZE
    table = (amps[:, None] * np.sin(2 * np.pi * k[:, None] * phase[None, :])).sum(axis=0)
    return table / np.abs(table).max()


def gen_segment(label: str, spec: CorpusSpec = CorpusSpec(), seed: int = 0,
                session_id: str = "", start_s: float | None = None) -> AudioSegment:
    """One ``spec.duration_s`` harmonic segment of the given class, deterministic in ``seed``."""
    if label not in spec.class_params:
        raise ValueError(f"unknown label {label!r}")
    p = spec.class_params[label]
    rng = _rng(spec.seed, seed)
    sr = spec.sample_rate
    n = int(round(spec.duration_s * sr))
    t = np.arange(n) / sr
    f0 = p.f0_mean + p.f0_slope * (t - spec.duration_s / 2)
    if p.jitter > 0:
        block = sr // 100
        n_blocks = -(-n // block)
        f0 = f0 * (1.0 + p.jitter * np.repeat(rng.standard_normal(n_blocks), block)[:n])
    n_harm = max(1, int(0.95 * (sr / 2) / max(f0.max(), 1.0)))
    table = _wavetable(p.spectral_tilt, n_harm)
    phase0 = rng.uniform(0, 1)
    cycles = phase0 + np.concatenate([[0.0], np.cumsum(f0[:-1] / sr)])
    pos = (cycles % 1.0) * _TABLE_SIZE
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    x = table[i0 % _TABLE_SIZE] * (1 - frac) + table[(i0 + 1) % _TABLE_SIZE] * frac
    gain = rng.uniform(0.3, 0.6)
    x = gain * x
    if spec.noise_level > 0:
        x = x + spec.noise_level * rng.standard_normal(n)
    end_s = None if start_s is None else start_s + spec.duration_s
    return AudioSegment(samples=x, sample_rate=sr, session_id=session_id, start_s=start_s,
                        end_s=end_s, label=label)


def subject_labels(spec: CorpusSpec, subject: int) -> list[str]:
    """Balanced label sequence for one subject, shuffled deterministically."""
    labels = list(spec.class_params)
    n = spec.segments_per_subject
    seq = [labels[(i + subject) % len(labels)] for i in range(n)]
    _rng(spec.seed, 1_000_003, subject).shuffle(seq)
    return seq


def gen_timelines(spec: CorpusSpec = CorpusSpec()) -> list[dict]:
    """Group-labeled scored sessions whose state flips with the group's alternation rate."""
    sessions = []
    slot = spec.session_duration_s / spec.points_per_session
    for g_idx, (group, rate) in enumerate(sorted(spec.alternation.items())):
        for s in range(spec.sessions_per_group):
            rng = _rng(spec.seed, 2_000_003, g_idx, s)
            state = bool(rng.integers(2))
            points = []
            for i in range(spec.points_per_session):
                if i > 0 and rng.random() < rate:
                    state = not state
                p = rng.uniform(0.6, 0.95) if state else rng.uniform(0.05, 0.4)
                t0 = i * slot + rng.uniform(0, max(slot - 10.0, 0.0))
                t1 = t0 + rng.uniform(2.0, min(10.0, slot))
                points.append([round(t0, 3), round(min(t1, (i + 1) * slot), 3), round(float(p), 6)])
            sessions.append({"session_id": f"{group}_{s:03d}", "group": group, "points": points})
    return sessions


def gen_corpus(spec: CorpusSpec, out_dir) -> dict:
    """Write WAVs, ``manifest.jsonl`` and ``timelines.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rows = []
    for subj in range(spec.n_subjects):
        sid = f"subj{subj:03d}"
        for k, label in enumerate(subject_labels(spec, subj)):
            start = k * (spec.duration_s + 2.0)
            seg = gen_segment(label, spec, seed=subj * 100_000 + k, session_id=sid, start_s=start)
            rel = f"audio/{sid}_{k:03d}.wav"
            write_wav(out / rel, seg.samples, spec.sample_rate)
            rows.append({"path": rel, "session_id": sid, "subject_id": sid, "start_s": start,
                         "end_s": seg.end_s, "label": label})
    write_manifest(out / "manifest.jsonl", rows)
    timelines = gen_timelines(spec)
    with open(out / "timelines.jsonl", "w") as fh:
        for tl in timelines:
            fh.write(json.dumps(tl, sort_keys=True) + "\n")
    return {"manifest": str(out / "manifest.jsonl"), "timelines": str(out / "timelines.jsonl"),
            "n_segments": len(rows), "n_sessions": len(timelines)}
