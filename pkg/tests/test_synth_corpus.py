import json
from collections import Counter

import numpy as np
import pytest

from hotline_ser.audio_io import load_segment, load_wav, read_manifest
from hotline_ser.dsp_features import pitch_contour
from hotline_ser.synth_corpus import ClassParams, CorpusSpec, gen_corpus, gen_segment, gen_timelines
from hotline_ser.trend_analysis import ecr
from hotline_ser.training import make_split

INTERIOR = slice(10, -10)


@pytest.mark.parametrize("label", ["negative", "non_negative"])
def test_voiced_mean_tracks_class_f0(label):
    spec = CorpusSpec()
    f0 = pitch_contour(gen_segment(label, spec, seed=7)).frames[:, 0]
    voiced = f0[f0 > 0]
    assert len(voiced) > 0.9 * len(f0)
    assert abs(voiced.mean() - spec.class_params[label].f0_mean) <= 10.0


def test_segment_deterministic():
    a, b = gen_segment("negative", seed=3), gen_segment("negative", seed=3)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, gen_segment("negative", seed=4).samples)


def test_clean_spec_is_periodic_and_voiced():
    params = {"negative": ClassParams(150.0, 0.0, -12.0, 0.0), "non_negative": ClassParams(200.0, 0.0, -6.0, 0.0)}
    spec = CorpusSpec(class_params=params, noise_level=0.0)
    seg = gen_segment("negative", spec, seed=0)
    # 16000 / 150 is not an integer, so compare three periods = 320 samples
    np.testing.assert_allclose(seg.samples[320:3520], seg.samples[:3200], atol=1e-9)
    f0 = pitch_contour(seg).frames[INTERIOR, 0]
    assert (f0 > 0).mean() > 0.95


def test_unknown_label_and_identical_classes():
    with pytest.raises(ValueError):
        gen_segment("angry")
    same = ClassParams(150.0)
    with pytest.raises(ValueError):
        CorpusSpec(class_params={"negative": same, "non_negative": same})


def test_corpus_counts_and_round_trip(tmp_path):
    spec = CorpusSpec(n_subjects=10, segments_per_subject=20, sessions_per_group=3)
    info = gen_corpus(spec, tmp_path)
    rows = read_manifest(info["manifest"])
    assert len(rows) == info["n_segments"] == 200
    assert Counter(r["label"] for r in rows) == {"negative": 100, "non_negative": 100}
    plan = make_split([r["subject_id"] for r in rows], n_folds=0)
    assert len(plan.train_subjects) + len(plan.test_subjects) == 10
    # 16-bit quantization: every sample within one LSB of the generator output
    seg = gen_segment(rows[0]["label"], spec, seed=0, session_id="subj000", start_s=0.0)
    disk = load_wav(rows[0]["path"]).samples
    assert np.abs(disk - seg.samples).max() <= 1 / 32768 + 1e-12
    assert load_segment(rows[0]).label == rows[0]["label"]


def test_corpus_deterministic(tmp_path):
    spec = CorpusSpec(n_subjects=2, segments_per_subject=2, sessions_per_group=2)
    gen_corpus(spec, tmp_path / "a")
    gen_corpus(spec, tmp_path / "b")
    for name in ("manifest.jsonl", "timelines.jsonl", "audio/subj001_001.wav"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_timeline_ecr_ordering_matches_alternation():
    tls = gen_timelines(CorpusSpec())
    mean = {g: np.mean([ecr(np.array(t["points"])[:, 2]) for t in tls if t["group"] == g])
            for g in ("suicide", "non_suicide")}
    assert mean["suicide"] > mean["non_suicide"]
    assert json.loads(json.dumps(tls)) == tls
