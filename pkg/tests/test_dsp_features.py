import numpy as np
import pytest

from hotline_ser.audio_io import AudioSegment
from hotline_ser.dsp_features import (
    FeatureSequence, MfccConfig, deltas, load_features, mel_filterbank, mfcc_39, pitch_contour, save_features,
    standardize_pitch,
)

SR, N = 16000, 160000
INTERIOR = slice(10, -10)


def sine(freq, amp=0.5, n=N):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / SR)


def test_mfcc_shape_on_any_input():
    rng = np.random.default_rng(0)
    for x in (rng.normal(size=N), np.zeros(N), sine(440)):
        seq = mfcc_39(x)
        assert seq.shape == (1001, 39)
        assert seq.source == "mfcc" and seq.frame_hop_s == 0.01


def test_mfcc_accepts_segment():
    seg = AudioSegment(samples=sine(300), sample_rate=SR)
    np.testing.assert_array_equal(mfcc_39(seg).frames, mfcc_39(sine(300)).frames)


def test_mfcc_silence_exact_zero_deltas():
    f = mfcc_39(np.zeros(N)).frames
    assert np.all(f[:, 13:] == 0.0)
    assert np.all(f[:, 0] == f[0, 0])
    # log floor 1e-10 in every mel band, orthonormal DCT: c0 = sqrt(40) * ln(1e-10)
    assert f[0, 0] == pytest.approx(np.sqrt(40) * np.log(1e-10), rel=1e-12)


def test_mfcc_distinguishes_tones_and_steady_deltas():
    a, b = mfcc_39(sine(1000)).frames, mfcc_39(sine(3000)).frames
    assert np.linalg.norm(a[INTERIOR, :13].mean(0) - b[INTERIOR, :13].mean(0)) > 1.0
    assert np.abs(a[INTERIOR, 13:]).max() < 1e-6


def test_mfcc_shift_covariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=N + 160)
    early, late = mfcc_39(x[160:]).frames, mfcc_39(x[:N]).frames
    # delaying by one hop moves frame t to t + 1
    np.testing.assert_allclose(late[11:-10], early[10:-11], atol=1e-4)


def test_mfcc_gain_changes_only_c0():
    x = np.random.default_rng(4).normal(size=N) * 0.1
    a, b = mfcc_39(x).frames, mfcc_39(2 * x).frames
    diff = (b - a)[INTERIOR]
    np.testing.assert_allclose(diff[:, 0], np.sqrt(40) * np.log(4.0), atol=1e-6)
    np.testing.assert_allclose(diff[:, 1:], 0.0, atol=1e-4)


def test_mfcc_rejects_wrong_input():
    with pytest.raises(ValueError):
        mfcc_39(np.zeros(N - 1))
    with pytest.raises(ValueError):
        mfcc_39(np.zeros(N), sample_rate=8000)


def test_mel_filterbank_shape_and_peaks():
    fb = mel_filterbank(MfccConfig())
    assert fb.shape == (40, 257)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)
    assert np.all(np.diff(fb.argmax(axis=1)) >= 0)


def test_deltas_regression_oracle():
    # linear ramp: the 5-point regression slope is exactly 1 away from the edges
    ramp = np.arange(20.0)[:, None]
    d = deltas(ramp, 2)
    np.testing.assert_allclose(d[2:-2, 0], 1.0)
    # replicated edge: first frame sees (1 - 0) + 2 * (2 - 0) over 10
    assert d[0, 0] == pytest.approx(0.5)


# -- pitch ---------------------------------------------------------------------------
@pytest.mark.parametrize("freq", [100.0, 220.0, 350.0])
def test_pitch_on_sines(freq):
    f0 = pitch_contour(sine(freq)).frames[INTERIOR, 0]
    voiced = f0 > 0
    assert voiced.mean() > 0.95
    assert np.abs(f0[voiced] - freq).max() <= 3.0


def test_pitch_silence_unvoiced():
    assert np.all(pitch_contour(np.zeros(N)).frames == 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pitch_white_noise_mostly_unvoiced(seed):
    f0 = pitch_contour(np.random.default_rng(seed).normal(size=N) * 0.3).frames[:, 0]
    assert (f0 == 0).mean() >= 0.9


def test_pitch_shape_and_range():
    seq = pitch_contour(sine(180))
    assert seq.shape == (1001, 1) and seq.source == "pitch"
    v = seq.frames[seq.frames > 0]
    assert v.min() >= 50 and v.max() <= 500


def test_standardize_pitch():
    raw = np.zeros((10, 1))
    raw[[1, 2, 5, 7], 0] = [100, 110, 120, 130]
    out = standardize_pitch(FeatureSequence(raw, 0.01, "pitch")).frames[:, 0]
    v = out[[1, 2, 5, 7]]
    assert v.mean() == pytest.approx(0.0, abs=1e-12) and v.std() == pytest.approx(1.0)
    assert np.all(out[[0, 3, 4, 6, 8, 9]] == 0)
    flat = standardize_pitch(FeatureSequence(np.where(raw > 0, 150.0, 0.0), 0.01, "pitch")).frames
    assert np.all(flat == 0)


# -- feature sequences and dumps -------------------------------------------------------
@pytest.mark.parametrize("frames,source", [
    (np.zeros((0, 39)), "mfcc"), (np.zeros((3, 38)), "mfcc"), (np.zeros((3, 2)), "pitch"),
    (np.full((3, 1), np.nan), "pitch"), (np.zeros((3, 1)), "spectrogram"),
])
def test_feature_sequence_invariants(frames, source):
    with pytest.raises(ValueError):
        FeatureSequence(frames, 0.01, source)


def test_feature_dump_round_trip(tmp_path):
    seq = mfcc_39(sine(500))
    save_features(tmp_path / "f.bin", seq)
    back = load_features(tmp_path / "f.bin")
    assert back.source == "mfcc" and back.frame_hop_s == 0.01
    np.testing.assert_array_equal(back.frames, seq.frames.astype(np.float32))


def test_feature_dump_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"SERCKPT1....")
    with pytest.raises(ValueError):
        load_features(tmp_path / "x.bin")
