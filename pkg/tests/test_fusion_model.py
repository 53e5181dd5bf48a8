import itertools
import math

import numpy as np
import pytest

from hotline_ser.fusion_model import (
    ABLATIONS, ATTENTION_ROWS, FEATURE_ROWS, FEATURES, AttentionBlock, Classifier, FusionConfig, FusionModel,
    ModelConfig, Prediction, loss, probabilities,
)
from hotline_ser.encoders import ConfigError
from hotline_ser.numerics import Adam, MultiHeadAttention, Tensor, derive_rng, layer_norm, no_grad, precision

from gradcheck import check_grads
from tiny import T, tiny_batch, tiny_config


def _identity_attention(d):
    mha = MultiHeadAttention(d, 1, derive_rng(0, "id"))
    for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
        lin.weight.data = np.eye(d, dtype=lin.weight.dtype)
        lin.bias.data[:] = 0
    return mha


# -- cross attention ---------------------------------------------------------------
def test_single_key_returns_value_row():
    rng = np.random.default_rng(0)
    blk = AttentionBlock(8, 2, derive_rng(0, "x"), residual_norm=True)
    q, kv = Tensor(rng.normal(size=(1, 5, 8))), Tensor(rng.normal(size=(1, 1, 8)))
    out = blk(q, kv).data
    np.testing.assert_allclose(blk.last_weights, 1.0)
    v = blk.attn.out_proj(blk.attn.v_proj(kv)).data
    expected = layer_norm(q + Tensor(np.broadcast_to(v, q.shape))).data
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_identical_keys_give_uniform_weights():
    rng = np.random.default_rng(1)
    mha = MultiHeadAttention(8, 2, derive_rng(0, "x"))
    row = rng.normal(size=(1, 1, 8))
    kv = Tensor(np.repeat(row, 4, axis=1))
    mha(Tensor(rng.normal(size=(1, 3, 8))), kv)
    np.testing.assert_allclose(mha.last_weights, 0.25, atol=1e-6)
    v = mha.v_proj(kv).data
    np.testing.assert_allclose(mha.last_context, np.broadcast_to(v.mean(axis=1, keepdims=True), (1, 3, 8)), atol=1e-6)


def test_two_by_two_hand_computed():
    with precision(np.float64):
        mha = _identity_attention(2)
        q = np.array([[1.0, 0.0], [0.0, 2.0]])
        k = np.array([[1.0, 1.0], [-1.0, 0.5]])
        out = mha(Tensor(q[None]), Tensor(k[None])).data[0]
    s = 1 / math.sqrt(2)
    # row 0: logits (1, -1) * s; row 1: logits (2, 1) * s
    w0 = np.exp([s, -s]) / np.exp([s, -s]).sum()
    w1 = np.exp([2 * s, s]) / np.exp([2 * s, s]).sum()
    expected = np.array([w0 @ k, w1 @ k])
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_cross_attention_width_mismatch():
    blk = AttentionBlock(8, 2, derive_rng(0, "x"))
    with pytest.raises(ValueError):
        blk(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((1, 3, 4))))


def test_attention_rows_sum_to_one_in_model():
    model = FusionModel(tiny_config(heads=2), seed=0).eval()
    with no_grad():
        model(tiny_batch(np.random.default_rng(0)))
    for m in (model.cross, model.self_attn):
        np.testing.assert_allclose(m.last_weights.sum(-1), 1.0, atol=1e-6)


# -- fuse_wav_pitch --------------------------------------------------------------
def test_fuse_shape_default_width():
    model = FusionModel(tiny_config(d=8), seed=0)
    f = Tensor(np.random.default_rng(0).normal(size=(2, T, 8)))
    assert model.fuse_wav_pitch(f, Tensor(np.random.default_rng(1).normal(size=(2, T, 8)))).shape == (2, 16)


def test_fuse_identical_streams_symmetric_halves():
    model = FusionModel(tiny_config(d=8), seed=0)
    f = Tensor(np.random.default_rng(0).normal(size=(2, T, 8)))
    out = model.fuse_wav_pitch(f, f).data
    np.testing.assert_array_equal(out[:, :8], out[:, 8:])


def test_fuse_zeroed_projections_isolate_residual():
    model = FusionModel(tiny_config(d=8), seed=0)
    for lin in (model.cross.attn.v_proj, model.cross.attn.out_proj):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    rng = np.random.default_rng(2)
    fw, fp = Tensor(rng.normal(size=(2, T, 8))), Tensor(rng.normal(size=(2, T, 8)))
    out = model.fuse_wav_pitch(fw, fp).data
    expected = np.concatenate([layer_norm(fw).data, layer_norm(fp).data], axis=-1).mean(axis=1)
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_fuse_length_mismatch():
    model = FusionModel(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        model.fuse_wav_pitch(Tensor(np.zeros((1, 6, 8))), Tensor(np.zeros((1, 5, 8))))


# -- assemble_and_attend -----------------------------------------------------------
def test_assemble_shape():
    model = FusionModel(tiny_config(d=8), seed=0)
    out = model.assemble_and_attend([Tensor(np.ones((3, 16))), Tensor(np.ones((3, 8)))])
    assert out.shape == (3, 16)


def test_assemble_identical_tokens():
    model = FusionModel(tiny_config(d=8), seed=0)
    # same projected token twice
    model.token_proj[1].weight.data = model.token_proj[0].weight.data[:8].copy()
    model.token_proj[0].weight.data[8:] = 0
    model.token_proj[1].bias.data = model.token_proj[0].bias.data.copy()
    x = np.random.default_rng(0).normal(size=(2, 8))
    a = Tensor(np.concatenate([x, np.zeros((2, 8))], axis=1))
    out = model.assemble_and_attend([a, Tensor(x)]).data
    np.testing.assert_allclose(out[:, :8], out[:, 8:], atol=1e-6)


def test_self_attention_permutation_equivariance():
    rng = np.random.default_rng(5)
    model = FusionModel(tiny_config(d=8, feature_set=("deep", "mfcc"), ablation="self_only"), seed=1)
    tied = model.token_proj[0]
    model.token_proj[1].weight.data = tied.weight.data.copy()
    model.token_proj[1].bias.data = tied.bias.data.copy()
    a, b = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(2, 8)))
    ab = model.assemble_and_attend([a, b]).data
    ba = model.assemble_and_attend([b, a]).data
    np.testing.assert_allclose(ab[:, :8], ba[:, 8:], atol=1e-6)
    np.testing.assert_allclose(ab[:, 8:], ba[:, :8], atol=1e-6)


def test_assemble_wrong_block_count():
    model = FusionModel(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        model.assemble_and_attend([Tensor(np.ones((1, 16)))])


# -- classifier / probabilities / loss ----------------------------------------------
def test_zero_classifier_gives_half():
    clf = Classifier(16, 8, 1, 0.3, derive_rng(0, "c"))
    for p in clf.parameters().values():
        p.data[:] = 0
    clf.eval()
    logits = clf(Tensor(np.random.default_rng(0).normal(size=(2, 16)))).data
    assert np.all(logits == 0)
    assert np.all(Prediction(logits, probabilities(logits)).prob_negative == 0.5)


def test_inference_is_deterministic():
    model = FusionModel(tiny_config(dropout=0.3), seed=0)
    batch = tiny_batch(np.random.default_rng(0))
    a, b = model.predict(batch), model.predict(batch)
    assert np.array_equal(a.logits, b.logits)
    assert model.training  # predict restores the mode


def test_sigmoid_closed_form():
    assert probabilities(np.array([[2.0]]))[0, 0] == pytest.approx(0.8808, abs=1e-4)


def test_multiclass_probabilities_sum_to_one():
    p = probabilities(np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_bce_values():
    assert loss(Tensor([[0.0]]), [1]).item() == pytest.approx(math.log(2), rel=1e-6)
    big = loss(Tensor([[100.0]]), [1]).item()
    assert math.isfinite(big) and big < 1e-30
    assert loss(Tensor([[-100.0]]), [1]).item() == pytest.approx(100.0, rel=1e-6)


def test_cross_entropy_closed_form():
    with precision(np.float64):
        val = loss(Tensor([[1.0, 2.0, 3.0]]), [2]).item()
    assert val == pytest.approx(-math.log(math.e ** 3 / (math.e + math.e ** 2 + math.e ** 3)), rel=1e-12)
    assert val == pytest.approx(0.4076, abs=1e-4)


@pytest.mark.parametrize("logits,label", [([[0.0]], [2]), ([[1.0, 2.0]], [5])])
def test_invalid_labels(logits, label):
    with pytest.raises(ValueError):
        loss(Tensor(logits), label)


# -- ablation structure -----------------------------------------------------------------
def test_ablation_rows_constructible():
    assert list(ATTENTION_ROWS) == ["Vanilla", "Cross-attention", "Self-attention", "Proposed"]
    assert len(FEATURE_ROWS) == 4
    assert set(ATTENTION_ROWS.values()) == set(ABLATIONS)
    rng = np.random.default_rng(0)
    for feats in FEATURE_ROWS.values():
        model = FusionModel(tiny_config(feature_set=feats), seed=0)
        assert model.predict(tiny_batch(rng)).logits.shape == (2, 1)


def test_every_ablation_subset_combination_builds():
    rng = np.random.default_rng(0)
    batch = tiny_batch(rng)
    for abl in ABLATIONS:
        for r in range(1, 4):
            for feats in itertools.combinations(FEATURES, r):
                p = FusionModel(tiny_config(ablation=abl, feature_set=feats), seed=0).predict(batch)
                assert np.all((p.prob_negative >= 0) & (p.prob_negative <= 1))


def test_deep_only_is_encoder_plus_classifier():
    model = FusionModel(tiny_config(feature_set=("deep",)), seed=0)
    assert model.pitch is None and model.mfcc is None and model.cross is None and model.self_attn is None
    assert {k.split(".")[0] for k in model.parameters()} == {"deep", "classifier"}


def test_vanilla_attention_params_get_no_gradient():
    model = FusionModel(tiny_config(ablation="vanilla"), seed=0)
    names = model.attention_parameter_names()
    assert names
    loss(model(tiny_batch(np.random.default_rng(0))), [0, 1]).backward()
    params = model.parameters()
    assert all(params[n].grad is None for n in names)


def test_full_model_attention_params_get_gradient():
    model = FusionModel(tiny_config(), seed=0)
    loss(model(tiny_batch(np.random.default_rng(0))), [0, 1]).backward()
    params = model.parameters()
    assert all(params[n].grad is not None for n in model.attention_parameter_names())


def test_full_model_random_input():
    model = FusionModel(tiny_config(dropout=0.3), seed=0)
    batch = tiny_batch(np.random.default_rng(0))
    L = loss(model(batch), [1, 0])
    assert math.isfinite(L.item())
    p = model.predict(batch).prob_negative
    assert np.all((p >= 0) & (p <= 1))


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(ablation="everything")
    with pytest.raises(ConfigError):
        FusionConfig(feature_set=("deep", "spectrogram"))
    with pytest.raises(ConfigError):
        FusionConfig(dropout=1.0)
    assert FusionConfig(feature_set=("mfcc", "deep")).feature_set == ("deep", "mfcc")


def test_default_model_forward_shapes():
    model = FusionModel(ModelConfig(), seed=0)
    rng = np.random.default_rng(0)
    batch = {"wave": (0.1 * rng.normal(size=(1, 160000))).astype(np.float32),
             "mfcc": rng.normal(size=(1, 1001, 39)).astype(np.float32),
             "pitch": rng.normal(size=(1, 1001, 1)).astype(np.float32)}
    enc = model.encode(batch)
    assert enc["f_w"].shape == enc["f_p"].shape == (1, 500, 64) and enc["f_m"].shape == (1, 64)
    assert model.fuse_wav_pitch(enc["f_w"], enc["f_p"]).shape == (1, 128)
    assert model.fused_features(batch).shape == (1, 128)
    assert model.predict(batch).logits.shape == (1, 1)


# -- gradients and descent ---------------------------------------------------------------
def test_end_to_end_gradcheck_tiny():
    with precision(np.float64):
        model = FusionModel(tiny_config(d=8, heads=1), seed=0)
        batch = tiny_batch(np.random.default_rng(0), dtype=np.float64)
        check_grads(lambda: loss(model(batch), np.array([0, 1])), list(model.parameters().values()))


def test_one_adam_step_descends():
    passed = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = FusionModel(tiny_config(), seed=seed)
        batch = tiny_batch(rng, B=1)
        label = [int(rng.integers(2))]
        opt = Adam(model.parameters(), lr=1e-4)
        before = loss(model(batch), label)
        before.backward()
        opt.step()
        with no_grad():
            after = loss(model(batch), label).item()
        passed += after < before.item()
    assert passed >= 18
