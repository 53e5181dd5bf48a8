"""Attention fusion of the deep, pitch and MFCC streams and the classifier head.

Forward pass for the full model (ablation ``both``)::

    f_w  = DeepEncoder(wave)                    (B, T, d)
    f_p' = PitchEncoder(pitch)                  (B, T, d)
    f_m' = mean_t BiLSTM(mfcc)                  (B, 2H)
    f_wp' = mean_t [Cross(f_w, f_p') | Cross(f_p', f_w)]     (B, 2d)
    F^a  = SelfAttention([proj(f_wp'), proj(f_m')])  flattened (B, 2d)
    logits = FC(tanh(FC(dropout(F^a)))) after a second dropout

The cross-attention weights are shared between the two directions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp_features import mfcc_39, pitch_contour, standardize_pitch
from .encoders import (
    ConfigError, DeepEncoder, DeepEncoderConfig, MfccEncoder, MfccEncoderConfig, PitchEncoder,
    PitchEncoderConfig, check_length_match,
)
from .numerics import functional as F
from .numerics.layers import LayerNorm, Linear, Module, MultiHeadAttention, derive_rng
from .numerics.tensor import Tensor, concat, no_grad, stack, tanh

ABLATIONS = ("vanilla", "cross_only", "self_only", "both")
FEATURES = ("deep", "pitch", "mfcc")

# row label -> feature subset (feature ablation) / ablation value (attention ablation)
FEATURE_ROWS = {
    "Deep (f^w)": ("deep",),
    "Pitch (f^p)": ("pitch",),
    "MFCC (f^m)": ("mfcc",),
    "Merged (F)": ("deep", "pitch", "mfcc"),
}
ATTENTION_ROWS = {
    "Vanilla": "vanilla",
    "Cross-attention": "cross_only",
    "Self-attention": "self_only",
    "Proposed": "both",
}


@dataclass(frozen=True)
class FusionConfig:
    d_model: int = 64
    heads: int = 4
    dropout: float = 0.3
    n_classes: int = 1
    ablation: str = "both"
    feature_set: tuple[str, ...] = FEATURES
    classifier_hidden: int = 64
    residual_norm: bool = True

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        fs = tuple(self.feature_set)
        if not fs or set(fs) - set(FEATURES) or len(set(fs)) != len(fs):
            raise ConfigError(f"feature_set must be a non-empty subset of {FEATURES}, got {fs}")
        object.__setattr__(self, "feature_set", tuple(f for f in FEATURES if f in fs))
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    deep: DeepEncoderConfig = field(default_factory=DeepEncoderConfig)
    pitch: PitchEncoderConfig = field(default_factory=PitchEncoderConfig)
    mfcc: MfccEncoderConfig = field(default_factory=MfccEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray

    @property
    def prob_negative(self) -> np.ndarray:
        """P(negative emotion) for the binary head."""
        return self.probs[..., 0] if self.probs.shape[-1] == 1 else self.probs


def probabilities(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] == 1:
        return 1.0 / (1.0 + np.exp(-logits))
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss(logits, labels) -> Tensor:
    """BCE-with-logits for a single output column, softmax cross-entropy otherwise."""
    labels = np.asarray(labels)
    if logits.shape[-1] == 1:
        return F.bce_with_logits(logits, labels.reshape(-1, 1))
    return F.cross_entropy(logits, labels.astype(np.int64))


class AttentionBlock(Module):
    """Multi-head attention with optional residual + layer norm: LN(q + MHA(q, kv))."""

    def __init__(self, d_model: int, heads: int, rng, residual_norm: bool = True):
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm = LayerNorm(d_model) if residual_norm else None

    def __call__(self, query, key_value):
        a = self.attn(query, key_value)
        if self.norm is None:
            return a
        return self.norm(query + a)

    @property
    def last_weights(self):
        return self.attn.last_weights


class Classifier(Module):
    def __init__(self, d_in: int, hidden: int, n_classes: int, rate: float, rng):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, n_classes, rng)
        self.rate = rate

    def __call__(self, x, rng=None):
        x = F.dropout(x, self.rate, self.training, rng)
        x = tanh(self.fc1(x))
        x = F.dropout(x, self.rate, self.training, rng)
        return self.fc2(x)


class FusionModel(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        fc = cfg.fusion
        feats = set(fc.feature_set)
        self.deep = DeepEncoder(cfg.deep, derive_rng(seed, "deep")) if "deep" in feats else None
        self.pitch = PitchEncoder(cfg.pitch, derive_rng(seed, "pitch")) if "pitch" in feats else None
        self.mfcc = MfccEncoder(cfg.mfcc, derive_rng(seed, "mfcc")) if "mfcc" in feats else None
        for enc_cfg, used in ((cfg.deep, self.deep), (cfg.pitch, self.pitch)):
            if used is not None and enc_cfg.d_model != fc.d_model:
                raise ConfigError("encoder d_model must equal fusion d_model")
        has_pair = self.deep is not None and self.pitch is not None
        if has_pair:
            check_length_match(cfg.deep, cfg.pitch)
        # fusion attention modules exist whenever their inputs do, even if the
        # ablation bypasses them, so parameter sets are comparable across rows
        self.cross = AttentionBlock(fc.d_model, fc.heads, derive_rng(seed, "cross"), fc.residual_norm) if has_pair else None
        self.use_cross = has_pair and fc.ablation in ("cross_only", "both")
        dims = self.block_dims()
        self.self_attn = (AttentionBlock(fc.d_model, fc.heads, derive_rng(seed, "self"), fc.residual_norm)
                          if len(dims) >= 2 else None)
        self.use_self = self.self_attn is not None and fc.ablation in ("self_only", "both")
        proj_rng = derive_rng(seed, "token_proj")
        self.token_proj = [Linear(d, fc.d_model, proj_rng) for d in dims] if self.use_self else []
        head_in = fc.d_model * len(dims) if self.use_self else sum(dims)
        self.classifier = Classifier(head_in, fc.classifier_hidden, fc.n_classes, fc.dropout,
                                     derive_rng(seed, "classifier"))
        self.dropout_rng = derive_rng(seed, "dropout")

    # -- structure --------------------------------------------------------
    def block_dims(self) -> list[int]:
        d = self.cfg.fusion.d_model
        dims = []
        if self.use_cross:
            dims.append(2 * d)
        else:
            if self.deep is not None:
                dims.append(d)
            if self.pitch is not None:
                dims.append(d)
        if self.mfcc is not None:
            dims.append(2 * self.cfg.mfcc.hidden)
        return dims

    def attention_parameter_names(self) -> list[str]:
        """Parameters of the fusion attention stages (cross, self, token projections)."""
        return [n for n in self.parameters() if n.split(".")[0] in ("cross", "self_attn", "token_proj")]

    # -- stages -------------------------------------------------------------
    def fuse_wav_pitch(self, f_w, f_p):
        if f_w.shape != f_p.shape:
            raise ValueError(f"deep/pitch sequences differ: {f_w.shape} vs {f_p.shape}")
        w_to_p = self.cross(f_w, f_p)
        p_to_w = self.cross(f_p, f_w)
        return concat([w_to_p, p_to_w], axis=-1).mean(axis=1)

    def assemble_and_attend(self, blocks):
        if len(blocks) != len(self.token_proj):
            raise ValueError(f"expected {len(self.token_proj)} blocks, got {len(blocks)}")
        tokens = stack([proj(b) for proj, b in zip(self.token_proj, blocks)], axis=1)
        out = self.self_attn(tokens, tokens)
        B, n, d = out.shape
        return out.reshape(B, n * d)

    def encode(self, batch: dict) -> dict:
        out = {}
        if self.deep is not None:
            out["f_w"] = self.deep(batch["wave"])
        if self.pitch is not None:
            out["f_p"] = self.pitch(batch["pitch"])
        if self.mfcc is not None:
            out["f_m"] = self.mfcc(batch["mfcc"])
        return out

    def fused_features(self, batch: dict):
        enc = self.encode(batch)
        blocks = []
        if self.use_cross:
            blocks.append(self.fuse_wav_pitch(enc["f_w"], enc["f_p"]))
        else:
            if "f_w" in enc:
                blocks.append(enc["f_w"].mean(axis=1))
            if "f_p" in enc:
                blocks.append(enc["f_p"].mean(axis=1))
        if "f_m" in enc:
            blocks.append(enc["f_m"])
        if self.use_self:
            return self.assemble_and_attend(blocks)
        return blocks[0] if len(blocks) == 1 else concat(blocks, axis=-1)

    def __call__(self, batch: dict):
        return self.classifier(self.fused_features(batch), self.dropout_rng)

    def predict(self, batch: dict) -> Prediction:
        was = self.training
        self.eval()
        with no_grad():
            logits = self(batch).data
        self.train(was)
        return Prediction(logits=logits, probs=probabilities(logits))


def model_inputs(segments, dtype=np.float32) -> dict:
    """Waveform, MFCC-39 and standardized pitch arrays for preprocessed segments."""
    wave = np.stack([np.asarray(s.samples) for s in segments]).astype(dtype)
    mfcc = np.stack([mfcc_39(s).frames for s in segments]).astype(dtype)
    pitch = np.stack([standardize_pitch(pitch_contour(s)).frames for s in segments]).astype(dtype)
    return {"wave": wave, "mfcc": mfcc, "pitch": pitch}


def forward(segment, model: FusionModel) -> Prediction:
    """Score one preprocessed segment end to end."""
    return model.predict(model_inputs([segment]))
