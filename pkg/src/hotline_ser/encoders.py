"""Encoders for the three feature streams.

* ``DeepEncoder``: raw waveform -> strided conv stack (total stride 320) ->
  layer norm -> sinusoidal positions -> pre-norm transformer.
* ``PitchEncoder``: same family, freshly initialized, over the 1001-frame
  pitch contour; its stride is chosen so its output length equals the deep
  encoder's.
* ``MfccEncoder``: bidirectional LSTM over the 39-dim MFCC frames, averaged
  over time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import functional as F
from .numerics.layers import (
    LayerNorm, Module, TransformerBlock, sinusoidal_positions, uniform_fan_in,
)
from .numerics.tensor import Tensor, as_tensor, gelu, get_dtype, pad_time


class ConfigError(ValueError):
    """Inconsistent model configuration detected at build time."""


@dataclass(frozen=True)
class DeepEncoderConfig:
    conv_layers: tuple[tuple[int, int, int], ...] = ((10, 5, 16), (8, 4, 32), (8, 4, 32), (8, 4, 64))
    conv_padding: bool = True
    transformer_layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_width: int = 128
    input_length: int = 160000
    input_channels: int = 1


@dataclass(frozen=True)
class PitchEncoderConfig:
    conv_layers: tuple[tuple[int, int, int], ...] = ((3, 2, 64),)
    conv_padding: bool = False
    transformer_layers: int = 1
    d_model: int = 64
    heads: int = 4
    ffn_width: int = 128
    input_length: int = 1001
    input_channels: int = 1


@dataclass(frozen=True)
class MfccEncoderConfig:
    input_dim: int = 39
    hidden: int = 32


def conv_stack_length(cfg, length: int | None = None) -> int:
    """Output frames of the conv front-end.

    With ``conv_padding`` each layer is padded by ``kernel - stride`` samples, so
    a length divisible by the stride maps to exactly ``length // stride``.
    """
    L = cfg.input_length if length is None else length
    for k, s, _ in cfg.conv_layers:
        if cfg.conv_padding:
            L += k - s
        if k > L:
            raise ConfigError(f"kernel {k} longer than its input ({L} frames)")
        L = F.conv_output_length(L, k, s)
    return L


def total_stride(cfg) -> int:
    return int(np.prod([s for _, s, _ in cfg.conv_layers]))


def validate_encoder_config(cfg, expect_stride: int | None = None) -> None:
    if cfg.d_model % cfg.heads:
        raise ConfigError(f"d_model {cfg.d_model} not divisible by heads {cfg.heads}")
    if cfg.conv_layers[-1][2] != cfg.d_model:
        raise ConfigError("last conv layer must emit d_model channels")
    for k, s, c in cfg.conv_layers:
        if k < 1 or s < 1 or c < 1:
            raise ConfigError(f"conv layer ({k}, {s}, {c}) must be positive")
    if expect_stride is not None and total_stride(cfg) != expect_stride:
        raise ConfigError(f"conv strides multiply to {total_stride(cfg)}, expected {expect_stride}")
    conv_stack_length(cfg)


def solve_pitch_stride(n_frames: int, target_length: int, kernel: int) -> int:
    """Smallest single-layer stride mapping ``n_frames`` to ``target_length`` (valid conv)."""
    for s in range(1, n_frames + 1):
        if F.conv_output_length(n_frames, kernel, s) == target_length:
            return s
    raise ConfigError(f"no stride maps {n_frames} frames to {target_length} with kernel {kernel}")


def check_length_match(deep: DeepEncoderConfig, pitch: PitchEncoderConfig) -> int:
    a, b = conv_stack_length(deep), conv_stack_length(pitch)
    if a != b:
        raise ConfigError(f"pitch encoder emits {b} frames but the deep encoder emits {a}")
    if deep.d_model != pitch.d_model:
        raise ConfigError("deep and pitch encoders must share d_model")
    return a


class ConvLayer(Module):
    def __init__(self, c_in: int, kernel: int, stride: int, c_out: int, pad: bool, rng):
        self.weight = uniform_fan_in(rng, (kernel, c_in, c_out), kernel * c_in)
        self.bias = uniform_fan_in(rng, (c_out,), kernel * c_in)
        self.stride = stride
        self.pad = kernel - stride if pad else 0

    def __call__(self, x):
        if self.pad:
            x = pad_time(x, self.pad // 2, self.pad - self.pad // 2)
        return gelu(F.conv1d(x, self.weight, self.bias, self.stride))


class ConvTransformerEncoder(Module):
    """Conv front-end followed by a transformer trunk; (B, L, C) -> (B, T, d_model)."""

    def __init__(self, cfg, rng: np.random.Generator):
        validate_encoder_config(cfg)
        self.cfg = cfg
        c_in = cfg.input_channels
        self.convs = []
        for k, s, c in cfg.conv_layers:
            self.convs.append(ConvLayer(c_in, k, s, c, cfg.conv_padding, rng))
            c_in = c
        self.norm = LayerNorm(cfg.d_model)
        self.blocks = [TransformerBlock(cfg.d_model, cfg.heads, cfg.ffn_width, rng)
                       for _ in range(cfg.transformer_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.out_length = conv_stack_length(cfg)
        self._positions = sinusoidal_positions(self.out_length, cfg.d_model)

    def __call__(self, x):
        x = as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(x.shape[0], x.shape[1], 1)
        if x.shape[1] != self.cfg.input_length or x.shape[2] != self.cfg.input_channels:
            raise ValueError(f"encoder expects (B, {self.cfg.input_length}, {self.cfg.input_channels}), got {x.shape}")
        for conv in self.convs:
            x = conv(x)
        x = self.norm(x) + Tensor(self._positions, dtype=x.dtype)
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)


class DeepEncoder(ConvTransformerEncoder):
    def __init__(self, cfg: DeepEncoderConfig, rng: np.random.Generator):
        validate_encoder_config(cfg, expect_stride=320)
        super().__init__(cfg, rng)


class PitchEncoder(ConvTransformerEncoder):
    """Untrained-at-start encoder for the (standardized) pitch contour."""


class MfccEncoder(Module):
    """BiLSTM over MFCC frames, mean-pooled to a 2 * hidden vector.

    Inputs are standardized per coefficient with corpus statistics held in
    the ``input_mean`` / ``input_std`` buffers (identity until fitted).
    """

    def __init__(self, cfg: MfccEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        H, D = cfg.hidden, cfg.input_dim
        self.w_ih = uniform_fan_in(rng, (2, D, 4 * H), H)
        self.w_hh = uniform_fan_in(rng, (2, H, 4 * H), H)
        self.b = uniform_fan_in(rng, (2, 4 * H), H)
        self.input_mean = Tensor(np.zeros(D), dtype=get_dtype())
        self.input_std = Tensor(np.ones(D), dtype=get_dtype())

    def fit_normalizer(self, frames: np.ndarray) -> None:
        """Set per-coefficient statistics from an (N, T, D) or (T, D) array."""
        flat = np.asarray(frames, dtype=np.float64).reshape(-1, self.cfg.input_dim)
        sd = flat.std(axis=0)
        self.input_mean.data = flat.mean(axis=0).astype(self.input_mean.dtype)
        self.input_std.data = np.where(sd > 1e-8, sd, 1.0).astype(self.input_std.dtype)

    def sequence(self, x):
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.cfg.input_dim:
            raise ValueError(f"MFCC encoder expects (B, T, {self.cfg.input_dim}), got {x.shape}")
        xn = (x.data - self.input_mean.data) / self.input_std.data
        x = Tensor(xn, dtype=x.dtype) if not x.requires_grad else (x - self.input_mean) / self.input_std
        return F.bilstm(x, self.w_ih, self.w_hh, self.b)

    def __call__(self, x):
        return self.sequence(x).mean(axis=1)
