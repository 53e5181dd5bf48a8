"""Parameter containers and the attention/transformer layers built on them."""
from __future__ import annotations

import math
import zlib
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_dtype, gelu, matmul, swapaxes


def derive_rng(root_seed: int, name: str) -> np.random.Generator:
    """Independent stream for ``name``, derived from the single root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), zlib.crc32(name.encode())]))


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=get_dtype())


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=get_dtype())


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=get_dtype())


class Module:
    """Attribute-walking parameter container (insertion order is the canonical order)."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Non-trainable tensors (e.g. normalization statistics) stored with the weights."""
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and not val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.named_parameters()}
        out.update({k: b.data for k, b in self.named_buffers()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        params.update(self.named_buffers())
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(arrays[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for _, p in list(self.named_parameters()) + list(self.named_buffers()):
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_fan_in(rng, (d_in, d_out), d_in)
        self.bias = uniform_fan_in(rng, (d_out,), d_in) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))
        self.eps = eps

    def __call__(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries from one input, keys/values from the other.

    After each call ``last_weights`` holds the (B, heads, Tq, Tk) attention
    matrix and ``last_context`` the head-merged value mixture before the
    output projection.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None
        self.last_context: np.ndarray | None = None

    def _split(self, x, B, T):
        dh = self.d_model // self.heads
        return x.reshape(B, T, self.heads, dh).transpose(0, 2, 1, 3)

    def __call__(self, query, key_value):
        B, Tq, D = query.shape
        Tk = key_value.shape[1]
        if D != self.d_model or key_value.shape[2] != self.d_model:
            raise ValueError(f"attention width mismatch: {query.shape} vs {key_value.shape}, d_model={self.d_model}")
        dh = D // self.heads
        q = self._split(self.q_proj(query) * (1.0 / math.sqrt(dh)), B, Tq)
        k = self._split(self.k_proj(key_value), B, Tk)
        v = self._split(self.v_proj(key_value), B, Tk)
        scores = matmul(q, swapaxes(k, -1, -2))
        weights = F.softmax(scores, axis=-1)
        ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
        self.last_weights = weights.data
        self.last_context = ctx.data
        return self.out_proj(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, width: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, width, rng)
        self.fc2 = Linear(width, d_model, rng)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d_model: int, heads: int, ffn_width: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_width, rng)

    def __call__(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : dim - dim // 2])
    return out
