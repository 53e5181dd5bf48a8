"""Fused layer kernels with hand-written backward passes."""
from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError, Tensor, _check_axis, _sigmoid_np, as_tensor, make_node, sigmoid, tanh,
)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(axis, x.ndim)
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * y
        gx -= y * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return make_node(y, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward, "log_softmax")


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        parents.append(gamma)
        out = out * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        parents.append(beta)
        out = out + beta.data

    def backward(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return make_node(out.astype(x.dtype, copy=False), parents, backward, "layer_norm")


def conv_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def conv1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid 1-D convolution over time.

    x: (B, L, Cin), weight: (k, Cin, Cout), bias: (Cout,). Output (B, L_out, Cout)
    with L_out = floor((L - k) / stride) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1:
        raise ShapeError("stride must be positive")
    B, L, Cin = x.shape
    k, wc, Cout = weight.shape
    if k < 1:
        raise ShapeError("kernel must be positive")
    if wc != Cin:
        raise ShapeError(f"conv1d channel mismatch: input {Cin}, kernel {wc}")
    if k > L:
        raise ShapeError(f"kernel {k} longer than input {L}")
    L_out = conv_output_length(L, k, stride)
    xs = x.data
    s0, s1, s2 = xs.strides
    patches = np.lib.stride_tricks.as_strided(
        xs, shape=(B, L_out, k, Cin), strides=(s0, s1 * stride, s1, s2), writeable=False)
    cols = patches.reshape(B * L_out, k * Cin)
    w2 = weight.data.reshape(k * Cin, Cout)
    out = (cols @ w2).reshape(B, L_out, Cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(B * L_out, Cout)
        gw = (cols.T @ g2).reshape(k, Cin, Cout)
        gcols = (g2 @ w2.T).reshape(B, L_out, k, Cin)
        gx = np.zeros_like(xs)
        span = stride * (L_out - 1) + 1
        for j in range(k):
            gx[:, j:j + span:stride] += gcols[:, :, j]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out, parents, backward, "conv1d")


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity at inference or when rate == 0."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    keep *= 1.0 / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def lstm_step(x_t, h, c, w_ih, w_hh, b):
    """One LSTM cell update built from primitive ops (gate order i, f, g, o).

    x_t: (B, D), h, c: (B, H), w_ih: (D, 4H), w_hh: (H, 4H), b: (4H,).
    """
    gates = as_tensor(x_t) @ w_ih + as_tensor(h) @ w_hh + b
    H = as_tensor(h).shape[-1]
    i = sigmoid(gates[:, 0:H])
    f = sigmoid(gates[:, H:2 * H])
    g = tanh(gates[:, 2 * H:3 * H])
    o = sigmoid(gates[:, 3 * H:4 * H])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def bilstm(x, w_ih, w_hh, b) -> Tensor:
    """Bidirectional single-layer LSTM over a whole sequence.

    x: (B, T, D); w_ih: (2, D, 4H); w_hh: (2, H, 4H); b: (2, 4H). Direction 0
    runs forward in time, direction 1 backward. Returns (B, T, 2H) with the
    forward states in the first H columns. Both directions advance in one
    batched recurrence; backward is hand-written BPTT.
    """
    x, w_ih, w_hh, b = (as_tensor(t) for t in (x, w_ih, w_hh, b))
    B, T, D = x.shape
    if w_ih.shape[1] != D:
        raise ShapeError(f"bilstm expects input width {w_ih.shape[1]}, got {D}")
    H = w_hh.shape[1]
    dt = x.dtype
    xd = x.data
    Wih, Whh = w_ih.data, w_hh.data

    # input projections for both directions, time-major (T, 2, B, 4H)
    xp = np.einsum("btd,kdg->tkbg", xd, Wih, optimize=True) + b.data[None, :, None, :]
    xp[:, 1] = xp[::-1, 1].copy()

    acts = np.empty((T, 2, B, 4 * H), dtype=dt)   # i, f, g, o after nonlinearity
    cs = np.empty((T + 1, 2, B, H), dtype=dt)
    hs = np.empty((T + 1, 2, B, H), dtype=dt)
    tcs = np.empty((T, 2, B, H), dtype=dt)
    cs[0] = 0.0
    hs[0] = 0.0
    for t in range(T):
        z = xp[t] + hs[t] @ Whh
        a = acts[t]
        a[..., :2 * H] = _sigmoid_np(z[..., :2 * H])
        a[..., 2 * H:3 * H] = np.tanh(z[..., 2 * H:3 * H])
        a[..., 3 * H:] = _sigmoid_np(z[..., 3 * H:])
        cs[t + 1] = a[..., H:2 * H] * cs[t] + a[..., :H] * a[..., 2 * H:3 * H]
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = a[..., 3 * H:] * tcs[t]

    out = np.empty((B, T, 2 * H), dtype=dt)
    out[:, :, :H] = hs[1:, 0].transpose(1, 0, 2)
    out[:, :, H:] = hs[:0:-1, 1].transpose(1, 0, 2)

    def backward(gout):
        gh_seq = np.empty((T, 2, B, H), dtype=dt)
        gh_seq[:, 0] = gout[:, :, :H].transpose(1, 0, 2)
        gh_seq[:, 1] = gout[:, ::-1, H:].transpose(1, 0, 2)
        dz_all = np.empty((T, 2, B, 4 * H), dtype=dt)
        dh_next = np.zeros((2, B, H), dtype=dt)
        dc_next = np.zeros((2, B, H), dtype=dt)
        WhhT = np.swapaxes(Whh, 1, 2)
        for t in range(T - 1, -1, -1):
            a = acts[t]
            i, f, gg, o = a[..., :H], a[..., H:2 * H], a[..., 2 * H:3 * H], a[..., 3 * H:]
            dh = gh_seq[t] + dh_next
            tc = tcs[t]
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[t]
            dz[..., :H] = dc * gg * i * (1.0 - i)
            dz[..., H:2 * H] = dc * cs[t] * f * (1.0 - f)
            dz[..., 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            dz[..., 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ WhhT
        # dW_hh[k] = sum_t h_{t-1}^T dz_t
        gWhh = np.einsum("tkbh,tkbg->khg", hs[:-1], dz_all, optimize=True)
        dz_all[:, 1] = dz_all[::-1, 1].copy()   # back to input time order
        gWih = np.einsum("btd,tkbg->kdg", xd, dz_all, optimize=True)
        gb = dz_all.sum(axis=(0, 2))
        gx = np.einsum("tkbg,kdg->btd", dz_all, Wih, optimize=True)
        return gx, gWih, gWhh, gb

    return make_node(out, (x, w_ih, w_hh, b), backward, "bilstm")


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy computed directly from logits."""
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=z.dtype).reshape(z.shape)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("binary targets must be 0 or 1")
    zd = z.data
    per = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size

    def backward(g):
        return (g * (_sigmoid_np(zd) - y) / n,)

    return make_node(np.asarray(per.mean(), dtype=z.dtype), (z,), backward, "bce_with_logits")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels under softmax(logits)."""
    z = as_tensor(logits)
    if z.ndim != 2:
        raise ShapeError("cross_entropy expects (N, C) logits")
    N, C = z.shape
    labels = np.asarray(labels)
    if labels.shape != (N,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be N integer class indices")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(N), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(N), labels] -= 1.0
        return (g * p / N,)

    return make_node(np.asarray(loss, dtype=z.dtype), (z,), backward, "cross_entropy")
