"""Minimal numpy layer library: explicit forward passes with caches and
hand-derived backward passes, dtype-preserving so gradient checks can run
in float64 while training runs in float32."""

from __future__ import annotations

import numpy as np
from scipy.special import erf

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def init_linear(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=np.float32):
    """Scaled-uniform fan-in init; returns (weight (out,in), bias (out,))."""
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
    b = np.zeros(fan_out, dtype=dtype)
    return w, b


# ---------------------------------------------------------------------------
# Pointwise


def gelu(x):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_backward(dout, x):
    phi = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    cdf = 0.5 * (1.0 + erf(x / SQRT2))
    return dout * (cdf + x * phi)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout(x, rate: float, rng: np.random.Generator):
    """Inverted dropout; returns (out, mask). rate=0 is the identity."""
    if rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------------------
# Linear


def linear(x, w, b):
    """x: (..., in), w: (out, in), b: (out,)."""
    return x @ w.T + b


def linear_backward(dout, x, w):
    dx = dout @ w
    dw = dout.reshape(-1, dout.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# Layer norm (over the last axis)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dout * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * gamma
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Softmax / multi-head self-attention


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout, s, axis=-1):
    return s * (dout - (dout * s).sum(axis=axis, keepdims=True))


def attention(x, wq, wk, wv, wo, bq, bk, bv, bo, n_heads: int):
    """Multi-head self-attention over (N, T, d); returns (out, cache)."""
    n, t, d = x.shape
    dh = d // n_heads

    def split(z):  # (N, T, d) -> (N, h, T, dh)
        return z.reshape(n, t, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = linear(x, wq, bq), linear(x, wk, bk), linear(x, wv, bv)
    qh, kh, vh = split(q), split(k), split(v)
    scale = 1.0 / np.sqrt(dh)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    attn = softmax(scores)
    ctx = attn @ vh  # (N, h, T, dh)
    merged = ctx.transpose(0, 2, 1, 3).reshape(n, t, d)
    out = linear(merged, wo, bo)
    cache = (x, qh, kh, vh, attn, merged, wq, wk, wv, wo, n_heads, scale)
    return out, cache


def attention_backward(dout, cache):
    x, qh, kh, vh, attn, merged, wq, wk, wv, wo, n_heads, scale = cache
    n, t, d = x.shape
    dh = d // n_heads

    def split(z):
        return z.reshape(n, t, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(z):
        return z.transpose(0, 2, 1, 3).reshape(n, t, d)

    dmerged, dwo, dbo = linear_backward(dout, merged, wo)
    dctx = split(dmerged)
    dattn = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_backward(dattn, attn) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dxq, dwq, dbq = linear_backward(merge(dqh), x, wq)
    dxk, dwk, dbk = linear_backward(merge(dkh), x, wk)
    dxv, dwv, dbv = linear_backward(merge(dvh), x, wv)
    dx = dxq + dxk + dxv
    grads = {"wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk,
             "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo}
    return dx, grads


# ---------------------------------------------------------------------------
# 2D convolution (stride 1, symmetric zero padding) via im2col


def _im2col(x, kh, kw, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, kh, kw, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[2], s[3]))
    return cols.reshape(n, c * kh * kw, ho * wo), (ho, wo)


def conv2d(x, w, b, pad=1):
    """x: (N,C,H,W), w: (Cout,C,kh,kw), b: (Cout,). Stride 1."""
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    cols, (ho, wo) = _im2col(x, kh, kw, pad)
    out = np.einsum("oc,ncl->nol", w.reshape(cout, -1), cols) + b[None, :, None]
    return out.reshape(n, cout, ho, wo), (x, cols, w, pad, ho, wo)


def conv2d_backward(dout, cache):
    x, cols, w, pad, ho, wo = cache
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    dflat = dout.reshape(n, cout, -1)
    dw = np.einsum("nol,ncl->oc", dflat, cols).reshape(w.shape)
    db = dflat.sum(axis=(0, 2))
    dcols = np.einsum("oc,nol->ncl", w.reshape(cout, -1), dflat)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# Batch norm over (N, H, W) per channel


def batch_norm2d(x, gamma, beta, running_mean, running_var, train: bool,
                 momentum=0.1, eps=1e-5):
    """Returns (out, cache). Updates running stats in place when training."""
    if train:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv, gamma, train)


def batch_norm2d_backward(dout, cache):
    xhat, inv, gamma, train = cache
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if train:
        dx = (inv[None, :, None, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    else:
        dx = dxhat * inv[None, :, None, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# 2x2 pooling (truncates odd trailing rows/cols)


def _pool_view(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, :h2 * 2, :w2 * 2].reshape(n, c, h2, 2, w2, 2)


def avg_pool2d(x):
    v = _pool_view(x)
    return v.mean(axis=(3, 5)), x.shape


def avg_pool2d_backward(dout, shape):
    n, c, h, w = shape
    dx = np.zeros(shape, dtype=dout.dtype)
    up = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * 0.25
    dx[:, :, :up.shape[2], :up.shape[3]] = up
    return dx


def max_pool2d(x):
    v = _pool_view(x)
    flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(*v.shape[:3], v.shape[4], 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def max_pool2d_backward(dout, cache):
    shape, arg = cache
    n, c, h, w = shape
    h2, w2 = h // 2, w // 2
    dflat = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(dflat, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dout.dtype)
    blocks = dflat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx[:, :, :h2 * 2, :w2 * 2] = blocks.reshape(n, c, h2 * 2, w2 * 2)
    return dx
