"""Differentiable primitives: each forward returns (out, cache) and the
matching backward consumes (dout, cache), returning input gradients and
accumulating parameter gradients into a dict keyed by tensor name.

Everything is plain numpy; gradients are exact (verified against central
finite differences in the test suite).
"""

from __future__ import annotations

import numpy as np


def acc(grads, name, value):
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


# ---------------------------------------------------------------------------
# Linear / layernorm / relu
# ---------------------------------------------------------------------------

def linear(x, params, prefix):
    w, b = params[prefix + ".w"], params[prefix + ".b"]
    return x @ w + b, (x, prefix)


def linear_back(dout, cache, params, grads):
    x, prefix = cache
    w = params[prefix + ".w"]
    din = w.shape[0]
    acc(grads, prefix + ".w", x.reshape(-1, din).T @ dout.reshape(-1, dout.shape[-1]))
    acc(grads, prefix + ".b", dout.reshape(-1, dout.shape[-1]).sum(axis=0))
    return dout @ w.T


def layernorm(x, params, prefix, eps=1e-5):
    g, b = params[prefix + ".g"], params[prefix + ".b"]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, prefix)


def layernorm_back(dout, cache, params, grads):
    xhat, inv, prefix = cache
    g = params[prefix + ".g"]
    acc(grads, prefix + ".g", (dout * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
    acc(grads, prefix + ".b", dout.reshape(-1, xhat.shape[-1]).sum(axis=0))
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_back(dout, mask):
    return dout * mask


def l2_normalize(x, eps=1e-12):
    """Row-wise unit normalization over the last axis."""
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    y = x / norm
    return y, (y, norm)


def l2_normalize_back(dout, cache):
    y, norm = cache
    return (dout - y * (dout * y).sum(axis=-1, keepdims=True)) / norm


def softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_back(dout, p, axis=-1):
    return p * (dout - (dout * p).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Multi-head attention
# ---------------------------------------------------------------------------

def _split_heads(x, n_heads):
    m, t, d = x.shape
    return x.reshape(m, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    m, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(m, t, h * dh)


def mha(x_q, x_kv, params, prefix, n_heads):
    """Cross- (or self-) attention: queries over keys/values, per head."""
    q, cq = linear(x_q, params, prefix + ".q")
    k, ck = linear(x_kv, params, prefix + ".k")
    v, cv = linear(x_kv, params, prefix + ".v")
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    p = softmax(scores)
    ctx = p @ vh
    merged = _merge_heads(ctx)
    out, co = linear(merged, params, prefix + ".o")
    return out, (cq, ck, cv, co, qh, kh, vh, p, scale, n_heads)


def mha_back(dout, cache, params, grads):
    cq, ck, cv, co, qh, kh, vh, p, scale, n_heads = cache
    dmerged = linear_back(dout, co, params, grads)
    dctx = _split_heads(dmerged, n_heads)
    dp = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = p.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_back(dp, p) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    dx_q = linear_back(dq, cq, params, grads)
    dx_kv = linear_back(dk, ck, params, grads) + linear_back(dv, cv, params, grads)
    return dx_q, dx_kv


# ---------------------------------------------------------------------------
# Pre-LN transformer block: x + attn(LN(x)), then x + mlp(LN(x))
# ---------------------------------------------------------------------------

def transformer_block(x, params, prefix, n_heads):
    a_in, c_ln1 = layernorm(x, params, prefix + ".ln1")
    attn, c_attn = mha(a_in, a_in, params, prefix + ".attn", n_heads)
    x1 = x + attn
    m_in, c_ln2 = layernorm(x1, params, prefix + ".ln2")
    h1, c_l1 = linear(m_in, params, prefix + ".mlp.fc1")
    h2, c_relu = relu(h1)
    m_out, c_l2 = linear(h2, params, prefix + ".mlp.fc2")
    out = x1 + m_out
    return out, (c_ln1, c_attn, c_ln2, c_l1, c_relu, c_l2)


def transformer_block_back(dout, cache, params, grads):
    c_ln1, c_attn, c_ln2, c_l1, c_relu, c_l2 = cache
    dh2 = linear_back(dout, c_l2, params, grads)
    dh1 = relu_back(dh2, c_relu)
    dm_in = linear_back(dh1, c_l1, params, grads)
    dx1 = dout + layernorm_back(dm_in, c_ln2, params, grads)
    dq, dkv = mha_back(dx1, c_attn, params, grads)
    dx = dx1 + layernorm_back(dq + dkv, c_ln1, params, grads)
    return dx


# ---------------------------------------------------------------------------
# Cross-entropy over integer targets
# ---------------------------------------------------------------------------

def cross_entropy_mean(logits, targets):
    """Mean -log softmax[target]; returns (loss, dlogits)."""
    m = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(m), targets]))
    p = softmax(logits, axis=1)
    p[np.arange(m), targets] -= 1.0
    return loss, p / m
