"""Training objectives: cross-modal contrastive alignment, expression
reconstruction, direct query alignment, and batch-adversarial terms.
"""

from __future__ import annotations

import numpy as np

from .layers import acc, cross_entropy_mean, linear, linear_back, relu, relu_back, softmax


def _check_unit_rows(x, tol=1e-4, label="embedding"):
    norms = np.sqrt((np.asarray(x, dtype=np.float64) ** 2).sum(axis=-1))
    if np.abs(norms - 1.0).max() > tol:
        raise ValueError(f"{label} rows must be unit-norm within {tol}")


def loss_contrastive(h, g, w, with_grad=False):
    """Symmetric InfoNCE over matched rows of two unit-norm embedding sets.

    Logits are scaled inner products; the scale follows the configured
    temperature convention. Returns the scalar loss, or (loss, dh, dg).
    """
    h = np.asarray(h)
    g = np.asarray(g)
    if h.shape != g.shape or h.ndim != 2:
        raise ValueError("embedding sets must share an (M, E) shape")
    _check_unit_rows(h, label="image embedding")
    _check_unit_rows(g, label="paired embedding")
    m = h.shape[0]
    s = w.logit_scale
    logits = s * (h @ g.T)
    targets = np.arange(m)
    l_fwd, dl_fwd = cross_entropy_mean(logits, targets)
    l_bwd, dl_bwd = cross_entropy_mean(logits.T, targets)
    loss = 0.5 * (l_fwd + l_bwd)
    if not with_grad:
        return loss
    dlogits = 0.5 * (dl_fwd + dl_bwd.T)
    dh = s * (dlogits @ g)
    dg = s * (dlogits.T @ h)
    return loss, dh, dg


def loss_dual_contrastive(h3, g, h2, w, with_grad=False):
    """Aligns the volumetric path to both the expression and planar embeddings."""
    if not with_grad:
        return loss_contrastive(h3, g, w) + loss_contrastive(h3, h2, w)
    l_a, dh3_a, dg = loss_contrastive(h3, g, w, with_grad=True)
    l_b, dh3_b, dh2 = loss_contrastive(h3, h2, w, with_grad=True)
    return l_a + l_b, dh3_a + dh3_b, dg, dh2


def loss_reconstruction(y, yhat, with_grad=False):
    """Mean over spots of the squared L2 error summed over genes."""
    y = np.asarray(y)
    yhat = np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    m = y.shape[0]
    diff = yhat - y
    loss = float((diff * diff).sum() / m)
    if not with_grad:
        return loss
    return loss, 2.0 * diff / m


def loss_direct(h2_rec, h3_rec, with_grad=False):
    """Mean over spots of the total squared distance between query sets."""
    a = np.asarray(h2_rec)
    b = np.asarray(h3_rec)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = a.shape[0]
    diff = b - a
    loss = float((diff * diff).sum() / m)
    if not with_grad:
        return loss
    d3 = 2.0 * diff / m
    return loss, -d3, d3


def da_forward(g, batch_ids, params):
    """Batch-source classification loss on transcriptome embeddings.

    Returns (loss, cache); the gradient-reversal contract is applied by the
    caller: head parameters receive the plain gradient, the upstream
    embedding receives its negation.
    """
    batch_ids = np.asarray(batch_ids)
    n_classes = params["da.fc2.b"].shape[0]
    if batch_ids.min(initial=0) < 0 or batch_ids.max(initial=0) >= n_classes:
        raise ValueError("batch id outside registered source count")
    h1, c1 = linear(g, params, "da.fc1")
    h2, mask = relu(h1)
    logits, c2 = linear(h2, params, "da.fc2")
    loss, dlogits = cross_entropy_mean(logits, batch_ids)
    return loss, (c1, mask, c2, dlogits)


def da_backward(cache, params, grads, scale=1.0):
    """Backprop the head; returns the (un-reversed) gradient w.r.t. g."""
    c1, mask, c2, dlogits = cache
    dh2 = linear_back(dlogits * scale, c2, params, grads)
    dh1 = relu_back(dh2, mask)
    return linear_back(dh1, c1, params, grads)


def da_predict(g, params):
    h1, _ = linear(g, params, "da.fc1")
    h2, _ = relu(h1)
    logits, _ = linear(h2, params, "da.fc2")
    return softmax(logits, axis=1)


def total_loss(stage, parts, w):
    """Combine per-term losses with stage-specific weights."""
    def need(key):
        if key not in parts:
            raise ValueError(f"stage {stage} requires loss part {key!r}")
        return parts[key]

    if stage == "I":
        return (
            w.lambda_cont * need("cont")
            + w.lambda_rec * need("rec")
            + w.lambda_da * need("da")
        )
    if stage == "II":
        return (
            w.lambda_cont * need("cont")
            + w.lambda_dir * need("dir")
            + w.lambda_rec * need("rec")
        )
    if stage == "III":
        return (
            w.lambda_cont * (need("cont_2d") + need("cont_3d"))
            + w.lambda_dir * need("dir")
            + w.lambda_rec * need("rec")
        )
    raise ValueError(f"unknown stage {stage!r}")
