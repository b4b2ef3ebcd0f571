"""Forward passes and exact gradients for the full trainable core.

The patch featurizer is deterministic: each 112x112 plane is split into a
14x14 grid of 8x8 tiles, each tile reduced to 8 fixed statistics (mean,
std, min, max, 4-bin gradient-orientation histogram), which a learned
linear map lifts to token width. A per-plane learnable depth embedding is
added, centered so a single plane uses the middle table row. Externally
computed token sets can be injected wherever a TokenSet is accepted.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..preprocess import MODEL_PATCH_EDGE, TILE_GRID, TILE_PX, BinnedExpression, Patch
from .config import N_TILE_STATS, TOKENS_PER_PLANE, LossWeights, ModelConfig
from .layers import (
    acc,
    l2_normalize,
    l2_normalize_back,
    layernorm,
    layernorm_back,
    linear,
    linear_back,
    mha,
    mha_back,
    relu,
    relu_back,
    transformer_block,
    transformer_block_back,
)
from .losses import (
    da_backward,
    da_forward,
    loss_contrastive,
    loss_direct,
    loss_reconstruction,
)


class TokenOrigin(str, Enum):
    IMG2D = "IMG2D"
    IMG3D = "IMG3D"


@dataclass(frozen=True)
class TokenSet:
    tokens: np.ndarray  # (N, d_token)
    origin: TokenOrigin
    depth_count: int

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 2 or t.shape[0] != TOKENS_PER_PLANE * self.depth_count:
            raise ValueError(
                f"token count {t.shape} inconsistent with depth {self.depth_count}"
            )
        if not np.isfinite(t).all():
            raise ValueError("tokens must be finite")
        object.__setattr__(self, "tokens", t)


@dataclass(frozen=True)
class EmbeddingBundle:
    h_cont: np.ndarray  # (d_embed,), unit norm
    h_rec: np.ndarray  # (n_rec_queries, d_embed)

    def __post_init__(self):
        hc = np.asarray(self.h_cont)
        if abs(float(np.linalg.norm(hc)) - 1.0) > 1e-6:
            raise ValueError("contrastive embedding must be unit norm")


# ---------------------------------------------------------------------------
# Tile statistics (fixed, parameter-free)
# ---------------------------------------------------------------------------

def patch_stats(data):
    """Per-tile statistics for a (w, h, d) patch -> (196 * d, 8) array."""
    data = np.asarray(data, dtype=np.float64)
    w, h, d = data.shape
    if w != MODEL_PATCH_EDGE or h != MODEL_PATCH_EDGE:
        raise ValueError(f"patch must be {MODEL_PATCH_EDGE}x{MODEL_PATCH_EDGE}xd, got {data.shape}")
    tiles = (
        data.transpose(2, 0, 1)
        .reshape(d, TILE_GRID, TILE_PX, TILE_GRID, TILE_PX)
        .transpose(0, 1, 3, 2, 4)
        .reshape(d * TOKENS_PER_PLANE, TILE_PX, TILE_PX)
    )
    mean = tiles.mean(axis=(1, 2))
    std = tiles.std(axis=(1, 2))
    mn = tiles.min(axis=(1, 2))
    mx = tiles.max(axis=(1, 2))
    gx, gy = np.gradient(tiles, axis=(1, 2))
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    bins = np.clip(((ang + np.pi) / (np.pi / 2.0)).astype(np.int64), 0, 3)
    area = tiles.shape[1] * tiles.shape[2]
    # magnitude-weighted orientation masses (per pixel): their sum is the
    # tile's mean gradient energy, so texture strength stays observable
    hist = [
        np.where(bins == b, mag, 0.0).sum(axis=(1, 2)) / area for b in range(4)
    ]
    return np.stack([mean, std, mn, mx, *hist], axis=1)


def batch_patch_stats(patches):
    """Stack per-patch statistics for a uniform-depth list of patches."""
    return np.stack([patch_stats(np.asarray(p.data if isinstance(p, Patch) else p))
                     for p in patches])


# ---------------------------------------------------------------------------
# Featurizer: stats -> tokens (+ depth embeddings)
# ---------------------------------------------------------------------------

def featurize_forward(stats, depth_count, params, cfg):
    """stats (M, 196*d, 8) -> tokens (M, 196*d, d_token)."""
    stats = np.asarray(stats, dtype=params["feat.proj.w"].dtype)
    rows = cfg.depth_rows(depth_count)
    plane_of_token = np.repeat(np.asarray(rows), TOKENS_PER_PLANE)
    tokens = stats @ params["feat.proj.w"] + params["feat.proj.b"]
    tokens = tokens + params["feat.depth_emb"][plane_of_token]
    return tokens, (stats, plane_of_token)


def featurize_back(dtokens, cache, params, grads):
    stats, plane_of_token = cache
    din = stats.shape[-1]
    d_model = dtokens.shape[-1]
    dout = dtokens.reshape(-1, d_model)
    acc(grads, "feat.proj.w", stats.reshape(-1, din).T @ dout)
    acc(grads, "feat.proj.b", dout.sum(axis=0))
    demb = np.zeros_like(params["feat.depth_emb"])
    # tokens are plane-major: reduce per plane, then scatter to unique rows
    n_planes = len(plane_of_token) // TOKENS_PER_PLANE
    per_plane = dtokens.reshape(-1, n_planes, TOKENS_PER_PLANE, d_model).sum(axis=(0, 2))
    demb[plane_of_token[::TOKENS_PER_PLANE]] += per_plane
    acc(grads, "feat.depth_emb", demb)


def featurize_patch(patch, params, cfg=None):
    """Public per-patch op: Patch -> TokenSet."""
    cfg = cfg or ModelConfig()
    data = np.asarray(patch.data if isinstance(patch, Patch) else patch)
    if data.ndim != 3:
        raise ValueError("patch data must be (w, h, d)")
    d = data.shape[2]
    stats = patch_stats(data)[None]
    tokens, _ = featurize_forward(stats, d, params, cfg)
    origin = TokenOrigin.IMG2D if d == 1 else TokenOrigin.IMG3D
    return TokenSet(tokens=tokens[0], origin=origin, depth_count=d)


# ---------------------------------------------------------------------------
# Attentional poolers
# ---------------------------------------------------------------------------

def pool_forward(tokens, params, prefix, cfg):
    """tokens (M, N, d_token) -> queries (M, n_q, d_embed) via cross-attention."""
    q = params[f"{prefix}.query"]
    m = tokens.shape[0]
    qn, c_lnq = layernorm(q, params, f"{prefix}.ln_q")
    kn, c_lnkv = layernorm(tokens, params, f"{prefix}.ln_kv")
    qb = np.broadcast_to(qn, (m,) + qn.shape)
    attn, c_attn = mha(qb, kn, params, f"{prefix}.attn", cfg.pool_heads)
    h = q + attn
    out, c_out = linear(h, params, f"{prefix}.out")
    return out, (c_lnq, c_lnkv, c_attn, c_out, prefix)


def pool_back(dout, cache, params, grads):
    c_lnq, c_lnkv, c_attn, c_out, prefix = cache
    dh = linear_back(dout, c_out, params, grads)
    acc(grads, f"{prefix}.query", dh.sum(axis=0))
    dqb, dkn = mha_back(dh, c_attn, params, grads)
    dqn = dqb.sum(axis=0)
    dq = layernorm_back(dqn, c_lnq, params, grads)
    acc(grads, f"{prefix}.query", dq)
    return layernorm_back(dkn, c_lnkv, params, grads)


def pool_cont_forward(tokens, params, prefix, cfg):
    out, cache = pool_forward(tokens, params, prefix, cfg)
    raw = out[:, 0, :]
    h, c_norm = l2_normalize(raw)
    return h, (cache, c_norm, out.shape)


def pool_cont_back(dh, cache, params, grads):
    pool_cache, c_norm, shape = cache
    draw = l2_normalize_back(dh, c_norm)
    dout = np.zeros(shape, dtype=draw.dtype)
    dout[:, 0, :] = draw
    return pool_back(dout, pool_cache, params, grads)


def pool(tokens, which, params, cfg=None, path=None):
    """Public pooling op over a TokenSet.

    `which` is "CONT" (single query, unit-normalized) or "REC" (query set).
    The pooler pair is chosen by the token origin unless `path` overrides.
    """
    cfg = cfg or ModelConfig()
    if isinstance(tokens, TokenSet):
        arr = tokens.tokens[None]
        inferred = "2d" if tokens.origin == TokenOrigin.IMG2D else "3d"
    else:
        arr = np.asarray(tokens)
        arr = arr[None] if arr.ndim == 2 else arr
        inferred = "2d"
    path = path or inferred
    prefix = f"pool{path}_{'cont' if which == 'CONT' else 'rec'}"
    if which == "CONT":
        h, _ = pool_cont_forward(arr, params, prefix, cfg)
        return h[0]
    if which != "REC":
        raise ValueError(f"unknown pooler selector {which!r}")
    out, _ = pool_forward(arr, params, prefix, cfg)
    return out[0]


# ---------------------------------------------------------------------------
# Transcriptome encoder
# ---------------------------------------------------------------------------

def tx_forward(bins, gene_indices, params, cfg):
    """Binned expression (M, G) -> unit-norm embeddings (M, d_embed)."""
    bins = np.asarray(bins)
    if bins.ndim != 2 or bins.shape[1] == 0:
        raise ValueError("need a non-empty (M, G) bin matrix")
    dtype = params["tx.gene_emb"].dtype
    vals = (bins.astype(dtype) / max(cfg.n_bins - 1, 1))[..., None]  # (M, G, 1)
    h1, c_v1 = linear(vals, params, "tx.val.fc1")
    h2, mask = relu(h1)
    vh, c_v2 = linear(h2, params, "tx.val.fc2")
    gene_tokens = params["tx.gene_emb"][gene_indices] + vh
    m = bins.shape[0]
    cls = np.broadcast_to(params["tx.cls"], (m, 1, params["tx.cls"].shape[0]))
    x = np.concatenate([cls, gene_tokens], axis=1)
    block_caches = []
    for i in range(cfg.tx_layers):
        x, c = transformer_block(x, params, f"tx.block{i}", cfg.tx_heads)
        block_caches.append(c)
    xf, c_lnf = layernorm(x, params, "tx.ln_f")
    cls_out = xf[:, 0, :]
    raw, c_head = linear(cls_out, params, "tx.head")
    g, c_norm = l2_normalize(raw)
    cache = (c_v1, mask, c_v2, gene_indices, block_caches, c_lnf, c_head, c_norm, x.shape)
    return g, cache


def tx_back(dg, cache, params, grads, cfg):
    c_v1, mask, c_v2, gene_indices, block_caches, c_lnf, c_head, c_norm, shape = cache
    draw = l2_normalize_back(dg, c_norm)
    dcls_out = linear_back(draw, c_head, params, grads)
    dxf = np.zeros(shape, dtype=dcls_out.dtype)
    dxf[:, 0, :] = dcls_out
    dx = layernorm_back(dxf, c_lnf, params, grads)
    for i in range(cfg.tx_layers - 1, -1, -1):
        dx = transformer_block_back(dx, block_caches[i], params, grads)
    acc(grads, "tx.cls", dx[:, 0, :].sum(axis=0))
    dgene = dx[:, 1:, :]
    demb = np.zeros_like(params["tx.gene_emb"])
    np.add.at(demb, gene_indices, dgene.sum(axis=0))
    acc(grads, "tx.gene_emb", demb)
    dvh = dgene
    dh2 = linear_back(dvh, c_v2, params, grads)
    dh1 = relu_back(dh2, mask)
    linear_back(dh1, c_v1, params, grads)


def encode_transcriptome(binned, params, cfg=None, local_indices=None):
    """Public op: BinnedExpression (or bin matrix) -> embeddings.

    Returns (M, d_embed) for a matrix input, (d_embed,) for a single spot.
    """
    cfg = cfg or ModelConfig()
    if isinstance(binned, BinnedExpression):
        bins = binned.bins
        idx = np.arange(bins.shape[1]) if local_indices is None else local_indices
    else:
        bins = np.asarray(binned)
        idx = local_indices
    single = bins.ndim == 1
    if single:
        bins = bins[None]
    if bins.shape[1] == 0:
        raise ValueError("empty gene set")
    if idx is None:
        idx = np.arange(bins.shape[1])
    g, _ = tx_forward(bins, np.asarray(idx), params, cfg)
    return g[0] if single else g


# ---------------------------------------------------------------------------
# Expression predictor
# ---------------------------------------------------------------------------

def pred_forward(h_rec, params, cfg):
    """Query embeddings (M, n_q, d_embed) -> (yhat (M, P), domain emb (M, d_embed))."""
    x, c_block = transformer_block(h_rec, params, "pred.block0", cfg.pred_heads)
    xf, c_lnf = layernorm(x, params, "pred.ln_f")
    emb = xf.mean(axis=1)
    yhat, c_head = linear(emb, params, "pred.head")
    return yhat, emb, (c_block, c_lnf, c_head, xf.shape)


def pred_back(dyhat, cache, params, grads):
    c_block, c_lnf, c_head, shape = cache
    demb = linear_back(dyhat, c_head, params, grads)
    dxf = np.broadcast_to(demb[:, None, :] / shape[1], shape).astype(demb.dtype)
    dx = layernorm_back(dxf, c_lnf, params, grads)
    return transformer_block_back(dx, c_block, params, grads)


def predict_expression(h_rec, params, cfg=None):
    """Public op: (n_q, d_embed) or (M, n_q, d_embed) -> expression vector(s)."""
    cfg = cfg or ModelConfig()
    arr = np.asarray(h_rec)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    yhat, _, _ = pred_forward(arr, params, cfg)
    return yhat[0] if single else yhat


def domain_embedding(h_rec, params, cfg=None):
    """Predictor intermediate (post-transformer, pre-head, token mean)."""
    cfg = cfg or ModelConfig()
    arr = np.asarray(h_rec)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    _, emb, _ = pred_forward(arr, params, cfg)
    return emb[0] if single else emb


# ---------------------------------------------------------------------------
# Staged batches and the full-model gradient
# ---------------------------------------------------------------------------

@dataclass
class StageBatch:
    """One training batch; unused fields stay None depending on stage."""

    bins: np.ndarray  # (M, G)
    gene_indices: np.ndarray  # (G,)
    y: np.ndarray  # (M, P)
    stats2d: np.ndarray | None = None  # (M, 196, 8)
    stats3d: np.ndarray | None = None  # (M, 196*d, 8)
    depth3d: int = 21
    batch_ids: np.ndarray | None = None

    @property
    def size(self):
        return self.bins.shape[0]


def _forward_2d(batch, params, cfg):
    tokens, c_feat = featurize_forward(batch.stats2d, 1, params, cfg)
    h2c, c_hc = pool_cont_forward(tokens, params, "pool2d_cont", cfg)
    h2r, c_hr = pool_forward(tokens, params, "pool2d_rec", cfg)
    return h2c, h2r, (c_feat, c_hc, c_hr)


def _forward_3d(batch, params, cfg):
    tokens, c_feat = featurize_forward(batch.stats3d, batch.depth3d, params, cfg)
    h3c, c_hc = pool_cont_forward(tokens, params, "pool3d_cont", cfg)
    h3r, c_hr = pool_forward(tokens, params, "pool3d_rec", cfg)
    return h3c, h3r, (c_feat, c_hc, c_hr)


def _backward_image_path(dh_cont, dh_rec, caches, params, grads):
    c_feat, c_hc, c_hr = caches
    dtokens = pool_cont_back(dh_cont, c_hc, params, grads)
    dtokens = dtokens + pool_back(dh_rec, c_hr, params, grads)
    featurize_back(dtokens, c_feat, params, grads)


def gradient(params, batch, stage, w=None, cfg=None):
    """Loss and exact gradients of one stage's total objective.

    Gradients are reported only for the stage's trainable tensors. The
    batch-ID head follows the reversal contract: its own parameters get the
    plain classification gradient while the transcriptome encoder receives
    the negated one.
    """
    from .params import trainable_names

    w = w or LossWeights()
    cfg = cfg or ModelConfig()
    grads = {}
    parts = {}

    if stage == "I":
        h2c, h2r, img_caches = _forward_2d(batch, params, cfg)
        g, c_tx = tx_forward(batch.bins, batch.gene_indices, params, cfg)
        yhat, _, c_pred = pred_forward(h2r, params, cfg)
        l_cont, dh2c, dg = loss_contrastive(h2c, g, w, with_grad=True)
        l_rec, dyhat = loss_reconstruction(batch.y, yhat, with_grad=True)
        l_da, c_da = da_forward(g, batch.batch_ids, params)
        parts = {"cont": l_cont, "rec": l_rec, "da": l_da}
        loss = w.lambda_cont * l_cont + w.lambda_rec * l_rec + w.lambda_da * l_da
        dh2r = pred_back(w.lambda_rec * dyhat, c_pred, params, grads)
        _backward_image_path(w.lambda_cont * dh2c, dh2r, img_caches, params, grads)
        dg_da = da_backward(c_da, params, grads, scale=w.lambda_da)
        tx_back(w.lambda_cont * dg - dg_da, c_tx, params, grads, cfg)
        depth_mode = "D1"
    elif stage == "II":
        h3c, h3r, img3_caches = _forward_3d(batch, params, cfg)
        h2c, h2r, img2_caches = _forward_2d(batch, params, cfg)
        g, _ = tx_forward(batch.bins, batch.gene_indices, params, cfg)
        yhat, _, c_pred = pred_forward(h3r, params, cfg)
        l_a, dh3c_a, _ = loss_contrastive(h3c, g, w, with_grad=True)
        l_b, dh3c_b, dh2c = loss_contrastive(h3c, h2c, w, with_grad=True)
        l_dir, dh2r_dir, dh3r_dir = loss_direct(h2r, h3r, with_grad=True)
        l_rec, dyhat = loss_reconstruction(batch.y, yhat, with_grad=True)
        parts = {"cont": l_a + l_b, "dir": l_dir, "rec": l_rec}
        loss = (
            w.lambda_cont * parts["cont"]
            + w.lambda_dir * l_dir
            + w.lambda_rec * l_rec
        )
        dh3r = pred_back(w.lambda_rec * dyhat, c_pred, params, grads)
        dh3r = dh3r + w.lambda_dir * dh3r_dir
        _backward_image_path(
            w.lambda_cont * (dh3c_a + dh3c_b), dh3r, img3_caches, params, grads
        )
        # the tile projection and depth table are shared with the planar
        # path, so their total-loss gradient includes the planar branch even
        # though the planar poolers themselves stay frozen here
        _backward_image_path(
            w.lambda_cont * dh2c, w.lambda_dir * dh2r_dir, img2_caches, params, grads
        )
        depth_mode = "D3" if batch.depth3d == 3 else "D21"
    elif stage == "III":
        h3c, h3r, img3_caches = _forward_3d(batch, params, cfg)
        h2c, h2r, img2_caches = _forward_2d(batch, params, cfg)
        g, c_tx = tx_forward(batch.bins, batch.gene_indices, params, cfg)
        yhat, _, c_pred = pred_forward(h3r, params, cfg)
        l_2d, dh2c_a, dg_a = loss_contrastive(h2c, g, w, with_grad=True)
        l_3a, dh3c_a, dg_b = loss_contrastive(h3c, g, w, with_grad=True)
        l_3b, dh3c_b, dh2c_b = loss_contrastive(h3c, h2c, w, with_grad=True)
        l_dir, dh2r_dir, dh3r_dir = loss_direct(h2r, h3r, with_grad=True)
        l_rec, dyhat = loss_reconstruction(batch.y, yhat, with_grad=True)
        parts = {"cont_2d": l_2d, "cont_3d": l_3a + l_3b, "dir": l_dir, "rec": l_rec}
        loss = (
            w.lambda_cont * (l_2d + l_3a + l_3b)
            + w.lambda_dir * l_dir
            + w.lambda_rec * l_rec
        )
        dh3r = pred_back(w.lambda_rec * dyhat, c_pred, params, grads)
        dh3r = dh3r + w.lambda_dir * dh3r_dir
        _backward_image_path(
            w.lambda_cont * (dh3c_a + dh3c_b), dh3r, img3_caches, params, grads
        )
        _backward_image_path(
            w.lambda_cont * (dh2c_a + dh2c_b),
            w.lambda_dir * dh2r_dir,
            img2_caches,
            params,
            grads,
        )
        tx_back(w.lambda_cont * (dg_a + dg_b), c_tx, params, grads, cfg)
        depth_mode = "D3" if batch.depth3d == 3 else "D21"
    else:
        raise ValueError(f"unknown stage {stage!r}")

    keep = set(trainable_names(params, stage, depth_mode))
    grads = {k: v for k, v in grads.items() if k in keep}
    for name, gval in grads.items():
        if not np.isfinite(gval).all():
            raise FloatingPointError(f"non-finite gradient in tensor {name}")
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return float(loss), grads, parts
