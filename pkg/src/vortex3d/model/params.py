"""Parameter initialization, naming, and per-stage trainable sets."""

from __future__ import annotations

import numpy as np

from .config import N_TILE_STATS, ModelConfig

POOLER_PREFIXES = ("pool2d_cont", "pool2d_rec", "pool3d_cont", "pool3d_rec")


def _init_pooler(p, rng, prefix, n_queries, cfg, std):
    d, e = cfg.d_token, cfg.d_embed
    p[f"{prefix}.query"] = rng.normal(0.0, std, (n_queries, d))
    for ln in ("ln_q", "ln_kv"):
        p[f"{prefix}.{ln}.g"] = np.ones(d)
        p[f"{prefix}.{ln}.b"] = np.zeros(d)
    for proj in ("q", "k", "v", "o"):
        p[f"{prefix}.attn.{proj}.w"] = rng.normal(0.0, std, (d, d))
        p[f"{prefix}.attn.{proj}.b"] = np.zeros(d)
    p[f"{prefix}.out.w"] = rng.normal(0.0, std, (d, e))
    p[f"{prefix}.out.b"] = np.zeros(e)


def _init_block(p, rng, prefix, width, mlp_ratio, std):
    p[f"{prefix}.ln1.g"] = np.ones(width)
    p[f"{prefix}.ln1.b"] = np.zeros(width)
    for proj in ("q", "k", "v", "o"):
        p[f"{prefix}.attn.{proj}.w"] = rng.normal(0.0, std, (width, width))
        p[f"{prefix}.attn.{proj}.b"] = np.zeros(width)
    p[f"{prefix}.ln2.g"] = np.ones(width)
    p[f"{prefix}.ln2.b"] = np.zeros(width)
    hidden = width * mlp_ratio
    p[f"{prefix}.mlp.fc1.w"] = rng.normal(0.0, std, (width, hidden))
    p[f"{prefix}.mlp.fc1.b"] = np.zeros(hidden)
    p[f"{prefix}.mlp.fc2.w"] = rng.normal(0.0, std, (hidden, width))
    p[f"{prefix}.mlp.fc2.b"] = np.zeros(width)


def init_params(cfg, panel_size, n_input_genes, n_batches, seed=0, dtype=np.float32,
                init_std=0.02):
    """Fresh parameter dictionary; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    d, e = cfg.d_token, cfg.d_embed
    p = {}
    p["feat.proj.w"] = rng.normal(0.0, 0.5, (N_TILE_STATS, d))
    p["feat.proj.b"] = np.zeros(d)
    p["feat.depth_emb"] = rng.normal(0.0, init_std, (cfg.n_depths, d))
    _init_pooler(p, rng, "pool2d_cont", 1, cfg, init_std)
    _init_pooler(p, rng, "pool2d_rec", cfg.n_rec_queries, cfg, init_std)
    _init_pooler(p, rng, "pool3d_cont", 1, cfg, init_std)
    _init_pooler(p, rng, "pool3d_rec", cfg.n_rec_queries, cfg, init_std)
    p["tx.gene_emb"] = rng.normal(0.0, init_std, (n_input_genes, e))
    p["tx.cls"] = rng.normal(0.0, init_std, (e,))
    p["tx.val.fc1.w"] = rng.normal(0.0, 0.5, (1, e))
    p["tx.val.fc1.b"] = np.zeros(e)
    p["tx.val.fc2.w"] = rng.normal(0.0, init_std, (e, e))
    p["tx.val.fc2.b"] = np.zeros(e)
    for i in range(cfg.tx_layers):
        _init_block(p, rng, f"tx.block{i}", e, cfg.tx_mlp_ratio, init_std)
    p["tx.ln_f.g"] = np.ones(e)
    p["tx.ln_f.b"] = np.zeros(e)
    p["tx.head.w"] = rng.normal(0.0, init_std, (e, e))
    p["tx.head.b"] = np.zeros(e)
    _init_block(p, rng, "pred.block0", e, cfg.pred_mlp_ratio, init_std)
    p["pred.ln_f.g"] = np.ones(e)
    p["pred.ln_f.b"] = np.zeros(e)
    p["pred.head.w"] = rng.normal(0.0, init_std, (e, panel_size))
    p["pred.head.b"] = np.zeros(panel_size)
    p["da.fc1.w"] = rng.normal(0.0, init_std, (e, cfg.da_hidden))
    p["da.fc1.b"] = np.zeros(cfg.da_hidden)
    p["da.fc2.w"] = rng.normal(0.0, init_std, (cfg.da_hidden, n_batches))
    p["da.fc2.b"] = np.zeros(n_batches)
    return {k: np.asarray(v, dtype=dtype) for k, v in p.items()}


def reinit_3d_poolers(params, cfg, seed, init_std=0.02):
    """Fresh 3D-path poolers (used when 3D alignment training starts)."""
    rng = np.random.default_rng(seed)
    fresh = {}
    _init_pooler(fresh, rng, "pool3d_cont", 1, cfg, init_std)
    _init_pooler(fresh, rng, "pool3d_rec", cfg.n_rec_queries, cfg, init_std)
    dtype = next(iter(params.values())).dtype
    out = dict(params)
    for k, v in fresh.items():
        out[k] = np.asarray(v, dtype=dtype)
    return out


def trainable_names(params, stage, depth_mode="D21"):
    """Tensor names trainable in a given stage.

    Stage I adapts the 2D path end to end (tile projection, 2D poolers,
    transcriptome encoder, predictor, batch-ID head). Stage II trains only
    the depth-aggregation module (3D poolers + depth embeddings) and the
    predictor; the tile projection joins only in serial-section (D3) mode.
    Stage III unions the previous stages' sets, minus the batch-ID head.
    """
    if stage == "I":
        prefixes = ("feat.proj.", "pool2d_cont.", "pool2d_rec.", "tx.", "pred.", "da.")
    elif stage == "II":
        prefixes = ("pool3d_cont.", "pool3d_rec.", "feat.depth_emb", "pred.")
        if depth_mode == "D3":
            prefixes = prefixes + ("feat.proj.",)
    elif stage == "III":
        prefixes = (
            "feat.proj.", "pool2d_cont.", "pool2d_rec.", "tx.",
            "pool3d_cont.", "pool3d_rec.", "feat.depth_emb", "pred.",
        )
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return [n for n in params if n.startswith(prefixes)]


def decayable(name, params):
    """Weight decay applies to matrices only; biases and norm gains are exempt."""
    return params[name].ndim >= 2
