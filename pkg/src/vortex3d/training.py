"""Stage orchestration: schedules, optimizer, and the three training stages.

Stage I fits the planar path (tile projection, 2D poolers, transcriptome
encoder, predictor, batch-ID head) on section/expression pairs. Stage II
freezes that path and trains the depth-aggregation module (fresh 3D
poolers + depth embeddings) and predictor against volumetric patches.
Stage III unfreezes the union on volume-of-interest pairs.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import (
    LossWeights,
    ModelConfig,
    StageBatch,
    featurize_forward,
    gradient,
    init_params,
    pool_cont_forward,
    pool_forward,
    pred_forward,
    reinit_3d_poolers,
    trainable_names,
)
from .model.params import decayable
from .store import Checkpoint, config_digest


@dataclass(frozen=True)
class StageConfig:
    stage: str  # "I" | "II" | "III"
    batch_size: int
    epochs: int
    warmup_epochs: int = 0
    peak_lr: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    depth_mode: str = "D21"  # D1 | D3 | D21
    loss_weights: LossWeights = field(default_factory=LossWeights)
    trainable_set: tuple | None = None  # optional prefix override

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.depth_mode not in ("D1", "D3", "D21"):
            raise ValueError(f"bad depth_mode {self.depth_mode!r}")

    @property
    def depth_count(self):
        return {"D1": 1, "D3": 3, "D21": 21}[self.depth_mode]


def stage_defaults(stage, **overrides):
    """Published per-stage hyperparameters; override freely for desk runs."""
    base = {
        "I": dict(stage="I", batch_size=512, epochs=25, warmup_epochs=5),
        "II": dict(stage="II", batch_size=128, epochs=15, warmup_epochs=0),
        "III": dict(stage="III", batch_size=16, epochs=10, warmup_epochs=0),
    }[stage]
    base.update(overrides)
    return StageConfig(**base)


def lr_at(step, total_steps, cfg):
    """Linear warmup to the peak, then cosine decay reaching 0 at the last step."""
    if not (0 <= step < total_steps):
        raise ValueError("step out of range")
    warmup_steps = 0
    if cfg.epochs > 0 and cfg.warmup_epochs > 0:
        warmup_steps = int(round(total_steps * cfg.warmup_epochs / cfg.epochs))
    if warmup_steps > 0 and step < warmup_steps:
        return cfg.peak_lr * step / warmup_steps
    denom = max(total_steps - 1 - warmup_steps, 1)
    t = min((step - warmup_steps) / denom, 1.0)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# AdamW with decoupled weight decay
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, params, names):
        return cls(
            m={n: np.zeros_like(params[n]) for n in names},
            v={n: np.zeros_like(params[n]) for n in names},
        )


def optimizer_step(params, grads, lr, cfg, state, trainable=None, eps=1e-8):
    """One AdamW update in place; weight decay only on decayable tensors."""
    b1, b2 = cfg.betas
    names = trainable if trainable is not None else list(state.m)
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in names:
        g = grads.get(name)
        if g is not None:
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {name}")
            m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
            v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
            params[name] = params[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if cfg.weight_decay > 0 and decayable(name, params):
            params[name] = params[name] * (1.0 - lr * cfg.weight_decay)
    return params


# ---------------------------------------------------------------------------
# Training data containers
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    """One morphology/expression pair, with precomputed tile statistics."""

    spot_id: str
    section_id: str
    bins: np.ndarray  # (G,)
    y: np.ndarray  # (P,)
    batch_id: int = 0
    stats2d: np.ndarray | None = None  # (196, 8)
    stats3d: np.ndarray | None = None  # (196 * d, 8)
    depth3d: int = 21


@dataclass
class TrainReport:
    stage: str
    epoch_losses: list = field(default_factory=list)  # per-epoch mean part dict
    lr_trace: list = field(default_factory=list)
    final_digest: str = ""
    loss_weights: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(
            {
                "stage": self.stage,
                "epoch_losses": self.epoch_losses,
                "lr_trace": self.lr_trace,
                "final_digest": self.final_digest,
                "loss_weights": self.loss_weights,
            },
            indent=1,
        )


def _collate(samples, gene_indices, stage, depth_count, y_norm=None):
    bins = np.stack([s.bins for s in samples])
    y = np.stack([s.y for s in samples])
    if y_norm is not None:
        mu, sigma = y_norm
        y = (y - mu) / sigma
    batch = StageBatch(
        bins=bins,
        gene_indices=np.asarray(gene_indices),
        y=y,
        depth3d=depth_count,
    )
    if stage in ("I", "II", "III"):
        batch.stats2d = np.stack([s.stats2d for s in samples])
    if stage in ("II", "III"):
        batch.stats3d = np.stack([s.stats3d for s in samples])
    if stage == "I":
        batch.batch_ids = np.asarray([s.batch_id for s in samples])
    return batch


def target_norm_from_params(params):
    """Per-gene target standardization carried in the checkpoint, if any."""
    if "norm.y_mean" in params and "norm.y_std" in params:
        return params["norm.y_mean"], params["norm.y_std"]
    return None


def _run_stage(samples, gene_indices, params, cfg, model_cfg):
    if not samples:
        raise ValueError(f"stage {cfg.stage}: empty training set")
    for s in samples:
        if cfg.stage in ("II", "III") and s.stats3d is None:
            raise ValueError("sample lacks volumetric statistics for this stage")
        if cfg.stage in ("II", "III") and s.depth3d != cfg.depth_count:
            raise ValueError(
                f"sample depth {s.depth3d} does not match stage depth_mode "
                f"{cfg.depth_mode}"
            )
    names = (
        [n for n in params if n.startswith(tuple(cfg.trainable_set))]
        if cfg.trainable_set
        else trainable_names(params, cfg.stage, cfg.depth_mode)
    )
    state = AdamWState.fresh(params, names)
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(
        stage=cfg.stage,
        loss_weights={
            "lambda_cont": cfg.loss_weights.lambda_cont,
            "lambda_rec": cfg.loss_weights.lambda_rec,
            "lambda_da": cfg.loss_weights.lambda_da,
            "lambda_dir": cfg.loss_weights.lambda_dir,
            "tau": cfg.loss_weights.tau,
            "tau_convention": cfg.loss_weights.tau_convention,
        },
    )
    y_norm = target_norm_from_params(params)
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sums, total_sum = {}, 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = _collate([samples[i] for i in idx], gene_indices,
                             cfg.stage, cfg.depth_count, y_norm)
            lr = lr_at(step, total_steps, cfg)
            loss, grads, parts = gradient(params, batch, cfg.stage,
                                          cfg.loss_weights, model_cfg)
            optimizer_step(params, grads, lr, cfg, state, names)
            report.lr_trace.append(lr)
            total_sum += loss
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            step += 1
        entry = {k: v / steps_per_epoch for k, v in sums.items()}
        entry["total"] = total_sum / steps_per_epoch
        entry["epoch"] = epoch
        report.epoch_losses.append(entry)
    return params, state, report


def _pack_checkpoint(params, state, stage, digest_payload):
    tensors = dict(params)
    for n, arr in state.m.items():
        tensors[f"opt.m.{n}"] = arr
    for n, arr in state.v.items():
        tensors[f"opt.v.{n}"] = arr
    tensors["opt.t"] = np.asarray([state.t], dtype=np.int64)
    return Checkpoint(
        tensors=tensors,
        manifest={"stage": stage, "config_digest": config_digest(digest_payload)},
    )


def unpack_checkpoint(ckpt):
    """Writable model parameters (optimizer slots stripped)."""
    return {
        k: np.array(v) for k, v in ckpt.tensors.items() if not k.startswith("opt.")
    }


def _digest_payload(cfg, model_cfg, shapes):
    return {
        "stage_cfg": {
            "stage": cfg.stage, "batch_size": cfg.batch_size, "epochs": cfg.epochs,
            "warmup_epochs": cfg.warmup_epochs, "peak_lr": cfg.peak_lr,
            "weight_decay": cfg.weight_decay, "betas": list(cfg.betas),
            "seed": cfg.seed, "depth_mode": cfg.depth_mode,
        },
        "model_cfg": vars(model_cfg) | {},
        "shapes": shapes,
    }


def train_stage1(samples, cfg, model_cfg=None, n_batches=None, gene_indices=None,
                 init_seed=None, init_std=0.02, standardize_targets=True,
                 whiten_featurizer=True):
    """Planar pretraining over all non-VOI pairs; fresh parameters.

    With `standardize_targets` the reconstruction objective is computed on
    per-gene z-scored expression; the scaling travels in the checkpoint
    (norm.* tensors) and predictions are mapped back to original units.
    """
    model_cfg = model_cfg or ModelConfig()
    if cfg.stage != "I":
        raise ValueError("config stage must be I")
    if not samples:
        raise ValueError("stage I: empty training set")
    panel_size = samples[0].y.shape[0]
    n_genes = samples[0].bins.shape[0]
    if gene_indices is None:
        gene_indices = np.arange(n_genes)
    if n_batches is None:
        n_batches = int(max(s.batch_id for s in samples)) + 1
    params = init_params(
        model_cfg, panel_size, n_genes, n_batches,
        seed=cfg.seed if init_seed is None else init_seed, init_std=init_std,
    )
    if standardize_targets:
        ys = np.stack([s.y for s in samples]).astype(np.float64)
        mu = ys.mean(axis=0)
        sigma = np.maximum(ys.std(axis=0), 1e-6)
        dtype = params["pred.head.b"].dtype
        params["norm.y_mean"] = mu.astype(dtype)
        params["norm.y_std"] = sigma.astype(dtype)
    if whiten_featurizer:
        # fold a per-statistic standardization (over training tiles) into the
        # learned projection's initialization, so sample-to-sample input
        # variation enters the network at O(1) scale; the projection stays a
        # plain trainable affine map
        tiles = np.concatenate([np.asarray(s.stats2d, dtype=np.float64)
                                for s in samples])
        s_mu = tiles.mean(axis=0)
        s_sigma = np.maximum(tiles.std(axis=0), 1e-4)
        dtype = params["feat.proj.w"].dtype
        w_scaled = (params["feat.proj.w"].astype(np.float64)
                    / s_sigma[:, None]).astype(dtype)
        params["feat.proj.w"] = w_scaled
        params["feat.proj.b"] = (params["feat.proj.b"].astype(np.float64)
                                 - s_mu @ w_scaled.astype(np.float64)).astype(dtype)
    params, state, report = _run_stage(samples, gene_indices, params, cfg, model_cfg)
    ckpt = _pack_checkpoint(params, state, "I",
                            _digest_payload(cfg, model_cfg, (panel_size, n_genes)))
    report.final_digest = ckpt.digest()
    return ckpt, report


def train_stage2(samples, ckpt, cfg, model_cfg=None, gene_indices=None):
    """Volumetric alignment training from a stage-I checkpoint."""
    model_cfg = model_cfg or ModelConfig()
    if cfg.stage != "II":
        raise ValueError("config stage must be II")
    params = unpack_checkpoint(ckpt)
    params = reinit_3d_poolers(params, model_cfg, seed=cfg.seed)
    if gene_indices is None:
        gene_indices = np.arange(samples[0].bins.shape[0]) if samples else np.arange(0)
    params, state, report = _run_stage(samples, gene_indices, params, cfg, model_cfg)
    out = _pack_checkpoint(params, state, "II",
                           _digest_payload(cfg, model_cfg, ckpt.manifest.get("stage")))
    report.final_digest = out.digest()
    return out, report


def train_stage3(samples, ckpt, cfg, model_cfg=None, gene_indices=None,
                 eval_section_ids=(), eval_spot_keys=None):
    """VOI fine-tuning; refuses any overlap with the held-out evaluation set."""
    model_cfg = model_cfg or ModelConfig()
    if cfg.stage != "III":
        raise ValueError("config stage must be III")
    eval_sections = set(eval_section_ids)
    eval_keys = set(eval_spot_keys or ())
    for s in samples:
        if s.section_id in eval_sections or (s.section_id, s.spot_id) in eval_keys:
            raise ValueError(
                f"leakage: fine-tuning sample {s.spot_id!r} belongs to held-out "
                f"section {s.section_id!r}"
            )
    params = unpack_checkpoint(ckpt)
    if gene_indices is None:
        gene_indices = np.arange(samples[0].bins.shape[0]) if samples else np.arange(0)
    params, state, report = _run_stage(samples, gene_indices, params, cfg, model_cfg)
    out = _pack_checkpoint(params, state, "III",
                           _digest_payload(cfg, model_cfg, ckpt.manifest.get("stage")))
    report.final_digest = out.digest()
    return out, report


# ---------------------------------------------------------------------------
# Prediction helpers
# ---------------------------------------------------------------------------

def predict_from_stats(params, stats, depth_count, model_cfg=None, path="3d",
                       batch_size=256):
    """Predict expression for stacked tile statistics (n, 196*d, 8).

    Predictions come back in original target units (standardization from
    the checkpoint, when present, is inverted here).
    """
    model_cfg = model_cfg or ModelConfig()
    stats = np.asarray(stats)
    outs = []
    for lo in range(0, stats.shape[0], batch_size):
        chunk = stats[lo : lo + batch_size]
        tokens, _ = featurize_forward(chunk, depth_count, params, model_cfg)
        h_rec, _ = pool_forward(tokens, params, f"pool{path}_rec", model_cfg)
        yhat, _, _ = pred_forward(h_rec, params, model_cfg)
        outs.append(yhat)
    yhat = np.vstack(outs)
    y_norm = target_norm_from_params(params)
    if y_norm is not None:
        yhat = yhat * y_norm[1] + y_norm[0]
    return yhat


def embed_patches_cont(params, stats, depth_count, model_cfg=None, path="3d",
                       batch_size=256):
    """Unit-norm contrastive embeddings for stacked tile statistics."""
    model_cfg = model_cfg or ModelConfig()
    stats = np.asarray(stats)
    outs = []
    for lo in range(0, stats.shape[0], batch_size):
        tokens, _ = featurize_forward(stats[lo : lo + batch_size], depth_count,
                                      params, model_cfg)
        h, _ = pool_cont_forward(tokens, params, f"pool{path}_cont", model_cfg)
        outs.append(h)
    return np.vstack(outs)


def domain_embed_from_stats(params, stats, depth_count, model_cfg=None, path="3d",
                            batch_size=256):
    """Predictor-intermediate embeddings for stacked tile statistics."""
    model_cfg = model_cfg or ModelConfig()
    stats = np.asarray(stats)
    outs = []
    for lo in range(0, stats.shape[0], batch_size):
        tokens, _ = featurize_forward(stats[lo : lo + batch_size], depth_count,
                                      params, model_cfg)
        h_rec, _ = pool_forward(tokens, params, f"pool{path}_rec", model_cfg)
        _, emb, _ = pred_forward(h_rec, params, model_cfg)
        outs.append(emb)
    return np.vstack(outs)
