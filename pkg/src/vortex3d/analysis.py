"""Downstream analyses on trained models: spatial-domain discovery,
molecular-query retrieval, heatmap assembly, rendering-resolution
upsampling, and propagated-mask blending.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .evaluation import DegenerateError, pcc
from .model import ModelConfig, batch_patch_stats
from .preprocess import extract_patch, patch_footprint
from .training import domain_embed_from_stats, embed_patches_cont


@dataclass(frozen=True)
class DomainLabels:
    labels: np.ndarray
    k: int
    centroids: np.ndarray
    inertia: float

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.k:
            raise ValueError("label outside range")
        counts = np.bincount(self.labels, minlength=self.k)
        if (counts == 0).any():
            raise ValueError("every cluster must be non-empty")


@dataclass(frozen=True)
class MolecularQuery:
    genes_of_interest: tuple
    correlated_genes: tuple
    spatial_filter_genes: tuple
    pcc_threshold: float
    expr_percentile: float
    min_high_frac: float
    embedding: np.ndarray  # unit norm
    provenance_spot_ids: tuple

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if abs(float(np.linalg.norm(emb)) - 1.0) > 1e-6:
            raise ValueError("query embedding must be unit norm")
        goi = set(self.genes_of_interest)
        if not goi.issubset(set(self.spatial_filter_genes)):
            raise ValueError("filter genes must contain the genes of interest")
        object.__setattr__(self, "embedding", emb)

    def to_dict(self):
        return {
            "genes_of_interest": list(self.genes_of_interest),
            "correlated_genes": list(self.correlated_genes),
            "spatial_filter_genes": list(self.spatial_filter_genes),
            "pcc_threshold": self.pcc_threshold,
            "expr_percentile": self.expr_percentile,
            "min_high_frac": self.min_high_frac,
            "n_spots_used": len(self.provenance_spot_ids),
            "provenance_spot_ids": list(self.provenance_spot_ids),
        }


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    clamp: tuple  # applied (low, high) bounds
    alpha: float
    clamp_percentiles: tuple = (None, None)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        lo, hi = self.clamp
        if v.size and (v.min() < lo - 1e-6 or v.max() > hi + 1e-6):
            raise ValueError("values exceed clamp range")
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# k-means over embeddings
# ---------------------------------------------------------------------------

def kmeans(embeddings, k, seed=0, max_iter=300, tol=1e-6):
    """Greedy seeding + Lloyd iterations; deterministic for a fixed seed.

    Empty clusters are repaired by reseeding to the point farthest from its
    assigned centroid; inertia is asserted non-increasing every iteration.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    prev_inertia = np.inf
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        point_d2 = dists[np.arange(n), labels]
        for j in range(k):
            mask = labels == j
            if not mask.any():
                far = int(point_d2.argmax())
                centroids[j] = x[far]
                labels[far] = j
                point_d2[far] = 0.0
                mask = labels == j
            centroids[j] = x[mask].mean(axis=0)
        inertia = float(
            ((x - centroids[labels]) ** 2).sum()
        )
        if not inertia <= prev_inertia + 1e-9:
            raise AssertionError("k-means inertia increased")
        if prev_inertia - inertia <= tol * max(prev_inertia, 1e-300):
            prev_inertia = inertia
            break
        prev_inertia = inertia
    return DomainLabels(labels=labels, k=k, centroids=centroids, inertia=prev_inertia)


def domain_embeddings(patches, params, model_cfg=None, path="3d"):
    """Predictor-intermediate embeddings (pre-head, token mean) per patch."""
    model_cfg = model_cfg or ModelConfig()
    stats = batch_patch_stats(patches)
    depth = stats.shape[1] // 196
    return domain_embed_from_stats(params, stats, depth, model_cfg, path=path)


# ---------------------------------------------------------------------------
# Molecular queries
# ---------------------------------------------------------------------------

def build_molecular_query(m, goi, tx_embeddings, pcc_threshold=0.5,
                          expr_percentile=75.0, min_high_frac=0.5,
                          correlate="union"):
    """Build a retrieval query embedding from co-expressing spots.

    Correlated genes have PCC above threshold with any gene of interest
    (set `correlate="intersection"` to require all). Spots qualify when at
    least `min_high_frac` of the filter genes exceed their per-gene
    expression percentile across all spots; the query embedding is the
    unit-normalized mean of their transcriptome embeddings.
    """
    goi_genes = tuple(goi.genes) if hasattr(goi, "genes") else tuple(goi)
    for g in goi_genes:
        if g not in m.panel.genes:
            raise KeyError(f"gene of interest {g!r} not in panel")
    if correlate not in ("union", "intersection"):
        raise ValueError("correlate must be 'union' or 'intersection'")
    tx_embeddings = np.asarray(tx_embeddings, dtype=np.float64)
    if tx_embeddings.shape[0] != m.n_spots:
        raise ValueError("one embedding per spot required")
    goi_idx = [m.panel.index_of(g) for g in goi_genes]
    correlated = []
    for j, gene in enumerate(m.panel.genes):
        if gene in goi_genes:
            continue
        hits = []
        for gi in goi_idx:
            try:
                hits.append(pcc(m.values[:, j], m.values[:, gi]) > pcc_threshold)
            except DegenerateError:
                hits.append(False)
        ok = any(hits) if correlate == "union" else all(hits)
        if ok:
            correlated.append(gene)
    filter_genes = tuple(goi_genes) + tuple(correlated)
    f_idx = [m.panel.index_of(g) for g in filter_genes]
    sub = m.values[:, f_idx]
    thresholds = np.percentile(sub, expr_percentile, axis=0)
    high_frac = (sub > thresholds).mean(axis=1)
    keep = high_frac >= min_high_frac
    if not keep.any():
        raise ValueError(
            f"no spot passes the filter: max high-fraction "
            f"{high_frac.max():.3f} < {min_high_frac} over "
            f"{len(filter_genes)} filter genes"
        )
    emb = tx_embeddings[keep].mean(axis=0)
    emb = emb / np.linalg.norm(emb)
    return MolecularQuery(
        genes_of_interest=goi_genes,
        correlated_genes=tuple(correlated),
        spatial_filter_genes=filter_genes,
        pcc_threshold=pcc_threshold,
        expr_percentile=expr_percentile,
        min_high_frac=min_high_frac,
        embedding=emb,
        provenance_spot_ids=tuple(np.asarray(m.spot_ids)[keep]),
    )


def patch_similarities(query, patch_embeddings):
    emb = np.asarray(patch_embeddings, dtype=np.float64)
    return emb @ np.asarray(query.embedding if isinstance(query, MolecularQuery)
                            else query, dtype=np.float64)


def similarity_heatmap(volume, grid, query, params, model_cfg=None, path="3d",
                       clamp_percentiles=(10.0, 90.0), alpha=0.35):
    """Cosine-similarity field over the volume from overlapping patch tiles.

    Overlapping footprints are averaged; for rendering, the field is clamped
    to the given percentiles of the per-patch similarity distribution.
    """
    model_cfg = model_cfg or ModelConfig()
    if not grid.centers:
        raise ValueError("empty patch grid")
    patches = [extract_patch(volume, c, grid.patch_dims) for c in grid.centers]
    stats = batch_patch_stats(patches)
    embs = embed_patches_cont(params, stats, grid.patch_dims[2], model_cfg, path=path)
    sims = patch_similarities(query, embs)
    acc = np.zeros(volume.dims, dtype=np.float64)
    cnt = np.zeros(volume.dims, dtype=np.int64)
    for center, sim in zip(grid.centers, sims):
        x0, x1, y0, y1, z0, z1 = patch_footprint(center, grid.patch_dims, volume.dims)
        acc[x0:x1, y0:y1, z0:z1] += sim
        cnt[x0:x1, y0:y1, z0:z1] += 1
    mean = np.where(cnt > 0, acc / np.maximum(cnt, 1), 0.0)
    lo, hi = np.percentile(sims, clamp_percentiles)
    return Heatmap(
        values=np.clip(mean, lo, hi),
        clamp=(float(lo), float(hi)),
        alpha=alpha,
        clamp_percentiles=tuple(clamp_percentiles),
    ), sims


def rank_patches(query, patch_embeddings):
    """Similarity percentile ranks in [0, 100]; ties break by patch index."""
    sims = patch_similarities(query, patch_embeddings)
    n = len(sims)
    if n == 0:
        raise ValueError("need at least one patch")
    if n == 1:
        return np.array([100.0])
    order = np.lexsort((np.arange(n), sims))  # ascending similarity
    pct = np.empty(n)
    pct[order] = 100.0 * np.arange(n) / (n - 1)
    return pct


def expression_heatmap(predictions, gene, alpha=0.7, clip_percentiles=(1.0, 99.0),
                       central_plane=None):
    """Clip a per-plane prediction stack at central-plane percentiles.

    `predictions` maps gene name -> (n_planes, h, w) stack; the clip bounds
    come from the central plane and apply to every plane.
    """
    if gene not in predictions:
        raise KeyError(f"unknown gene {gene!r}")
    stack = np.asarray(predictions[gene], dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    central = stack.shape[0] // 2 if central_plane is None else central_plane
    lo, hi = np.percentile(stack[central], clip_percentiles)
    if hi <= lo:
        lo, hi = float(stack[central].min()), float(stack[central].min()) + 1e-12
    return Heatmap(
        values=np.clip(stack, lo, hi),
        clamp=(float(lo), float(hi)),
        alpha=alpha,
        clamp_percentiles=tuple(clip_percentiles),
    )


# ---------------------------------------------------------------------------
# Rendering-resolution upsampling (inverse-distance weighting)
# ---------------------------------------------------------------------------

def upsample_idw(coords, values, resolution_factor=15, pitch=None, power=2.0,
                 radius=None, grid_bounds=None):
    """Dense plane from scattered spot values; exact at spot locations."""
    coords = np.asarray(coords, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(coords) == 0:
        raise ValueError("no spots to interpolate")
    tree = cKDTree(coords)
    if pitch is None:
        if len(coords) > 1:
            d, _ = tree.query(coords, k=2)
            pitch = float(np.median(d[:, 1]))
        else:
            pitch = 1.0
    step = pitch / resolution_factor
    radius = radius if radius is not None else 1.5 * pitch
    if grid_bounds is None:
        x0, y0 = coords.min(axis=0)
        x1, y1 = coords.max(axis=0)
    else:
        x0, y0, x1, y1 = grid_bounds
    xs = np.arange(x0, x1 + step / 2, step)
    ys = np.arange(y0, y1 + step / 2, step)
    gx, gy = np.meshgrid(xs, ys)
    targets = np.column_stack([gx.ravel(), gy.ravel()])
    out = np.empty(len(targets))
    neighbor_lists = tree.query_ball_point(targets, r=radius)
    _, nearest = tree.query(targets, k=1)
    for i, nbrs in enumerate(neighbor_lists):
        if not nbrs:
            out[i] = values[nearest[i]]
            continue
        d = np.linalg.norm(coords[nbrs] - targets[i], axis=1)
        j = d.argmin()
        if d[j] < 1e-9:
            out[i] = values[nbrs[j]]
            continue
        wgt = 1.0 / d ** power
        out[i] = (wgt * values[nbrs]).sum() / wgt.sum()
    return out.reshape(len(ys), len(xs)), (x0, y0, step)


# ---------------------------------------------------------------------------
# Propagated-mask blending
# ---------------------------------------------------------------------------

def blend_propagated_masks(forward_logits, backward_logits, anchors):
    """Linear pixel-wise blend of two propagated logit stacks, then argmax.

    Plane `a` is weighted fully toward the forward stack, plane `b` fully
    toward the backward stack. Argmax ties resolve to the lower class index.
    """
    a, b = anchors
    if a == b:
        raise ValueError("anchor planes must differ")
    fwd = np.asarray(forward_logits, dtype=np.float64)
    bwd = np.asarray(backward_logits, dtype=np.float64)
    if fwd.shape != bwd.shape:
        raise ValueError("logit stacks must share a shape")
    n_planes = fwd.shape[0]
    if n_planes != abs(b - a) + 1:
        raise ValueError("stacks must cover planes a..b inclusive")
    planes = np.arange(n_planes)
    w_fwd = (b - (a + planes)) / (b - a)
    blended = fwd * w_fwd[:, None, None, None] + bwd * (1.0 - w_fwd)[:, None, None, None]
    return blended.argmax(axis=-1)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def save_heatmap(hm, path, extra_meta=None, uint8=False):
    """Raw f32 plane stack + JSON header; optional 8-bit grayscale stack."""
    vals = np.asarray(hm.values, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(vals).tobytes())
    meta = {
        "shape": list(vals.shape),
        "dtype": "f32",
        "clamp": list(hm.clamp),
        "clamp_percentiles": list(hm.clamp_percentiles),
        "alpha": hm.alpha,
    }
    meta.update(extra_meta or {})
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, indent=1)
    if uint8:
        lo, hi = hm.clamp
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        u8 = ((vals - lo) * scale).round().clip(0, 255).astype(np.uint8)
        with open(str(path) + ".u8", "wb") as f:
            f.write(u8.tobytes())


def save_domain_labels(domains, keys, path):
    """CSV of (location, label) rows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["location", "label"])
        for key, lab in zip(keys, domains.labels):
            writer.writerow([key, int(lab)])
