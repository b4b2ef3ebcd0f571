"""Transforms raw spot tables and volumes into model-ready inputs.

Expression preprocessing follows the fixed sequence: spot filtering,
per-spot library normalization to a common total, log1p, optional
neighborhood smoothing, then panel restriction / value binning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .store import GenePanel, Modality, PanelKind, SectionImage, SpotTable, Volume

MODEL_PATCH_EDGE = 112
TILE_GRID = 14
TILE_PX = 8


@dataclass(frozen=True)
class ExpressionFlags:
    library_normalized: bool = False
    log_transformed: bool = False
    smoothed: bool = False


@dataclass(frozen=True)
class ExpressionMatrix:
    """Spots x genes real matrix mirroring SpotTable order."""

    panel: GenePanel
    values: np.ndarray  # (n_spots, n_genes)
    spot_ids: tuple
    section_ids: tuple
    x_um: np.ndarray
    y_um: np.ndarray
    flags: ExpressionFlags = field(default_factory=ExpressionFlags)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "spot_ids", tuple(self.spot_ids))
        object.__setattr__(self, "section_ids", tuple(self.section_ids))
        object.__setattr__(self, "x_um", np.asarray(self.x_um, dtype=np.float64))
        object.__setattr__(self, "y_um", np.asarray(self.y_um, dtype=np.float64))
        n = self.values.shape[0]
        if len(self.spot_ids) != n or len(self.section_ids) != n:
            raise ValueError("spot metadata length mismatch")
        if self.values.shape[1] != len(self.panel):
            raise ValueError("values width does not match panel size")

    @property
    def n_spots(self):
        return self.values.shape[0]

    def restrict(self, panel):
        """Project columns onto another panel (all genes must be present)."""
        idx = [self.panel.index_of(g) for g in panel.genes]
        return replace(self, panel=panel, values=self.values[:, idx])


@dataclass(frozen=True)
class BinnedExpression:
    """Per-spot quantile-binned values over the encoder input gene set."""

    gene_indices: np.ndarray  # indices into the source panel, shape (H,)
    gene_symbols: tuple
    bins: np.ndarray  # (n_spots, H) ints in [0, n_bins)
    n_bins: int

    def __post_init__(self):
        object.__setattr__(self, "gene_indices", np.asarray(self.gene_indices, dtype=np.int64))
        object.__setattr__(self, "gene_symbols", tuple(self.gene_symbols))
        object.__setattr__(self, "bins", np.asarray(self.bins, dtype=np.int64))
        if self.bins.ndim != 2 or self.bins.shape[1] != self.gene_indices.shape[0]:
            raise ValueError("bins shape does not match gene set")
        if self.bins.min(initial=0) < 0 or self.bins.max(initial=0) >= self.n_bins:
            raise ValueError("bin index out of range")


@dataclass(frozen=True)
class Patch:
    """(w, h, d) intensity block in [0, 1] cut around a voxel center."""

    data: np.ndarray
    center: tuple  # (x, y, z) voxel coordinates
    modality: Modality
    depth_extent_um: float
    padded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float32))
        if self.data.ndim != 3:
            raise ValueError("patch data must be 3-dimensional")


@dataclass(frozen=True)
class PatchGrid:
    centers: tuple  # of (x, y, z)
    patch_dims: tuple
    overlap_fraction: float

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(tuple(int(c) for c in p) for p in self.centers))


# ---------------------------------------------------------------------------
# Spot-level preprocessing
# ---------------------------------------------------------------------------

def filter_spots(table, min_genes=25, max_mito_frac=0.20, mito_prefix="MT-"):
    """Keep spots expressing >= min_genes genes with low mitochondrial fraction."""
    mito_cols = np.array([g.startswith(mito_prefix) for g in table.panel.genes])
    nonzero = (table.counts > 0).sum(axis=1)
    totals = table.counts.sum(axis=1)
    mito = table.counts[:, mito_cols].sum(axis=1) if mito_cols.any() else np.zeros_like(totals)
    with np.errstate(invalid="ignore", divide="ignore"):
        mito_frac = np.where(totals > 0, mito / np.maximum(totals, 1e-300), 0.0)
    keep = (nonzero >= min_genes) & (mito_frac < max_mito_frac)
    if not keep.any():
        warnings.warn("spot filtering removed every spot")
    return table.subset(np.flatnonzero(keep))


def normalize_expression(table, target_sum=10000.0):
    """Scale each spot to a fixed library size, then log1p."""
    totals = table.counts.sum(axis=1)
    zero = totals <= 0
    if zero.any():
        warnings.warn(f"excluded {int(zero.sum())} spot(s) with zero total counts")
    keep = np.flatnonzero(~zero)
    scaled = table.counts[keep] * (target_sum / totals[keep])[:, None]
    return ExpressionMatrix(
        panel=table.panel,
        values=np.log1p(scaled),
        spot_ids=[table.spot_ids[i] for i in keep],
        section_ids=[table.section_ids[i] for i in keep],
        x_um=table.x_um[keep],
        y_um=table.y_um[keep],
        flags=ExpressionFlags(library_normalized=True, log_transformed=True),
    )


def smooth_expression(m, coords=None, k=10):
    """Replace each spot by the mean of itself and its k nearest same-section spots."""
    if not (m.flags.library_normalized and m.flags.log_transformed):
        raise ValueError("smoothing expects library-normalized, log-transformed input")
    if coords is None:
        coords = np.column_stack([m.x_um, m.y_um])
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty_like(m.values)
    sections = np.asarray(m.section_ids)
    for sec in dict.fromkeys(m.section_ids):
        idx = np.flatnonzero(sections == sec)
        pts = coords[idx]
        kk = k
        if len(idx) < k + 1:
            kk = len(idx) - 1
            if kk < k:
                warnings.warn(
                    f"section {sec!r} has {len(idx)} spots; smoothing over all of them"
                )
        if kk <= 0:
            out[idx] = m.values[idx]
            continue
        tree = cKDTree(pts)
        _, nbr = tree.query(pts, k=kk + 1)
        nbr = np.atleast_2d(nbr)
        out[idx] = m.values[idx[nbr]].mean(axis=1)
    return replace(m, values=out, flags=replace(m.flags, smoothed=True))


def intersect_genes(sources):
    """Genes present in every source, in lexicographic order."""
    if not sources:
        raise ValueError("need at least one source")
    common = set(sources[0].panel.genes)
    for src in sources[1:]:
        common &= set(src.panel.genes)
    if not common:
        raise ValueError("gene universes are disjoint")
    return GenePanel(genes=sorted(common), kind=PanelKind.INTERSECTION)


def _pooled_log_expression(sources, universe):
    blocks = []
    for src in sources:
        m = normalize_expression(src)
        idx = [src.panel.index_of(g) for g in universe.genes]
        blocks.append(m.values[:, idx])
    return np.vstack(blocks)


def select_panel(sources, mode, n, markers=None):
    """Rank genes by mean (HEG) or variance (HVG) of normalized log expression.

    Returns the top-n ranked genes followed by any markers not already
    present. Ties break by lexicographic gene symbol.
    """
    universe = intersect_genes(sources)
    if n > len(universe):
        raise ValueError(f"n={n} exceeds shared gene universe of {len(universe)}")
    pooled = _pooled_log_expression(sources, universe)
    if mode == "HEG":
        stat = pooled.mean(axis=0)
    elif mode == "HVG":
        stat = pooled.var(axis=0)
    else:
        raise ValueError(f"unknown panel mode {mode!r}")
    order = sorted(range(len(universe)), key=lambda i: (-stat[i], universe.genes[i]))
    ranked = [universe.genes[i] for i in order[:n]]
    genes = list(ranked)
    kind = PanelKind.HEG if mode == "HEG" else PanelKind.HVG
    if markers is not None and len(markers.genes) > 0:
        extra = [g for g in markers.genes if g not in set(ranked)]
        genes += extra
        if extra:
            kind = PanelKind.UNION
    return GenePanel(genes=genes, kind=kind)


def select_input_genes(m, n_hvg_input=1200):
    """Indices of the encoder input gene set: top-variance genes of the matrix."""
    n = min(n_hvg_input, len(m.panel))
    var = m.values.var(axis=0)
    order = sorted(range(len(m.panel)), key=lambda i: (-var[i], m.panel.genes[i]))
    idx = np.array(sorted(order[:n]), dtype=np.int64)
    return idx


def bin_expression(m, n_hvg_input=1200, n_bins=51, gene_indices=None):
    """Quantile-bin each spot's nonzero values over the input gene set.

    Zeros map to bin 0; nonzero values map to bins 1..n_bins-1 using
    per-spot quantile edges over that spot's nonzero values. Pass
    `gene_indices` to reuse an input gene set selected on pooled data.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    idx = (np.asarray(gene_indices, dtype=np.int64) if gene_indices is not None
           else select_input_genes(m, n_hvg_input))
    vals = m.values[:, idx]
    bins = np.zeros(vals.shape, dtype=np.int64)
    n_edges = n_bins - 2
    for i in range(vals.shape[0]):
        nz = vals[i] > 0
        if not nz.any():
            continue
        v = vals[i, nz]
        if n_edges > 0:
            edges = np.quantile(v, np.arange(1, n_edges + 1) / (n_bins - 1))
            bins[i, nz] = np.digitize(v, edges, right=True) + 1
        else:
            bins[i, nz] = 1
    return BinnedExpression(
        gene_indices=idx,
        gene_symbols=[m.panel.genes[j] for j in idx],
        bins=bins,
        n_bins=n_bins,
    )


# ---------------------------------------------------------------------------
# Volume / patch preprocessing
# ---------------------------------------------------------------------------

def normalize_volume(v, lower=25000.0, upper_top_frac=0.01):
    """Clamp intensities to [lower, high-quantile of tissue] and map to [0, 1].

    Non-microCT modalities fall back to plain min-max scaling.
    """
    vox = np.asarray(v.voxels, dtype=np.float64)
    if vox.max() <= vox.min():
        raise ValueError("constant volume cannot be normalized")
    if v.modality == Modality.MICROCT:
        tissue = vox[vox > lower]
        q = np.quantile(tissue, 1.0 - upper_top_frac) if tissue.size else lower
        if q <= lower:
            raise ValueError("volume has no intensity range above the lower threshold")
        out = (np.clip(vox, lower, q) - lower) / (q - lower)
    else:
        lo, hi = vox.min(), vox.max()
        if hi <= lo:
            raise ValueError("constant volume cannot be normalized")
        out = (vox - lo) / (hi - lo)
    return Volume(dims=v.dims, spacing_um=v.spacing_um, voxels=out.astype(np.float32),
                  modality=v.modality)


def extract_patch(source, center, dims=(MODEL_PATCH_EDGE, MODEL_PATCH_EDGE, 21)):
    """Cut a (w, h, d) block centered on a voxel; out-of-bounds is zero-padded.

    For d > 1 the center plane sits at depth index d//2, with (d-1)/2 planes
    above and below.
    """
    w, h, d = (int(x) for x in dims)
    if isinstance(source, SectionImage):
        if d != 1:
            raise ValueError("sections only support depth-1 patches")
        nx, ny = source.dims
        grid = np.asarray(source.pixels, dtype=np.float32)
        if grid.ndim == 3:
            grid = grid.mean(axis=2)
        vox = grid.T[:, :, None]  # (x, y, 1)
        nz = 1
        spacing_z = source.spacing_um
        modality = Modality.OTHER
        cx, cy = (int(round(c)) for c in center[:2])
        cz = 0
    else:
        nx, ny, nz = source.dims
        vox = source.voxels
        spacing_z = source.spacing_um[2]
        modality = source.modality
        cx, cy, cz = (int(round(c)) for c in center)
    if not (0 <= cx < nx and 0 <= cy < ny and 0 <= cz < nz):
        raise ValueError(f"center {center} outside volume dims {(nx, ny, nz)}")
    x0, y0, z0 = cx - w // 2, cy - h // 2, cz - d // 2
    out = np.zeros((w, h, d), dtype=np.float32)
    sx0, sy0, sz0 = max(x0, 0), max(y0, 0), max(z0, 0)
    sx1, sy1, sz1 = min(x0 + w, nx), min(y0 + h, ny), min(z0 + d, nz)
    padded = (sx0, sy0, sz0) != (x0, y0, z0) or (sx1, sy1, sz1) != (x0 + w, y0 + h, z0 + d)
    if sx1 > sx0 and sy1 > sy0 and sz1 > sz0:
        out[sx0 - x0 : sx1 - x0, sy0 - y0 : sy1 - y0, sz0 - z0 : sz1 - z0] = vox[
            sx0:sx1, sy0:sy1, sz0:sz1
        ]
    return Patch(
        data=out,
        center=(cx, cy, cz),
        modality=modality,
        depth_extent_um=d * spacing_z,
        padded=bool(padded),
    )


def _axis_offsets(extent, edge, stride):
    if extent <= edge:
        return [0]
    offsets = list(range(0, extent - edge + 1, stride))
    if offsets[-1] != extent - edge:
        offsets.append(extent - edge)
    return offsets


def tile_grid(v, patch_dims=(MODEL_PATCH_EDGE, MODEL_PATCH_EDGE, 21), overlap_fraction=0.75):
    """Patch centers covering the volume with the requested fractional overlap."""
    if not (0.0 <= overlap_fraction < 1.0):
        raise ValueError("overlap_fraction must be in [0, 1)")
    strides = []
    for edge in patch_dims:
        s = int(edge * (1.0 - overlap_fraction))
        if s < 1:
            raise ValueError(f"stride 0 for edge {edge} at overlap {overlap_fraction}")
        strides.append(s)
    nx, ny, nz = v.dims
    w, h, d = patch_dims
    centers = [
        (ox + w // 2, oy + h // 2, oz + d // 2)
        for oz in _axis_offsets(nz, d, strides[2])
        for oy in _axis_offsets(ny, h, strides[1])
        for ox in _axis_offsets(nx, w, strides[0])
    ]
    return PatchGrid(centers=centers, patch_dims=tuple(patch_dims),
                     overlap_fraction=overlap_fraction)


def patch_footprint(center, patch_dims, vol_dims):
    """Clipped (x0, x1, y0, y1, z0, z1) voxel ranges of a patch."""
    (cx, cy, cz), (w, h, d) = center, patch_dims
    x0, y0, z0 = cx - w // 2, cy - h // 2, cz - d // 2
    nx, ny, nz = vol_dims
    return (
        max(x0, 0), min(x0 + w, nx),
        max(y0, 0), min(y0 + h, ny),
        max(z0, 0), min(z0 + d, nz),
    )
