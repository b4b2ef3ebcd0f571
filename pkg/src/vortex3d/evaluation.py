"""Per-gene prediction metrics and spatial autocorrelation statistics.

Genes with zero variance in either the measured or predicted field are
flagged degenerate, excluded from aggregates, and counted in the report
rather than polluting means with NaN.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree
from scipy.stats import norm as _norm

from .store import GenePanel


class DegenerateError(ValueError):
    """A metric is undefined for constant input."""


# ---------------------------------------------------------------------------
# Spatial weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpatialWeights:
    n: int
    matrix: sparse.csr_matrix
    row_normalized: bool
    scheme: str  # KNN_BINARY | HEX_NEIGHBORS | GRID_ROOK

    def __post_init__(self):
        m = self.matrix.tocsr()
        if m.shape != (self.n, self.n):
            raise ValueError("weight matrix shape mismatch")
        if np.abs(m.diagonal()).max(initial=0.0) > 0:
            raise ValueError("weight matrix must have a zero diagonal")
        if (m.data < 0).any():
            raise ValueError("weights must be non-negative")
        if self.row_normalized:
            sums = np.asarray(m.sum(axis=1)).ravel()
            nz = sums > 0
            if nz.any() and np.abs(sums[nz] - 1.0).max() > 1e-9:
                raise ValueError("rows must sum to 1 when row_normalized")
        object.__setattr__(self, "matrix", m)

    @property
    def s0(self):
        return float(self.matrix.sum())


def _normalize_rows(m):
    sums = np.asarray(m.sum(axis=1)).ravel()
    inv = np.where(sums > 0, 1.0 / np.maximum(sums, 1e-300), 0.0)
    return sparse.diags(inv) @ m


def knn_weights(coords, k=6, row_normalize=True):
    """Binary k-nearest-neighbor weights (default matches hex spot geometry)."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if n < 2:
        raise ValueError("need at least 2 locations")
    kk = min(k, n - 1)
    tree = cKDTree(coords)
    _, nbr = tree.query(coords, k=kk + 1)
    nbr = np.atleast_2d(nbr)
    rows = np.repeat(np.arange(n), kk)
    cols = nbr[:, 1:].ravel()
    m = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    if row_normalize:
        m = _normalize_rows(m)
    return SpatialWeights(n=n, matrix=m, row_normalized=row_normalize,
                          scheme="KNN_BINARY")


def hex_weights(coords, pitch=None, row_normalize=True):
    """Radius-based neighbors: every spot within 1.2x the grid pitch."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    tree = cKDTree(coords)
    if pitch is None:
        d, _ = tree.query(coords, k=2)
        pitch = float(np.median(d[:, 1]))
    pairs = tree.query_pairs(r=1.2 * pitch, output_type="ndarray")
    if len(pairs) == 0:
        raise ValueError("no neighbor pairs within radius")
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    m = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    if row_normalize:
        m = _normalize_rows(m)
    return SpatialWeights(n=n, matrix=m, row_normalized=row_normalize,
                          scheme="HEX_NEIGHBORS")


def grid_rook_weights(shape, row_normalize=True):
    """4-neighbor adjacency on a regular (rows, cols) grid."""
    r, c = shape
    idx = np.arange(r * c).reshape(r, c)
    rows, cols = [], []
    for (a, b) in ((idx[:-1, :], idx[1:, :]), (idx[:, :-1], idx[:, 1:])):
        rows += [a.ravel(), b.ravel()]
        cols += [b.ravel(), a.ravel()]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    m = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)),
                          shape=(r * c, r * c)).tocsr()
    if row_normalize:
        m = _normalize_rows(m)
    return SpatialWeights(n=r * c, matrix=m, row_normalized=row_normalize,
                          scheme="GRID_ROOK")


# ---------------------------------------------------------------------------
# Correlation metrics
# ---------------------------------------------------------------------------

def pcc(x, y):
    """Sample Pearson correlation; raises DegenerateError on constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length vectors of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc * xc).sum() * (yc * yc).sum()))
    if denom == 0.0:
        raise DegenerateError("zero variance input")
    return float((xc * yc).sum() / denom)


def pcc_per_gene(gt, pred):
    """Columnwise PCC; NaN marks degenerate genes."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    out = np.full(gt.shape[1], np.nan)
    for j in range(gt.shape[1]):
        try:
            out[j] = pcc(gt[:, j], pred[:, j])
        except DegenerateError:
            pass
    return out


def pcc_mean(values):
    """Mean over genes, excluding degenerate entries."""
    vals = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(vals)
    if not ok.any():
        raise DegenerateError("all genes degenerate")
    return float(vals[ok].mean())


def _rank(v):
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    ranks[order] = np.arange(1, len(v) + 1)
    # average ties
    sv = v[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    return pcc(_rank(np.asarray(x, dtype=np.float64)),
               _rank(np.asarray(y, dtype=np.float64)))


def spearman_variance(gt, pred):
    """Rank correlation between per-gene variances of truth and prediction."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape[1] < 2:
        raise ValueError("need at least 2 genes")
    return spearman(gt.var(axis=0), pred.var(axis=0))


# ---------------------------------------------------------------------------
# SSIM on rasterized spot grids
# ---------------------------------------------------------------------------

def rasterize_spots(coords, values, pitch):
    """Place spot values on a dense grid at indices round(coord / pitch)."""
    coords = np.asarray(coords, dtype=np.float64)
    ix = np.round((coords[:, 0] - coords[:, 0].min()) / pitch).astype(int)
    iy = np.round((coords[:, 1] - coords[:, 1].min()) / pitch).astype(int)
    img = np.zeros((iy.max() + 1, ix.max() + 1))
    img[iy, ix] = values
    return img


def _minmax(img):
    lo, hi = img.min(), img.max()
    if hi <= lo:
        raise DegenerateError("constant image")
    return (img - lo) / (hi - lo)


def ssim_images(a, b, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2, truncate=3.5):
    """Mean structural similarity with a Gaussian window on unit-range images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    gf = lambda x: gaussian_filter(x, sigma, truncate=truncate)
    mu_a, mu_b = gf(a), gf(b)
    s_aa = gf(a * a) - mu_a ** 2
    s_bb = gf(b * b) - mu_b ** 2
    s_ab = gf(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    smap = num / den
    pad = int(truncate * sigma + 0.5)
    if smap.shape[0] > 2 * pad and smap.shape[1] > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


def ssim_gene(gt_values, pred_values, coords, pitch):
    """SSIM between min-max normalized rasterizations of one gene's field."""
    img_gt = _minmax(rasterize_spots(coords, gt_values, pitch))
    img_pr = _minmax(rasterize_spots(coords, pred_values, pitch))
    return ssim_images(img_gt, img_pr)


def ssim_per_gene(gt, pred, coords, pitch):
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    out = np.full(gt.shape[1], np.nan)
    for j in range(gt.shape[1]):
        try:
            out[j] = ssim_gene(gt[:, j], pred[:, j], coords, pitch)
        except DegenerateError:
            pass
    return out


# ---------------------------------------------------------------------------
# Spatial autocorrelation
# ---------------------------------------------------------------------------

def morans_i(values, w):
    x = np.asarray(values, dtype=np.float64)
    if len(x) != w.n or len(x) < 2:
        raise ValueError("values length must match weights")
    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise DegenerateError("constant values")
    return float(len(x) / w.s0 * (z @ (w.matrix @ z)) / denom)


def gearys_c(values, w):
    x = np.asarray(values, dtype=np.float64)
    if len(x) != w.n or len(x) < 2:
        raise ValueError("values length must match weights")
    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise DegenerateError("constant values")
    coo = w.matrix.tocoo()
    num = float((coo.data * (x[coo.row] - x[coo.col]) ** 2).sum())
    return float((len(x) - 1) / (2.0 * w.s0) * num / denom)


def autocorr_delta(gt, pred, w):
    """Per-gene (truth - prediction) differences of Moran's I and Geary's C."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    d_i = np.full(gt.shape[1], np.nan)
    d_c = np.full(gt.shape[1], np.nan)
    skipped = 0
    for j in range(gt.shape[1]):
        try:
            d_i[j] = morans_i(gt[:, j], w) - morans_i(pred[:, j], w)
            d_c[j] = gearys_c(gt[:, j], w) - gearys_c(pred[:, j], w)
        except DegenerateError:
            skipped += 1
    return d_i, d_c, skipped


# ---------------------------------------------------------------------------
# Partition agreement
# ---------------------------------------------------------------------------

def _comb2(x):
    return x * (x - 1) / 2.0


def ari(labels_a, labels_b):
    """Adjusted Rand index via pair counting with expected-index correction."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("labelings must be equal-length vectors")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0 if sum_ij == expected else 0.0
    return float((sum_ij - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank (one-sided)
# ---------------------------------------------------------------------------

def _exact_signed_rank_sf(w_obs, n):
    """P(W+ >= w_obs) under the null by subset-sum enumeration."""
    max_sum = n * (n + 1) // 2
    counts = np.zeros(max_sum + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in range(1, n + 1):
        counts[r:] = counts[r:] + counts[:-r].copy()
    total = 2.0 ** n
    return float(counts[int(math.ceil(w_obs - 1e-9)):].sum() / total)


def wilcoxon_signed_rank(a, b, alternative="greater", exact_limit=25):
    """One-sided signed-rank test p-value for paired samples.

    Exact distribution up to `exact_limit` untied pairs; otherwise the
    normal approximation with tie correction and continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length vectors")
    if alternative not in ("greater", "less"):
        raise ValueError("alternative must be 'greater' or 'less'")
    d = a - b
    d = d[d != 0]
    if len(d) == 0:
        raise ValueError("all paired differences are zero")
    if alternative == "less":
        d = -d
    n = len(d)
    absd = np.abs(d)
    ranks = _rank(absd)
    w_plus = float(ranks[d > 0].sum())
    has_ties = len(np.unique(absd)) < n
    if n <= exact_limit and not has_ties:
        return _exact_signed_rank_sf(w_plus, n)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(absd, return_counts=True)
    var -= (tie_counts ** 3 - tie_counts).sum() / 48.0
    if var <= 0:
        raise DegenerateError("zero variance in signed-rank statistic")
    z = (w_plus - 0.5 - mean) / math.sqrt(var)
    return float(_norm.sf(z))


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    scenario: str
    section_id: str
    genes: tuple
    pcc: np.ndarray
    ssim: np.ndarray
    aggregates: dict
    spearman_rho: float
    moran_delta: np.ndarray
    geary_delta: np.ndarray
    degenerate_counts: dict
    ari_per_plane: list = field(default_factory=list)
    weight_scheme: str = ""

    def to_dict(self):
        def arr(x):
            return [None if not np.isfinite(v) else float(v) for v in x]

        return {
            "scenario": self.scenario,
            "section_id": self.section_id,
            "genes": list(self.genes),
            "pcc": arr(self.pcc),
            "ssim": arr(self.ssim),
            "aggregates": self.aggregates,
            "spearman_rho": self.spearman_rho,
            "moran_delta": arr(self.moran_delta),
            "geary_delta": arr(self.geary_delta),
            "degenerate_counts": self.degenerate_counts,
            "ari_per_plane": self.ari_per_plane,
            "weight_scheme": self.weight_scheme,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["scenario", "section_id", "gene", "pcc", "ssim",
                 "moran_delta", "geary_delta"]
            )
            for j, gene in enumerate(self.genes):
                writer.writerow(
                    [self.scenario, self.section_id, gene,
                     self.pcc[j], self.ssim[j],
                     self.moran_delta[j], self.geary_delta[j]]
                )


def _agg(values, genes, markers, top_n=50):
    vals = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(vals)
    out = {"all": float(vals[ok].mean()) if ok.any() else None}
    ranked = np.argsort(np.where(ok, vals, -np.inf))[::-1]
    top = ranked[: min(top_n, int(ok.sum()))]
    out["top50"] = float(vals[top].mean()) if len(top) else None
    if markers:
        midx = [i for i, g in enumerate(genes) if g in markers and ok[i]]
        out["marker"] = float(vals[midx].mean()) if midx else None
    else:
        out["marker"] = None
    return out


def compute_metrics(gt, pred, coords, pitch, panel, markers=(), weights=None,
                    scenario="", section_id="", ari_per_plane=None):
    """Full per-section metric bundle for aligned truth/prediction matrices."""
    genes = panel.genes if isinstance(panel, GenePanel) else tuple(panel)
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if weights is None:
        weights = knn_weights(coords)
    pcc_vals = pcc_per_gene(gt, pred)
    ssim_vals = ssim_per_gene(gt, pred, coords, pitch)
    d_i, d_c, skipped = autocorr_delta(gt, pred, weights)
    report = MetricReport(
        scenario=scenario,
        section_id=section_id,
        genes=tuple(genes),
        pcc=pcc_vals,
        ssim=ssim_vals,
        aggregates={
            "pcc": _agg(pcc_vals, genes, set(markers)),
            "ssim": _agg(ssim_vals, genes, set(markers)),
        },
        spearman_rho=spearman_variance(gt, pred),
        moran_delta=d_i,
        geary_delta=d_c,
        degenerate_counts={
            "pcc": int(np.isnan(pcc_vals).sum()),
            "ssim": int(np.isnan(ssim_vals).sum()),
            "autocorr": skipped,
        },
        ari_per_plane=list(ari_per_plane or []),
        weight_scheme=weights.scheme,
    )
    return report
