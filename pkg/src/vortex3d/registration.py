"""Section-to-volume and section-to-section registration.

The cross-modal path: match 2D section features against every axial plane of
the volume, fit a plane to the matched 3D points with RANSAC, resample the
volume on that plane ("virtual plane"), then estimate the in-plane
similarity transform between section and virtual plane. Spot coordinates
follow the same chain into voxel space.

The built-in feature matcher (multi-scale corners + normalized patch
descriptors with a second-nearest-neighbor ratio test) is intentionally
simple; any external matcher producing the same match records can be
plugged in.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, maximum_filter

from .store import SectionImage, Volume


@dataclass(frozen=True)
class Match3D:
    p2: tuple  # (u, v) pixel coordinates in the section
    p3: tuple  # (x, y, z) voxel coordinates in the volume
    score: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.p2)) or not np.all(np.isfinite(self.p3)):
            raise ValueError("match coordinates must be finite")
        if self.score < 0:
            raise ValueError("match score must be >= 0")


@dataclass(frozen=True)
class PlaneModel:
    """Plane n . p = d with unit normal and canonical sign."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("zero normal")
        n = n / norm
        d = float(self.offset) / norm * np.linalg.norm(np.asarray(self.normal))
        # canonical sign: the largest-magnitude component is positive
        k = int(np.argmax(np.abs(n)))
        if n[k] < 0:
            n, d = -n, -d
        object.__setattr__(self, "normal", tuple(n))
        object.__setattr__(self, "offset", float(d))

    def distance(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.abs(pts @ np.asarray(self.normal) - self.offset)


@dataclass(frozen=True)
class SimilarityTransform2D:
    scale: float = 1.0
    rotation_rad: float = 0.0
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    @property
    def matrix(self):
        c, s = np.cos(self.rotation_rad), np.sin(self.rotation_rad)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.matrix.T + np.asarray(self.translation)

    def compose(self, other):
        """Transform equivalent to applying `other` first, then `self`."""
        m = self.matrix
        t = m @ np.asarray(other.translation) + np.asarray(self.translation)
        return SimilarityTransform2D(
            scale=self.scale * other.scale,
            rotation_rad=self.rotation_rad + other.rotation_rad,
            translation=tuple(t),
        )

    def inverse(self):
        inv_m = np.linalg.inv(self.matrix)
        t = -inv_m @ np.asarray(self.translation)
        return SimilarityTransform2D(
            scale=1.0 / self.scale,
            rotation_rad=-self.rotation_rad,
            translation=tuple(t),
        )


@dataclass(frozen=True)
class PlaneGrid:
    """Sampling geometry of a virtual plane embedded in voxel space."""

    origin: tuple
    u_axis: tuple
    v_axis: tuple
    step_vox: float
    out_dims: tuple  # (w, h) grid pixels
    volume_dims: tuple

    def to_voxels(self, grid_points):
        pts = np.atleast_2d(np.asarray(grid_points, dtype=np.float64))
        o = np.asarray(self.origin)
        u = np.asarray(self.u_axis) * self.step_vox
        v = np.asarray(self.v_axis) * self.step_vox
        return o + pts[:, :1] * u + pts[:, 1:2] * v


@dataclass(frozen=True)
class RegistrationResult:
    plane: PlaneModel
    transform: SimilarityTransform2D
    inlier_count: int
    inlier_rmse_vox: float
    grid: PlaneGrid | None = None

    def __post_init__(self):
        if self.inlier_rmse_vox < 0:
            raise ValueError("rmse must be >= 0")


# ---------------------------------------------------------------------------
# Plane fitting
# ---------------------------------------------------------------------------

def _tls_plane(points):
    c = points.mean(axis=0)
    _, sv, vt = np.linalg.svd(points - c, full_matrices=False)
    normal = vt[-1]
    return PlaneModel(normal=tuple(normal), offset=float(normal @ c)), sv


def fit_plane_ransac(matches, n_iters=2000, inlier_thresh_vox=2.0, seed=0):
    """RANSAC plane fit over match points; returns (plane, inlier indices).

    The winning hypothesis (most inliers, ties by lower rmse then earlier
    iteration) is refit by total least squares on its inliers.
    """
    pts = np.array([m.p3 for m in matches], dtype=np.float64)
    if len(pts) < 3:
        raise ValueError("need at least 3 match points")
    _, sv = _tls_plane(pts)
    if sv[1] < 1e-12 * max(sv[0], 1.0):
        raise ValueError("match points are collinear")
    rng = np.random.default_rng(seed)
    best = None  # (count, -neg rmse, -iteration) comparison via explicit tuple
    for it in range(n_iters):
        idx = rng.choice(len(pts), size=3, replace=False)
        p0, p1, p2 = pts[idx]
        n = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        d = n @ p0
        dist = np.abs(pts @ n - d)
        inl = dist < inlier_thresh_vox
        count = int(inl.sum())
        if count < 3:
            continue
        rmse = float(np.sqrt(np.mean(dist[inl] ** 2)))
        key = (count, -rmse, -it)
        if best is None or key > best[0]:
            best = (key, inl)
    if best is None:
        raise ValueError("RANSAC found no valid plane hypothesis")
    # iterated refit: alternate least squares and inlier reselection so a
    # few borderline off-plane points cannot bias the final plane
    inl = best[1]
    plane = None
    for _ in range(4):
        plane, _ = _tls_plane(pts[inl])
        new_inl = plane.distance(pts) < inlier_thresh_vox
        if (new_inl == inl).all():
            break
        inl = new_inl
    inliers = np.flatnonzero(inl)
    return plane, list(inliers)


def make_plane_grid(volume, plane, out_dims, out_spacing_um):
    """Build the rectangular sampling grid embedded in the plane.

    The grid is centered on the projection of the volume center and aligned
    so axis-aligned planes reproduce voxel slices exactly.
    """
    n = np.asarray(plane.normal)
    dims = np.asarray(volume.dims, dtype=np.float64)
    corners = np.array(
        [[x, y, z] for x in (0, dims[0]) for y in (0, dims[1]) for z in (0, dims[2])]
    )
    sd = corners @ n - plane.offset
    if sd.min() > 1e-9 or sd.max() < -1e-9:
        raise ValueError("plane does not intersect the volume")
    ref = int(np.argmin(np.abs(n)))
    e = np.zeros(3)
    e[ref] = 1.0
    u = e - (e @ n) * n
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    center = dims / 2.0
    proj = center - (center @ n - plane.offset) * n
    step = float(out_spacing_um) / float(volume.spacing_um[0])
    w, h = (int(x) for x in out_dims)
    origin = proj - (w / 2.0) * step * u - (h / 2.0) * step * v
    return PlaneGrid(
        origin=tuple(origin),
        u_axis=tuple(u),
        v_axis=tuple(v),
        step_vox=step,
        out_dims=(w, h),
        volume_dims=tuple(volume.dims),
    )


def extract_virtual_plane(volume, plane, out_dims=None, out_spacing_um=None, grid=None):
    """Trilinearly resample the volume on a plane-embedded grid."""
    if grid is None:
        if out_dims is None:
            out_dims = (volume.dims[0], volume.dims[1])
        if out_spacing_um is None:
            out_spacing_um = volume.spacing_um[0]
        grid = make_plane_grid(volume, plane, out_dims, out_spacing_um)
    w, h = grid.out_dims
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = grid.to_voxels(np.column_stack([ii.ravel(), jj.ravel()]))
    vals = map_coordinates(
        volume.voxels.astype(np.float64), pts.T, order=1, mode="constant", cval=0.0
    )
    pixels = vals.reshape(h, w).astype(np.float32)
    section = SectionImage(
        dims=(w, h),
        spacing_um=grid.step_vox * volume.spacing_um[0],
        pixels=pixels,
        section_id="virtual",
    )
    return section, grid


# ---------------------------------------------------------------------------
# Similarity transform (closed-form least squares)
# ---------------------------------------------------------------------------

def estimate_similarity_transform(pairs):
    """Least-squares scale/rotation/translation mapping sources onto targets."""
    src = np.array([p[0] for p in pairs], dtype=np.float64)
    tgt = np.array([p[1] for p in pairs], dtype=np.float64)
    if len(src) < 2:
        raise ValueError("need at least 2 point pairs")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    sc, tc = src - mu_s, tgt - mu_t
    var_s = (sc ** 2).sum() / len(src)
    if var_s < 1e-24:
        raise ValueError("source points are coincident")
    cov = tc.T @ sc / len(src)
    uu, dd, vvt = np.linalg.svd(cov)
    sgn = np.sign(np.linalg.det(uu @ vvt))
    if sgn == 0:
        sgn = 1.0
    s_diag = np.array([1.0, sgn])
    rot = uu @ np.diag(s_diag) @ vvt
    scale = float((dd * s_diag).sum() / var_s)
    trans = mu_t - scale * rot @ mu_s
    return SimilarityTransform2D(
        scale=scale,
        rotation_rad=float(np.arctan2(rot[1, 0], rot[0, 0])),
        translation=tuple(trans),
    )


def ransac_similarity(pairs, n_iters=300, inlier_thresh_px=2.0, seed=0,
                      min_inliers=4):
    """Consensus similarity transform from noisy correspondences.

    Two-point hypotheses (a pair of correspondences fixes scale, rotation
    and translation) are scored by inlier count; the winner is refit by
    least squares on its inliers. Deterministic for a fixed seed.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("need at least 2 point pairs")
    src = np.array([p[0] for p in pairs], dtype=np.float64)
    tgt = np.array([p[1] for p in pairs], dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = None
    for it in range(n_iters):
        i, j = rng.choice(len(pairs), size=2, replace=False)
        ds = src[j] - src[i]
        dt = tgt[j] - tgt[i]
        ns, nt = np.linalg.norm(ds), np.linalg.norm(dt)
        if ns < 1e-9 or nt < 1e-9:
            continue
        scale = nt / ns
        rot = np.arctan2(dt[1], dt[0]) - np.arctan2(ds[1], ds[0])
        c, s = np.cos(rot), np.sin(rot)
        m = scale * np.array([[c, -s], [s, c]])
        t = tgt[i] - m @ src[i]
        resid = np.linalg.norm(src @ m.T + t - tgt, axis=1)
        inl = resid < inlier_thresh_px
        count = int(inl.sum())
        key = (count, -float(resid[inl].sum()) if count else 0.0, -it)
        if best is None or key > best[0]:
            best = (key, inl)
    if best is None or best[0][0] < max(min_inliers, 2):
        # too little consensus; fall back to the trimmed estimate
        return robust_similarity(pairs)
    refined = estimate_similarity_transform(
        [p for p, k in zip(pairs, best[1]) if k]
    )
    return refined


def robust_similarity(pairs, n_rounds=3, min_keep=4):
    """Trimmed least-squares similarity: iteratively drop residual outliers.

    Deterministic refinement for matcher output, which always carries some
    false correspondences; the plain closed-form estimate stays available
    for clean point sets.
    """
    pairs = list(pairs)
    transform = estimate_similarity_transform(pairs)
    for _ in range(n_rounds):
        src = np.array([p[0] for p in pairs], dtype=np.float64)
        tgt = np.array([p[1] for p in pairs], dtype=np.float64)
        resid = np.linalg.norm(transform.apply(src) - tgt, axis=1)
        thresh = max(3.0 * float(np.median(resid)), 1.5)
        keep = resid < thresh
        if keep.sum() < max(min_keep, 2) or keep.all():
            break
        pairs = [p for p, k in zip(pairs, keep) if k]
        transform = estimate_similarity_transform(pairs)
    return transform


@dataclass(frozen=True)
class MappedSpot:
    spot_id: str
    voxel: tuple
    inside: bool


def map_spots_to_volume(spots, result, section_spacing_um, volume_spacing_um=None):
    """Carry spot coordinates along the registration chain into voxel space."""
    if result.grid is None:
        raise ValueError("registration result has no plane grid")
    px = np.column_stack([spots.x_um, spots.y_um]) / float(section_spacing_um)
    grid_pts = result.transform.apply(px)
    vox = result.grid.to_voxels(grid_pts)
    nx, ny, nz = result.grid.volume_dims
    out = []
    for sid, p in zip(spots.spot_ids, vox):
        inside = bool(0 <= p[0] < nx and 0 <= p[1] < ny and 0 <= p[2] < nz)
        out.append(MappedSpot(spot_id=sid, voxel=tuple(p), inside=inside))
    return out


# ---------------------------------------------------------------------------
# Feature matcher (corners + normalized patch descriptors)
# ---------------------------------------------------------------------------

_DESC_HALF = 5  # 11x11 descriptor window
_RATIO = 0.8


def _as_gray(section):
    px = np.asarray(section.pixels, dtype=np.float64)
    if px.ndim == 3:
        px = px.mean(axis=2)
    return px


def _harris_corners(img, sigma, max_pts=200):
    smoothed = gaussian_filter(img, sigma)
    iy, ix = np.gradient(smoothed)
    sxx = gaussian_filter(ix * ix, 1.5 * sigma)
    syy = gaussian_filter(iy * iy, 1.5 * sigma)
    sxy = gaussian_filter(ix * iy, 1.5 * sigma)
    det = sxx * syy - sxy ** 2
    tr = sxx + syy
    resp = det - 0.06 * tr ** 2
    peak = (resp == maximum_filter(resp, size=5)) & (resp > 0.01 * max(resp.max(), 1e-30))
    ys, xs = np.nonzero(peak)
    m = _DESC_HALF + 1
    ok = (ys >= m) & (ys < img.shape[0] - m) & (xs >= m) & (xs < img.shape[1] - m)
    ys, xs = ys[ok], xs[ok]
    order = np.lexsort((xs, ys, -resp[ys, xs]))[:max_pts]
    return xs[order], ys[order], smoothed


def _descriptors(img, sigmas=(1.0, 2.0), desc_sigma=0.8):
    """Corner keypoints with unit-norm local-gradient patch descriptors.

    Detection is multi-scale; descriptors always sample the gradients of a
    single lightly-smoothed base image, which keeps them discriminative
    enough for the second-nearest-neighbor ratio test.
    """
    pts, descs = [], []
    dim = 2 * (2 * _DESC_HALF + 1) ** 2
    base = gaussian_filter(img, desc_sigma)
    gy, gx = np.gradient(base)
    for sigma in sigmas:
        xs, ys, _ = _harris_corners(img, sigma)
        for x, y in zip(xs, ys):
            sl = np.s_[y - _DESC_HALF : y + _DESC_HALF + 1,
                       x - _DESC_HALF : x + _DESC_HALF + 1]
            patch = np.concatenate([gx[sl].ravel(), gy[sl].ravel()])
            patch = patch - patch.mean()
            norm = np.linalg.norm(patch)
            if norm < 1e-12:
                continue
            pts.append((float(x), float(y)))
            descs.append(patch / norm)
    if not descs:
        return np.zeros((0, 2)), np.zeros((0, dim))
    return np.array(pts), np.array(descs)


def _volume_descriptors(volume):
    pts, descs = [], []
    for z in range(volume.dims[2]):
        plane = np.asarray(volume.voxels[:, :, z], dtype=np.float64).T  # (y, x)
        p, d = _descriptors(plane)
        if len(p):
            pts.append(np.column_stack([p, np.full(len(p), float(z))]))
            descs.append(d)
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, (2 * _DESC_HALF + 1) ** 2))
    return np.vstack(pts), np.vstack(descs)


def match_features(a, b, ratio=_RATIO):
    """Match section `a` against section or volume `b` with a ratio test.

    The second-nearest candidate is taken outside a small spatial ball
    around the best match, so near-duplicate features on adjacent volume
    planes do not suppress genuine matches.
    """
    pa, da = _descriptors(_as_gray(a))
    if isinstance(b, Volume):
        pb, db = _volume_descriptors(b)
        pb3 = pb
    else:
        pb, db = _descriptors(_as_gray(b))
        pb3 = np.column_stack([pb, np.zeros(len(pb))]) if len(pb) else np.zeros((0, 3))
    if len(pa) == 0 or len(pb3) < 2:
        return []
    d2 = np.maximum(2.0 - 2.0 * (da @ db.T), 0.0)  # squared distance on unit vectors
    matches = []
    for i in range(len(pa)):
        row = d2[i]
        j = int(np.argmin(row))
        best = row[j]
        near = (
            (np.abs(pb3[:, 2] - pb3[j, 2]) <= 2)
            & (np.abs(pb3[:, 0] - pb3[j, 0]) <= 4)
            & (np.abs(pb3[:, 1] - pb3[j, 1]) <= 4)
        )
        rest = row[~near]
        second = rest.min() if rest.size else np.inf
        if np.sqrt(best) < ratio * np.sqrt(second):
            corr = 1.0 - best / 2.0
            matches.append(
                Match3D(p2=tuple(pa[i]), p3=tuple(pb3[j]), score=max(corr, 0.0))
            )
    return matches


# ---------------------------------------------------------------------------
# Serial stacks
# ---------------------------------------------------------------------------

def _pairwise_transform(sec_a, sec_b, matcher, label):
    matches = matcher(sec_a, sec_b)
    if len(matches) < 2:
        raise ValueError(f"matcher returned {len(matches)} pair(s) for sections {label}")
    pairs = [(m.p2, m.p3[:2]) for m in matches]
    return ransac_similarity(pairs)


def register_serial_stack(sections, matcher=None):
    """Align every section to the middle reference by chaining adjacent transforms."""
    if not sections:
        raise ValueError("empty section stack")
    matcher = matcher or match_features
    mid = len(sections) // 2
    transforms = [None] * len(sections)
    transforms[mid] = SimilarityTransform2D()
    for i in range(mid - 1, -1, -1):
        t = _pairwise_transform(sections[i], sections[i + 1], matcher, f"({i},{i + 1})")
        transforms[i] = transforms[i + 1].compose(t)
    for i in range(mid + 1, len(sections)):
        t = _pairwise_transform(sections[i], sections[i - 1], matcher, f"({i},{i - 1})")
        transforms[i] = transforms[i - 1].compose(t)
    return transforms


def register_section_to_volume(section, volume, n_iters=2000, inlier_thresh_vox=2.0,
                               seed=0, matcher=None):
    """Full cross-modal chain: matches, plane, virtual plane, in-plane alignment."""
    matcher = matcher or match_features
    matches = matcher(section, volume)
    if len(matches) < 3:
        raise ValueError(f"only {len(matches)} section-volume matches; need >= 3")
    plane, inliers = fit_plane_ransac(
        matches, n_iters=n_iters, inlier_thresh_vox=inlier_thresh_vox, seed=seed
    )
    virtual, grid = extract_virtual_plane(volume, plane)
    inplane = matcher(section, virtual)
    if len(inplane) < 2:
        raise ValueError("too few matches between section and virtual plane")
    transform = ransac_similarity([(m.p2, m.p3[:2]) for m in inplane], seed=seed)
    pts = np.array([m.p3 for m in matches], dtype=np.float64)
    rmse = float(np.sqrt(np.mean(plane.distance(pts[inliers]) ** 2))) if inliers else 0.0
    return RegistrationResult(
        plane=plane,
        transform=transform,
        inlier_count=len(inliers),
        inlier_rmse_vox=rmse,
        grid=grid,
    )


# ---------------------------------------------------------------------------
# Match CSV interchange
# ---------------------------------------------------------------------------

def save_matches(matches, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["u", "v", "x", "y", "z", "score"])
        for m in matches:
            writer.writerow([repr(float(c)) for c in (*m.p2, *m.p3, m.score)])


def load_matches(path):
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["u", "v", "x", "y", "z", "score"]:
            raise ValueError("bad match CSV header")
        for row in reader:
            if not row:
                continue
            u, v, x, y, z, s = (float(c) for c in row)
            out.append(Match3D(p2=(u, v), p3=(x, y, z), score=s))
    return out
