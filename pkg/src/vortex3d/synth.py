"""Synthetic desk-scale cohorts with known morphomolecular rules.

Volumes contain three labeled tissue classes (stroma / gland / tumor) drawn
from smoothed random fields, plus bright spherical inclusions scattered in
3D. Expression rules map morphology to counts:

  planar rules   - functions of the spot's central plane only (intensity,
                   texture, tumor / gland content); learnable from 2D.
  depth rules    - inclusion mass across the full 21-plane window; the
                   central plane carries only partial information, so depth
                   context is provably worth R^2 on these genes.
  shifted rules  - genes whose morphology association flips inside the
                   volume of interest, so only VOI fine-tuning can predict
                   their held-out pattern.

Each ST-bearing section is emitted as a separately jittered (rotated +
translated) image of its volume plane, with spot coordinates in the
section frame, so the registration chain is exercised for real.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter

from .store import (
    GenePanel,
    Modality,
    SectionImage,
    SpotTable,
    Volume,
    save_panel,
    save_section,
    save_spot_table,
    save_volume,
)

LABEL_STROMA, LABEL_GLAND, LABEL_TUMOR = 0, 1, 2

PLANAR_GENES = ("BRT1", "BRT2", "TEX1", "TEX2", "TUM1", "TUM2", "MKTUM",
                "GLD1", "MKGLD")
DEPTH_GENES = ("DEP1", "DEP2", "DEP3", "DEP4")
SHIFT_GENES = ("VSH1", "VSH2")
HOUSEKEEPING = ("HK1", "HK2")
MARKER_GENES = ("MKTUM", "MKGLD")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    rule_set: str = "full"  # "planar" | "full"
    n_cohort_volumes: int = 2
    n_public_sections: int = 2
    vol_dims: tuple = (176, 176, 44)
    spacing_um: float = 4.0
    section_planes: tuple = (16, 28)
    spot_pitch_vox: int = 10
    patch_edge: int = 112
    noise_level: float = 0.0
    jitter_rot_deg: float = 2.0
    jitter_trans_px: float = 4.0
    blob_count: int = 110
    blob_radius: tuple = (4.0, 7.0)
    voi_id: str = "voi"

    def __post_init__(self):
        if self.rule_set not in ("planar", "full"):
            raise ValueError("rule_set must be 'planar' or 'full'")
        nx, ny, nz = self.vol_dims
        if nx < self.patch_edge or ny < self.patch_edge:
            raise ValueError("volume planar dims must fit one patch")
        half = 10
        for z in self.section_planes:
            if not (half <= z < nz - half):
                raise ValueError(f"section plane {z} too close to volume face")


def gene_names(rule_set="full"):
    genes = list(HOUSEKEEPING) + list(PLANAR_GENES)
    if rule_set == "full":
        genes += list(DEPTH_GENES) + list(SHIFT_GENES)
    return genes


def rule_gene_names(rule_set="full"):
    """All genes whose counts are driven by a morphology rule."""
    genes = list(PLANAR_GENES)
    if rule_set == "full":
        genes += list(DEPTH_GENES) + list(SHIFT_GENES)
    return genes


# ---------------------------------------------------------------------------
# Volume construction
# ---------------------------------------------------------------------------

def _smooth_field(rng, dims, sigma):
    f = gaussian_filter(rng.random(dims), sigma)
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo + 1e-12)


def _add_balls(rng, target, count, radius_range, amp_fn, hard=False):
    nx, ny, nz = target.shape
    for _ in range(count):
        cx, cy, cz = rng.uniform(0, nx), rng.uniform(0, ny), rng.uniform(0, nz)
        r = rng.uniform(*radius_range)
        x0, x1 = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, nx)
        y0, y1 = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, ny)
        z0, z1 = max(int(cz - r) - 1, 0), min(int(cz + r) + 2, nz)
        xs = np.arange(x0, x1)[:, None, None]
        ys = np.arange(y0, y1)[None, :, None]
        zs = np.arange(z0, z1)[None, None, :]
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2 + (zs - cz) ** 2
        if hard:
            target[x0:x1, y0:y1, z0:z1][d2 <= r * r] = amp_fn(rng)
        else:
            target[x0:x1, y0:y1, z0:z1] += amp_fn(rng) * np.exp(-d2 / (2 * (r / 2) ** 2))


def _make_tissue(rng, cfg):
    """Returns (structure01, labels, blob_mask, imaged01) for one volume.

    Expression rules read the structural layer; the imaged layer adds fine
    grain and nucleus-like speckles that give the feature matcher reliable
    landmarks without entering any rule. Planar-rule cohorts carry no
    inclusions, so the three tissue classes are exactly recoverable from
    plane brightness and contrast.
    """
    dims = cfg.vol_dims
    gland_f = _smooth_field(rng, dims, (10.0, 10.0, 6.0))
    tumor_f = _smooth_field(rng, dims, (8.0, 8.0, 5.0))
    labels = np.full(dims, LABEL_STROMA, dtype=np.uint8)
    # quantile thresholds keep every class well represented in each volume
    labels[gland_f > np.quantile(gland_f, 0.62)] = LABEL_GLAND
    labels[tumor_f > np.quantile(tumor_f, 0.72)] = LABEL_TUMOR
    structure = np.full(dims, 0.30)
    structure[labels == LABEL_GLAND] = 0.72
    structure[labels == LABEL_TUMOR] = 0.50
    # tumor is textured: high-frequency grain confined to tumor voxels;
    # grain is kept coherent across a couple of planes so fractional-depth
    # resampling does not destroy it
    grain = gaussian_filter(rng.standard_normal(dims), (1.0, 1.0, 2.0))
    structure += 0.22 * grain * (labels == LABEL_TUMOR)
    structure += 0.03 * gaussian_filter(rng.standard_normal(dims), 3.0)

    blob_mask = np.zeros(dims, dtype=np.float32)
    n_blobs = cfg.blob_count if cfg.rule_set == "full" else 0
    _add_balls(rng, blob_mask, n_blobs, cfg.blob_radius, lambda r: 1.0, hard=True)
    structure += 0.25 * blob_mask

    imaged = structure.copy()
    imaged += 0.05 * gaussian_filter(rng.standard_normal(dims), (0.9, 0.9, 2.2))
    _add_balls(rng, imaged, 300, (1.5, 2.6),
               lambda r: float(r.choice([-0.10, 0.10])))

    structure = np.clip(structure, 0.0, 1.2) / 1.2
    imaged = np.clip(imaged, 0.0, 1.2) / 1.2
    return (structure.astype(np.float32), labels, blob_mask,
            imaged.astype(np.float32))


def _to_microct(intensity01):
    """Map [0,1] intensities onto a plausible raw scanner range."""
    return (26000.0 + intensity01 * 38000.0).astype(np.float32)


def renormalize(intensity_raw):
    """The [0,1] view of raw intensities the rules are defined on."""
    return (np.clip(intensity_raw, 26000.0, 64000.0) - 26000.0) / 38000.0


# ---------------------------------------------------------------------------
# Expression rules
# ---------------------------------------------------------------------------

def _window(arr, cx, cy, z0, z1, half):
    return arr[cx - half : cx + half, cy - half : cy + half, z0:z1]


def spot_features(intensity01, labels, blob_mask, cx, cy, z, patch_edge=112):
    """Morphology features of the (cx, cy, z)-centered spot window.

    Texture is local contrast: the mean standard deviation of 8x8 blocks,
    the same granularity the patch featurizer summarizes.
    """
    half = patch_edge // 2
    plane = _window(intensity01, cx, cy, z, z + 1, half)[:, :, 0]
    n_blk = plane.shape[0] // 8
    blocks = plane[: n_blk * 8, : n_blk * 8].reshape(n_blk, 8, n_blk, 8)
    contrast = blocks.std(axis=(1, 3)).mean()
    lab_plane = _window(labels, cx, cy, z, z + 1, half)[:, :, 0]
    z0, z1 = max(z - 10, 0), z + 11
    feats = {
        "bright": float(plane.mean()),
        "tex": float(contrast),
        "tum": float((lab_plane == LABEL_TUMOR).mean()),
        "gld": float((lab_plane == LABEL_GLAND).mean()),
        "blob2d": float(_window(blob_mask, cx, cy, z, z + 1, half).mean()),
        "dep": float(_window(blob_mask, cx, cy, z0, z1, half).mean()),
    }
    return feats


_AMPLITUDES = {
    "BRT1": ("bright", 260.0, 6.0),
    "BRT2": ("bright", 180.0, 12.0),
    "TEX1": ("tex", 5200.0, 6.0),
    "TEX2": ("tex", 3800.0, 12.0),
    "TUM1": ("tum", 300.0, 5.0),
    "TUM2": ("tum", 220.0, 10.0),
    "MKTUM": ("tum", 340.0, 4.0),
    "GLD1": ("gld", 300.0, 5.0),
    "MKGLD": ("gld", 260.0, 8.0),
    "DEP1": ("dep", 900.0, 5.0),
    "DEP2": ("dep", 650.0, 10.0),
    "DEP3": ("dep", 1100.0, 4.0),
    "DEP4": ("dep", 800.0, 8.0),
    "VSH1": ("gld", 320.0, 5.0),
    "VSH2": ("gld", 260.0, 9.0),
}


def spot_counts(feats, rule_set, in_voi, rng, noise_level=0.0):
    """Counts vector over the configured gene panel for one spot.

    Housekeeping counts dominate the library total so per-spot
    normalization keeps each rule gene's fraction proportional to its rule.
    """
    counts = {"HK1": 12000.0, "HK2": 8000.0}
    for gene in rule_gene_names(rule_set):
        feat_name, amp, base = _AMPLITUDES[gene]
        value = feats[feat_name]
        if gene in SHIFT_GENES and in_voi:
            value = max(0.0, 1.0 - feats["gld"] - feats["tum"])  # flipped link
        counts[gene] = base + amp * value
    if noise_level > 0:
        for gene in counts:
            fuzz = rng.normal(1.0, noise_level)
            counts[gene] = max(counts[gene] * fuzz, 0.0)
    return np.array([counts[g] for g in gene_names(rule_set)])


# ---------------------------------------------------------------------------
# Section + spot emission
# ---------------------------------------------------------------------------

def _spot_grid(cfg):
    nx, ny, _ = cfg.vol_dims
    half = cfg.patch_edge // 2
    xs = np.arange(half, nx - half + 1, cfg.spot_pitch_vox)
    ys = np.arange(half, ny - half + 1, cfg.spot_pitch_vox)
    return [(int(x), int(y)) for x in xs for y in ys]


def _jitter_transform(rng, cfg):
    theta = np.radians(rng.uniform(-cfg.jitter_rot_deg, cfg.jitter_rot_deg))
    tx, ty = rng.uniform(-cfg.jitter_trans_px, cfg.jitter_trans_px, 2)
    return theta, (float(tx), float(ty))


def _warp_plane(plane_xy, theta, trans, center):
    """Section image: section(u, v) = plane(R(u, v - c) + c + t)."""
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    center = np.asarray(center)
    offset = center + np.asarray(trans) - rot @ center
    # operate on (x, y)-indexed arrays; affine_transform maps output->input
    out = affine_transform(plane_xy, rot, offset=offset, order=1,
                           mode="constant", cval=plane_xy.min())
    return out, rot, offset


def _section_frame_coords(voxel_xy, rot, offset):
    """Invert the warp: voxel (x, y) -> section pixel (u, v)."""
    inv = np.linalg.inv(rot)
    return (inv @ (np.asarray(voxel_xy, dtype=np.float64) - offset))


# ---------------------------------------------------------------------------
# Cohort generation
# ---------------------------------------------------------------------------

def generate_cohort(cfg, out_dir):
    """Write a full cohort to disk; returns the manifest dictionary.

    Byte-identical for identical (config, seed).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    genes = gene_names(cfg.rule_set)
    panel = GenePanel(genes=genes, kind="UNION")
    save_panel(panel, out / "panel.json")
    root_seq = np.random.SeedSequence(cfg.seed)
    source_ids = [f"vol{i}" for i in range(cfg.n_cohort_volumes)] + [cfg.voi_id] + [
        f"public{i}" for i in range(cfg.n_public_sections)
    ]
    seeds = root_seq.spawn(len(source_ids))
    sources = []
    for batch_id, (source_id, seq) in enumerate(zip(source_ids, seeds)):
        rng = np.random.default_rng(seq)
        is_volume = not source_id.startswith("public")
        in_voi = source_id == cfg.voi_id
        structure01, labels, blob_mask, imaged01 = _make_tissue(rng, cfg)
        entry = {"source_id": source_id, "batch_id": batch_id,
                 "kind": "volume" if is_volume else "section", "sections": []}
        src_dir = out / source_id
        src_dir.mkdir(exist_ok=True)
        if is_volume:
            vol = Volume(dims=cfg.vol_dims, spacing_um=(cfg.spacing_um,) * 3,
                         voxels=_to_microct(imaged01), modality=Modality.MICROCT)
            save_volume(vol, src_dir / "volume.raw")
            mask_vol = Volume(dims=cfg.vol_dims, spacing_um=(cfg.spacing_um,) * 3,
                              voxels=labels, modality=Modality.OTHER)
            save_volume(mask_vol, src_dir / "mask.raw")
            entry["volume_path"] = f"{source_id}/volume.raw"
            entry["mask_path"] = f"{source_id}/mask.raw"
            planes = list(cfg.section_planes)
        else:
            planes = [cfg.section_planes[0]]
        for z in planes:
            section_id = f"{source_id}_z{z}"
            plane = imaged01[:, :, z]
            if is_volume:
                theta, trans = _jitter_transform(rng, cfg)
            else:
                theta, trans = 0.0, (0.0, 0.0)
            center = ((cfg.vol_dims[0] - 1) / 2.0, (cfg.vol_dims[1] - 1) / 2.0)
            warped_xy, rot, offset = _warp_plane(plane, theta, trans, center)
            section = SectionImage(
                dims=(cfg.vol_dims[0], cfg.vol_dims[1]),
                spacing_um=cfg.spacing_um,
                pixels=warped_xy.T.astype(np.float32),  # (y, x) image layout
                section_id=section_id,
                depth_um=z * cfg.spacing_um,
            )
            save_section(section, src_dir / f"{section_id}.raw")
            spot_ids, xs_um, ys_um, rows, true_vox = [], [], [], [], []
            for i, (cx, cy) in enumerate(_spot_grid(cfg)):
                feats = spot_features(structure01, labels, blob_mask, cx, cy, z,
                                      cfg.patch_edge)
                counts = spot_counts(feats, cfg.rule_set, in_voi, rng,
                                     cfg.noise_level)
                u, v = _section_frame_coords((cx, cy), rot, offset)
                spot_ids.append(f"{section_id}_s{i:03d}")
                xs_um.append(float(u * cfg.spacing_um))
                ys_um.append(float(v * cfg.spacing_um))
                rows.append(counts)
                true_vox.append((cx, cy, z))
            table = SpotTable(
                panel=panel,
                spot_ids=spot_ids,
                section_ids=[section_id] * len(spot_ids),
                x_um=np.array(xs_um),
                y_um=np.array(ys_um),
                counts=np.array(rows),
                batch_ids=np.full(len(spot_ids), batch_id, dtype=np.int64),
            )
            save_spot_table(table, src_dir / f"{section_id}_spots.csv")
            entry["sections"].append(
                {
                    "section_id": section_id,
                    "plane_z": int(z),
                    "image_path": f"{source_id}/{section_id}.raw",
                    "spots_path": f"{source_id}/{section_id}_spots.csv",
                    "true_voxels": [[int(a), int(b), int(c)] for a, b, c in true_vox],
                    "jitter": {"theta_rad": float(theta),
                               "trans_px": list(trans)},
                }
            )
        sources.append(entry)
    manifest = {
        "seed": cfg.seed,
        "config": asdict(cfg),
        "genes": genes,
        "markers": list(MARKER_GENES),
        "rule_genes": {
            "planar": list(PLANAR_GENES),
            "depth": list(DEPTH_GENES) if cfg.rule_set == "full" else [],
            "shift": list(SHIFT_GENES) if cfg.rule_set == "full" else [],
        },
        "pitch_um": cfg.spot_pitch_vox * cfg.spacing_um,
        "spacing_um": cfg.spacing_um,
        "voi_id": cfg.voi_id,
        "n_batches": len(source_ids),
        "sources": sources,
    }
    with open(out / "cohort.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest
