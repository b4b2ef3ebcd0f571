"""End-to-end orchestration: cohort ingest, preprocessing, registration,
staged training, prediction, evaluation, domains, retrieval, and export.

Every step is deterministic given (config, seed); steps executed through
the pipeline runner are cached by content digest and skipped on re-runs.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (
    build_molecular_query,
    kmeans,
    rank_patches,
    save_heatmap,
    similarity_heatmap,
)
from .evaluation import ari, compute_metrics, knn_weights
from .model import LossWeights, ModelConfig, encode_transcriptome, patch_stats
from .preprocess import (
    bin_expression,
    extract_patch,
    filter_spots,
    normalize_expression,
    normalize_volume,
    select_input_genes,
    smooth_expression,
    tile_grid,
)
from .registration import map_spots_to_volume, register_section_to_volume
from .store import (
    config_digest,
    load_checkpoint,
    load_panel,
    load_section,
    load_spot_table,
    load_volume,
    save_checkpoint,
)
from .training import (
    StageConfig,
    TrainSample,
    domain_embed_from_stats,
    predict_from_stats,
    train_stage1,
    train_stage2,
    train_stage3,
    unpack_checkpoint,
)

SCENARIOS = ("S2D", "S3D", "S3D_VOI")


def thread_count(threads=None):
    """Worker cap: explicit argument, then VORTEX_THREADS, then 1."""
    if threads is not None:
        return max(int(threads), 1)
    return max(int(os.environ.get("VORTEX_THREADS", "1")), 1)


def map_ordered(fn, items, threads=1):
    """Order-preserving parallel map; results independent of worker count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def _interpolate_env(obj):
    if isinstance(obj, str):
        return os.path.expandvars(obj)
    if isinstance(obj, list):
        return [_interpolate_env(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _interpolate_env(v) for k, v in obj.items()}
    return obj


DESK_MODEL = dict(
    d_token=32, d_embed=16, pool_heads=4, n_rec_queries=8, tx_layers=1,
    tx_heads=4, tx_mlp_ratio=2, pred_heads=4, pred_mlp_ratio=2, da_hidden=16,
    n_bins=21,
)

DESK_STAGES = {
    "I": dict(batch_size=64, epochs=30, warmup_epochs=3, peak_lr=2e-3),
    "II": dict(batch_size=32, epochs=15, warmup_epochs=0, peak_lr=1.5e-3),
    "III": dict(batch_size=16, epochs=12, warmup_epochs=0, peak_lr=5e-4),
}


@dataclass
class RunConfig:
    cohort_root: str
    out_dir: str
    seed: int = 0
    threads: int | None = None
    scenario: str = "S3D"
    voi_id: str | None = None
    preprocess: dict = field(default_factory=dict)
    registration: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    domains: dict = field(default_factory=dict)
    export: dict = field(default_factory=dict)
    query: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, path, overrides=None):
        with open(path) as f:
            doc = _interpolate_env(json.load(f))
        doc.update(overrides or {})
        known = {f_.name for f_ in cls.__dataclass_fields__.values()}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def model_config(self):
        return ModelConfig(**{**DESK_MODEL, **self.model})

    def loss_weights(self, depth_mode="D21"):
        base = dict(lambda_cont=1.0, lambda_rec=1.0, lambda_da=0.1,
                    lambda_dir=0.0 if depth_mode == "D3" else 1.0,
                    tau=0.1, tau_convention="DIVIDE")
        base.update(self.loss)
        return LossWeights(**base)

    def stage_config(self, stage, depth_mode="D21"):
        base = dict(DESK_STAGES[stage])
        base.update(self.stages.get(stage, {}))
        base.setdefault("seed", self.seed)
        return StageConfig(stage=stage, depth_mode=depth_mode,
                           loss_weights=self.loss_weights(depth_mode), **base)

    def preprocess_params(self):
        p = dict(min_genes=5, max_mito_frac=0.2, mito_prefix="MT-",
                 target_sum=10000.0, smooth=True, smooth_k=4,
                 n_hvg_input=1200, n_bins=None)
        p.update(self.preprocess)
        if p["n_bins"] is None:
            p["n_bins"] = self.model_config().n_bins
        return p

    def digest(self, subtree=None):
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if subtree:
            doc = {k: doc.get(k) for k in subtree}
        return config_digest(doc)


# ---------------------------------------------------------------------------
# Cohort loading
# ---------------------------------------------------------------------------

@dataclass
class SectionData:
    section_id: str
    plane_z: int | None
    image: object  # SectionImage
    table: object  # raw SpotTable
    source_id: str
    batch_id: int


@dataclass
class SourceData:
    source_id: str
    batch_id: int
    kind: str  # "volume" | "section"
    volume: object | None
    mask: object | None
    sections: list


@dataclass
class Cohort:
    root: Path
    manifest: dict
    panel: object
    markers: tuple
    pitch_um: float
    spacing_um: float
    voi_id: str
    sources: list

    def source(self, source_id):
        for s in self.sources:
            if s.source_id == source_id:
                return s
        raise KeyError(f"unknown source {source_id!r}")

    def all_sections(self):
        return [sec for src in self.sources for sec in src.sections]

    def section(self, section_id):
        for sec in self.all_sections():
            if sec.section_id == section_id:
                return sec
        raise KeyError(f"unknown section {section_id!r}")


def load_cohort(root):
    root = Path(root)
    with open(root / "cohort.json") as f:
        manifest = json.load(f)
    panel = load_panel(root / "panel.json")
    sources = []
    for entry in manifest["sources"]:
        volume = mask = None
        if entry["kind"] == "volume":
            volume = normalize_volume(load_volume(root / entry["volume_path"]))
            if entry.get("mask_path"):
                mask = load_volume(root / entry["mask_path"])
        sections = []
        for s in entry["sections"]:
            sections.append(
                SectionData(
                    section_id=s["section_id"],
                    plane_z=s.get("plane_z"),
                    image=load_section(root / s["image_path"]),
                    table=load_spot_table(root / s["spots_path"], panel),
                    source_id=entry["source_id"],
                    batch_id=entry["batch_id"],
                )
            )
        sources.append(
            SourceData(
                source_id=entry["source_id"],
                batch_id=entry["batch_id"],
                kind=entry["kind"],
                volume=volume,
                mask=mask,
                sections=sections,
            )
        )
    return Cohort(
        root=root,
        manifest=manifest,
        panel=panel,
        markers=tuple(manifest.get("markers", ())),
        pitch_um=float(manifest.get("pitch_um", 100.0)),
        spacing_um=float(manifest.get("spacing_um", 4.0)),
        voi_id=manifest.get("voi_id", ""),
        sources=sources,
    )


# ---------------------------------------------------------------------------
# Preprocessing (expression side)
# ---------------------------------------------------------------------------

@dataclass
class PreparedSection:
    section_id: str
    matrix: object  # ExpressionMatrix (filtered, normalized, smoothed)
    bins: np.ndarray  # (n_spots, n_input_genes)
    spot_ids: tuple
    batch_id: int
    source_id: str


@dataclass
class PreparedCohort:
    sections: dict  # section_id -> PreparedSection
    input_gene_indices: np.ndarray
    input_gene_symbols: tuple
    n_batches: int


def preprocess_cohort(cohort, params=None):
    """Filter, normalize, smooth and bin every section consistently.

    The encoder input gene set is chosen once from the pooled matrix over
    all sections, then applied per section.
    """
    p = params or {}
    min_genes = p.get("min_genes", 5)
    max_mito = p.get("max_mito_frac", 0.2)
    mito_prefix = p.get("mito_prefix", "MT-")
    target = p.get("target_sum", 10000.0)
    smooth = p.get("smooth", True)
    smooth_k = p.get("smooth_k", 4)
    n_hvg = p.get("n_hvg_input", 1200)
    n_bins = p.get("n_bins", 21)

    matrices = {}
    for sec in cohort.all_sections():
        table = filter_spots(sec.table, min_genes=min_genes,
                             max_mito_frac=max_mito, mito_prefix=mito_prefix)
        if table.n_spots == 0:
            warnings.warn(f"section {sec.section_id}: no spots survive filtering")
            continue
        m = normalize_expression(table, target_sum=target)
        if smooth and m.n_spots > 1:
            m = smooth_expression(m, k=smooth_k)
        matrices[sec.section_id] = m

    pooled = np.vstack([m.values for m in matrices.values()])
    pooled_matrix = next(iter(matrices.values()))
    from dataclasses import replace

    pooled_matrix = replace(pooled_matrix, values=pooled,
                            spot_ids=[f"p{i}" for i in range(pooled.shape[0])],
                            section_ids=["pooled"] * pooled.shape[0],
                            x_um=np.zeros(pooled.shape[0]),
                            y_um=np.zeros(pooled.shape[0]))
    gene_idx = select_input_genes(pooled_matrix, n_hvg)

    sections = {}
    for sec in cohort.all_sections():
        if sec.section_id not in matrices:
            continue
        m = matrices[sec.section_id]
        binned = bin_expression(m, n_bins=n_bins, gene_indices=gene_idx)
        sections[sec.section_id] = PreparedSection(
            section_id=sec.section_id,
            matrix=m,
            bins=binned.bins,
            spot_ids=m.spot_ids,
            batch_id=sec.batch_id,
            source_id=sec.source_id,
        )
    return PreparedCohort(
        sections=sections,
        input_gene_indices=gene_idx,
        input_gene_symbols=tuple(cohort.panel.genes[i] for i in gene_idx),
        n_batches=int(cohort.manifest.get("n_batches",
                                          max(s.batch_id for s in cohort.sources) + 1)),
    )


# ---------------------------------------------------------------------------
# Registration (volume sources)
# ---------------------------------------------------------------------------

def register_cohort(cohort, params=None, threads=1):
    """Register every ST section of every volume source; returns
    section_id -> (RegistrationResult, {spot_id: (x, y, z)})."""
    p = params or {}

    def _register(item):
        src, sec = item
        # sub-plane inlier threshold: matches from adjacent planes (coherent
        # texture along z) otherwise bias the plane refit off the section
        result = register_section_to_volume(
            sec.image, src.volume,
            n_iters=p.get("n_iters", 800),
            inlier_thresh_vox=p.get("inlier_thresh_vox", 0.75),
            seed=p.get("seed", 0),
        )
        mapped = map_spots_to_volume(sec.table, result,
                                     section_spacing_um=sec.image.spacing_um)
        coords = {m.spot_id: m.voxel for m in mapped if m.inside}
        dropped = [m.spot_id for m in mapped if not m.inside]
        if dropped:
            warnings.warn(f"{sec.section_id}: {len(dropped)} spot(s) map outside "
                          "the volume and are excluded")
        return sec.section_id, (result, coords)

    items = [(src, sec) for src in cohort.sources if src.kind == "volume"
             for sec in src.sections]
    return dict(map_ordered(_register, items, threads))


# ---------------------------------------------------------------------------
# Sample assembly
# ---------------------------------------------------------------------------

def _section_patch_stats(sec_image, px, py):
    patch = extract_patch(sec_image, (px, py), dims=(112, 112, 1))
    return patch_stats(patch.data)


def _volume_patch_stats(volume, voxel, depth):
    patch = extract_patch(volume, voxel, dims=(112, 112, depth))
    return patch_stats(patch.data)


def build_samples(cohort, prep, registrations, depth=21, include=None,
                  threads=1):
    """TrainSample list for the requested sources.

    Volume-source samples carry both planar (d=1) and volumetric (d=depth)
    statistics at the registered voxel; section-only sources carry planar
    statistics from the section image.
    """
    include = set(include) if include is not None else None
    jobs = []
    for src in cohort.sources:
        if include is not None and src.source_id not in include:
            continue
        for sec in src.sections:
            ps = prep.sections.get(sec.section_id)
            if ps is None:
                continue
            if src.kind == "volume":
                _, coords = registrations[sec.section_id]
            else:
                coords = None
            for i, spot_id in enumerate(ps.spot_ids):
                jobs.append((src, sec, ps, i, spot_id, coords))

    def _make(job):
        src, sec, ps, i, spot_id, coords = job
        y = ps.matrix.values[i]
        bins = ps.bins[i]
        if src.kind == "volume":
            if spot_id not in coords:
                return None
            voxel = tuple(int(round(c)) for c in coords[spot_id])
            stats2d = _volume_patch_stats(src.volume, voxel, 1)
            stats3d = _volume_patch_stats(src.volume, voxel, depth)
        else:
            px = int(round(ps.matrix.x_um[i] / sec.image.spacing_um))
            py = int(round(ps.matrix.y_um[i] / sec.image.spacing_um))
            stats2d = _section_patch_stats(sec.image, px, py)
            stats3d = None
        return TrainSample(
            spot_id=spot_id,
            section_id=sec.section_id,
            bins=bins,
            y=y,
            batch_id=ps.batch_id,
            stats2d=stats2d,
            stats3d=stats3d,
            depth3d=depth,
        )

    samples = map_ordered(_make, jobs, threads)
    return [s for s in samples if s is not None]


# ---------------------------------------------------------------------------
# Scenario running
# ---------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    scenario: str
    reports: list
    checkpoints: dict  # stage -> Checkpoint
    train_reports: dict

    def mean_pcc(self):
        vals = [r.aggregates["pcc"]["all"] for r in self.reports
                if r.aggregates["pcc"]["all"] is not None]
        return float(np.mean(vals)) if vals else float("nan")


def _evaluate_section(cohort, prep, registrations, params, model_cfg, sec_id,
                      depth, scenario, domains_k=None, seed=0, threads=1):
    sec = cohort.section(sec_id)
    src = cohort.source(sec.source_id)
    ps = prep.sections[sec_id]
    _, coords = registrations[sec_id]
    keep = [i for i, s in enumerate(ps.spot_ids) if s in coords]
    spot_ids = [ps.spot_ids[i] for i in keep]
    voxels = [tuple(int(round(c)) for c in coords[s]) for s in spot_ids]
    stats = np.stack(map_ordered(
        lambda v: _volume_patch_stats(src.volume, v, depth), voxels, threads))
    yhat = predict_from_stats(params, stats, depth, model_cfg, path="3d")
    gt = ps.matrix.values[keep]
    coords_xy = np.array([(v[0] * cohort.spacing_um, v[1] * cohort.spacing_um)
                          for v in voxels])
    pitch = cohort.manifest.get("pitch_um", cohort.pitch_um)
    ari_rows = []
    if domains_k and src.mask is not None:
        emb = domain_embed_from_stats(params, stats, depth, model_cfg, path="3d")
        dom = kmeans(emb, domains_k, seed=seed)
        truth = np.array([int(src.mask.voxels[v[0], v[1], v[2]]) for v in voxels])
        if len(np.unique(truth)) > 1:
            ari_rows.append({"section_id": sec_id,
                             "ari": ari(dom.labels, truth)})
    report = compute_metrics(
        gt, yhat, coords_xy, pitch, ps.matrix.panel, markers=cohort.markers,
        weights=knn_weights(coords_xy, k=min(6, len(coords_xy) - 1)),
        scenario=scenario, section_id=sec_id,
        ari_per_plane=ari_rows,
    )
    return report, yhat, spot_ids


def run_scenario(scenario, cohort, voi_id=None, config=None, prep=None,
                 registrations=None, stage_cache=None):
    """Execute one evaluation scenario end to end; returns ScenarioResult.

    Stage sequence: planar pretraining on all non-VOI sources, volumetric
    training (depth 1 for S2D, else 21) on non-VOI volume sources, then for
    S3D_VOI a fine-tuning pass per VOI section with the other section held
    out ("roles switched").
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    config = config or RunConfig(cohort_root=str(cohort.root), out_dir="")
    voi_id = voi_id or config.voi_id or cohort.voi_id
    threads = thread_count(config.threads)
    model_cfg = config.model_config()
    if prep is None:
        prep = preprocess_cohort(cohort, config.preprocess_params())
    if registrations is None:
        registrations = register_cohort(cohort, config.registration, threads)
    gene_idx = np.arange(len(prep.input_gene_indices))

    non_voi = [s.source_id for s in cohort.sources if s.source_id != voi_id]
    volume_non_voi = [s.source_id for s in cohort.sources
                      if s.source_id != voi_id and s.kind == "volume"]
    depth = 1 if scenario == "S2D" else 21
    depth_mode = "D1" if depth == 1 else "D21"
    stage_cache = stage_cache if stage_cache is not None else {}

    key1 = ("I",)
    if key1 not in stage_cache:
        samples1 = build_samples(cohort, prep, registrations, depth=21,
                                 include=non_voi, threads=threads)
        cfg1 = config.stage_config("I", "D1")
        ck1, rep1 = train_stage1(samples1, cfg1, model_cfg,
                                 n_batches=prep.n_batches, gene_indices=gene_idx)
        stage_cache[key1] = (ck1, rep1, samples1)
    ck1, rep1, samples1 = stage_cache[key1]

    key2 = ("II", depth_mode)
    if key2 not in stage_cache:
        vol_samples = [s for s in samples1 if s.stats3d is not None]
        if depth == 1:
            vol_samples = [
                TrainSample(spot_id=s.spot_id, section_id=s.section_id,
                            bins=s.bins, y=s.y, batch_id=s.batch_id,
                            stats2d=s.stats2d, stats3d=s.stats2d, depth3d=1)
                for s in vol_samples
            ]
        cfg2 = config.stage_config("II", depth_mode)
        ck2, rep2 = train_stage2(vol_samples, ck1, cfg2, model_cfg,
                                 gene_indices=gene_idx)
        stage_cache[key2] = (ck2, rep2)
    ck2, rep2 = stage_cache[key2]

    checkpoints = {"I": ck1, "II": ck2}
    train_reports = {"I": rep1, "II": rep2}
    reports = []
    domains_k = config.domains.get("k", 3)
    voi_src = cohort.source(voi_id)
    voi_sections = [sec.section_id for sec in voi_src.sections
                    if sec.section_id in prep.sections]

    if scenario in ("S2D", "S3D"):
        params = unpack_checkpoint(ck2)
        for sec_id in voi_sections:
            rep, _, _ = _evaluate_section(
                cohort, prep, registrations, params, model_cfg, sec_id, depth,
                scenario, domains_k=domains_k, seed=config.seed, threads=threads,
            )
            reports.append(rep)
    else:  # S3D_VOI
        if len(voi_sections) < 2:
            warnings.warn(
                "S3D_VOI needs two VOI sections to swap roles; running the "
                "single available direction against the volume's other data"
            )
        directions = []
        if len(voi_sections) >= 2:
            directions = [(voi_sections[0], voi_sections[1]),
                          (voi_sections[1], voi_sections[0])]
        elif voi_sections:
            raise ValueError(
                "S3D_VOI with a single VOI section cannot hold out an "
                "evaluation section without leakage"
            )
        for ft_id, ev_id in directions:
            ft_samples = build_samples(cohort, prep, registrations, depth=21,
                                       include=[voi_id], threads=threads)
            ft_samples = [s for s in ft_samples if s.section_id == ft_id]
            cfg3 = config.stage_config("III", "D21")
            eval_keys = [(ev_id, sid) for sid in prep.sections[ev_id].spot_ids]
            ck3, rep3 = train_stage3(ft_samples, ck2, cfg3, model_cfg,
                                     gene_indices=gene_idx,
                                     eval_section_ids=[ev_id],
                                     eval_spot_keys=eval_keys)
            params = unpack_checkpoint(ck3)
            rep, _, _ = _evaluate_section(
                cohort, prep, registrations, params, model_cfg, ev_id, depth,
                scenario, domains_k=domains_k, seed=config.seed, threads=threads,
            )
            reports.append(rep)
            checkpoints[f"III:{ft_id}"] = ck3
            train_reports[f"III:{ft_id}"] = rep3

    return ScenarioResult(scenario=scenario, reports=reports,
                          checkpoints=checkpoints, train_reports=train_reports)


# ---------------------------------------------------------------------------
# Molecular query on a trained model
# ---------------------------------------------------------------------------

def run_query(cohort, prep, params, model_cfg, goi, voi_id=None, grid_overlap=0.75,
              depth=21, pcc_threshold=0.5, expr_percentile=75.0,
              min_high_frac=0.5, threads=1):
    """Build a query from VOI spots and rank / map patch similarities."""
    voi_id = voi_id or cohort.voi_id
    src = cohort.source(voi_id)
    sec_ids = [s.section_id for s in src.sections if s.section_id in prep.sections]
    if not sec_ids:
        raise ValueError("no prepared VOI sections for query construction")
    mats = [prep.sections[s].matrix for s in sec_ids]
    from dataclasses import replace

    values = np.vstack([m.values for m in mats])
    spot_ids = [sid for s in sec_ids for sid in prep.sections[s].spot_ids]
    section_ids = [s for s in sec_ids for _ in prep.sections[s].spot_ids]
    merged = replace(mats[0], values=values, spot_ids=spot_ids,
                     section_ids=section_ids,
                     x_um=np.zeros(len(spot_ids)), y_um=np.zeros(len(spot_ids)))
    bins = np.vstack([prep.sections[s].bins for s in sec_ids])
    tx_emb = encode_transcriptome(bins, params, model_cfg)
    query = build_molecular_query(merged, goi, tx_emb,
                                  pcc_threshold=pcc_threshold,
                                  expr_percentile=expr_percentile,
                                  min_high_frac=min_high_frac)
    grid = tile_grid(src.volume, patch_dims=(112, 112, depth),
                     overlap_fraction=grid_overlap)
    heatmap, sims = similarity_heatmap(src.volume, grid, query, params,
                                       model_cfg, path="3d")
    pct = rank_patches(query, _grid_embeddings(src.volume, grid, params,
                                               model_cfg, threads))
    labels = None
    if src.mask is not None:
        labels = np.array([int(src.mask.voxels[c[0], c[1], c[2]])
                           for c in grid.centers])
    return query, grid, heatmap, sims, pct, labels


def _grid_embeddings(volume, grid, params, model_cfg, threads=1):
    from .training import embed_patches_cont

    stats = np.stack(map_ordered(
        lambda c: _volume_patch_stats(volume, c, grid.patch_dims[2]),
        grid.centers, threads))
    return embed_patches_cont(params, stats, grid.patch_dims[2], model_cfg,
                              path="3d")


# ---------------------------------------------------------------------------
# Cached pipeline steps
# ---------------------------------------------------------------------------

class StepRunner:
    """Executes named steps with digest-based caching in a run directory."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.statuses = []

    def run(self, name, digest, outputs, fn):
        marker = self.out / f"{name}.done.json"
        outputs = [self.out / o for o in outputs]
        if marker.exists():
            try:
                doc = json.loads(marker.read_text())
            except ValueError:
                doc = {}
            if doc.get("digest") == digest and all(o.exists() for o in outputs):
                self.statuses.append((name, "cached"))
                return "cached"
        fn()
        missing = [str(o) for o in outputs if not o.exists()]
        if missing:
            raise RuntimeError(f"step {name} did not produce: {missing}")
        marker.write_text(json.dumps({"digest": digest,
                                      "outputs": [str(o) for o in outputs]}))
        self.statuses.append((name, "ran"))
        return "ran"


def cmd_pipeline(config):
    """Full run: ingest, preprocess, register, train, predict, evaluate,
    domains, export. Returns (exit_code, runner statuses)."""
    out = Path(config.out_dir)
    runner = StepRunner(out)
    threads = thread_count(config.threads)
    cohort = load_cohort(config.cohort_root)
    with open(Path(config.cohort_root) / "cohort.json", "rb") as f:
        cohort_digest = config_digest(f.read().decode())
    state = {}

    def ingest():
        doc = {
            "sources": [
                {"source_id": s.source_id, "kind": s.kind,
                 "sections": [sec.section_id for sec in s.sections]}
                for s in cohort.sources
            ],
            "cohort_digest": cohort_digest,
            "panel_size": len(cohort.panel),
        }
        (out / "ingest.json").write_text(json.dumps(doc, indent=1))

    runner.run("ingest", config_digest([cohort_digest]), ["ingest.json"], ingest)

    prep_digest = config_digest([cohort_digest, config.preprocess_params()])

    def preprocess():
        state["prep"] = preprocess_cohort(cohort, config.preprocess_params())
        doc = {
            "sections": {k: len(v.spot_ids) for k, v in state["prep"].sections.items()},
            "input_genes": list(state["prep"].input_gene_symbols),
        }
        (out / "preprocess.json").write_text(json.dumps(doc, indent=1))

    runner.run("preprocess", prep_digest, ["preprocess.json"], preprocess)
    if "prep" not in state:
        state["prep"] = preprocess_cohort(cohort, config.preprocess_params())

    reg_digest = config_digest([cohort_digest, config.registration])

    def register():
        state["reg"] = register_cohort(cohort, config.registration, threads)
        doc = {}
        for sec_id, (result, coords) in state["reg"].items():
            doc[sec_id] = {
                "normal": list(result.plane.normal),
                "offset": result.plane.offset,
                "inliers": result.inlier_count,
                "rmse_vox": result.inlier_rmse_vox,
                "n_mapped": len(coords),
            }
        (out / "registration.json").write_text(json.dumps(doc, indent=1))
        coords_doc = {
            sec_id: {sid: list(coords[sid]) for sid in coords}
            for sec_id, (_, coords) in state["reg"].items()
        }
        (out / "registration_coords.json").write_text(json.dumps(coords_doc))

    runner.run("register", reg_digest, ["registration.json"], register)
    if "reg" not in state:
        state["reg"] = register_cohort(cohort, config.registration, threads)

    scen_digest = config_digest(
        [cohort_digest, config.digest(["scenario", "stages", "model", "loss",
                                       "preprocess", "seed", "voi_id",
                                       "domains"])]
    )
    report_path = out / "metrics.json"

    def train_predict_evaluate():
        result = run_scenario(config.scenario, cohort,
                              voi_id=config.voi_id or cohort.voi_id,
                              config=config, prep=state["prep"],
                              registrations=state["reg"])
        state["result"] = result
        for stage, ck in result.checkpoints.items():
            save_checkpoint(ck, out / f"checkpoint_{stage.replace(':', '_')}.ckpt")
        for stage, rep in result.train_reports.items():
            (out / f"train_{stage.replace(':', '_')}.json").write_text(rep.to_json())
        doc = {
            "scenario": config.scenario,
            "reports": [r.to_dict() for r in result.reports],
            "mean_pcc_all": result.mean_pcc(),
            "config_digest": scen_digest,
        }
        report_path.write_text(json.dumps(doc, indent=1))
        for r in result.reports:
            r.write_csv(out / f"metrics_{r.section_id}.csv")

    runner.run("train+evaluate", scen_digest,
               ["metrics.json", "checkpoint_I.ckpt", "checkpoint_II.ckpt"],
               train_predict_evaluate)

    export_digest = config_digest([scen_digest, config.export])

    def export():
        if "result" in state:
            ck = state["result"].checkpoints
            last = next((v for k, v in ck.items() if k.startswith("III")),
                        ck["II"])
            params = unpack_checkpoint(last)
        else:
            ck_paths = sorted(out.glob("checkpoint_III*.ckpt")) or \
                [out / "checkpoint_II.ckpt"]
            params = unpack_checkpoint(load_checkpoint(ck_paths[0]))
        model_cfg = config.model_config()
        voi = cohort.source(config.voi_id or cohort.voi_id)
        genes = config.export.get("genes") or [cohort.panel.genes[2]]
        planes = config.export.get("planes")
        depth = 21 if config.scenario != "S2D" else 1
        if planes is None:
            planes = [voi.sections[0].plane_z or voi.volume.dims[2] // 2]
        pred_stack = {}
        grid_xy = [(x, y) for x in range(56, voi.volume.dims[0] - 55, 14)
                   for y in range(56, voi.volume.dims[1] - 55, 14)]
        for g in genes:
            gi = cohort.panel.index_of(g)
            stack = []
            for z in planes:
                stats = np.stack(map_ordered(
                    lambda xy: _volume_patch_stats(voi.volume, (xy[0], xy[1], z),
                                                   depth),
                    grid_xy, threads))
                yhat = predict_from_stats(params, stats, depth, model_cfg,
                                          path="3d")
                nx = len(range(56, voi.volume.dims[0] - 55, 14))
                ny = len(range(56, voi.volume.dims[1] - 55, 14))
                stack.append(yhat[:, gi].reshape(nx, ny))
            pred_stack[g] = np.stack(stack)
        from .analysis import expression_heatmap

        for g, stack in pred_stack.items():
            hm = expression_heatmap({g: stack}, g,
                                    alpha=config.export.get("alpha", 0.7))
            save_heatmap(hm, out / f"expression_{g}.f32",
                         extra_meta={"gene": g, "planes": list(map(int, planes))},
                         uint8=config.export.get("uint8", False))
        # spatial domains over the evaluated sections
        dom_rows = []
        prep = state["prep"]
        for sec in voi.sections:
            if sec.section_id not in prep.sections:
                continue
            ps = prep.sections[sec.section_id]
            _, coords = state["reg"][sec.section_id]
            keep = [s for s in ps.spot_ids if s in coords]
            voxels = [tuple(int(round(c)) for c in coords[s]) for s in keep]
            stats = np.stack(map_ordered(
                lambda v: _volume_patch_stats(voi.volume, v, depth), voxels,
                threads))
            emb = domain_embed_from_stats(params, stats, depth, model_cfg,
                                          path="3d")
            dom = kmeans(emb, config.domains.get("k", 3), seed=config.seed)
            for sid, lab in zip(keep, dom.labels):
                dom_rows.append((f"{sec.section_id}:{sid}", int(lab)))
        import csv as _csv

        with open(out / "domains.csv", "w", newline="") as f:
            w = _csv.writer(f)
            w.writerow(["location", "label"])
            w.writerows(dom_rows)

    runner.run("export", export_digest, ["domains.csv"], export)
    ok = report_path.exists()
    return (0 if ok else 1), runner.statuses
