import numpy as np
import pytest

from vortex3d.analysis import (
    Heatmap,
    blend_propagated_masks,
    build_molecular_query,
    expression_heatmap,
    kmeans,
    rank_patches,
    save_heatmap,
    similarity_heatmap,
    upsample_idw,
)
from vortex3d.evaluation import ari
from vortex3d.preprocess import ExpressionMatrix, ExpressionFlags
from vortex3d.store import GenePanel


def two_blobs(n=40, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 0.3, (n, 8)) + 5
    b = rng.normal(0, 0.3, (n, 8)) - 5
    x = np.vstack([a, b])
    truth = np.repeat([0, 1], n)
    return x, truth


class TestKMeans:
    def test_blobs_perfect_separation(self):
        x, truth = two_blobs()
        dom = kmeans(x, 2, seed=3)
        assert ari(dom.labels, truth) == pytest.approx(1.0)

    def test_k1_centroid_is_mean(self):
        x, _ = two_blobs()
        dom = kmeans(x, 1, seed=0)
        np.testing.assert_allclose(dom.centroids[0], x.mean(axis=0), atol=1e-12)

    def test_deterministic(self):
        x, _ = two_blobs(seed=5)
        a = kmeans(x, 3, seed=1)
        b = kmeans(x, 3, seed=1)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_duplicates_and_empty_cluster_repair(self):
        # more clusters than distinct points forces the repair path
        x = np.array([[0.0, 0.0]] * 5 + [[10.0, 0.0]] * 5 + [[0.0, 10.0]])
        dom = kmeans(x, 3, seed=2)
        assert len(np.unique(dom.labels)) == 3

    def test_k_exceeds_n(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4)


def make_matrix(values, genes=None):
    values = np.asarray(values, dtype=float)
    n, g = values.shape
    genes = genes or [f"G{i}" for i in range(g)]
    return ExpressionMatrix(
        panel=GenePanel(genes=genes),
        values=values,
        spot_ids=[f"s{i}" for i in range(n)],
        section_ids=["sec"] * n,
        x_um=np.arange(n, dtype=float),
        y_um=np.zeros(n),
        flags=ExpressionFlags(True, True, False),
    )


class TestMolecularQuery:
    def setup_method(self):
        rng = np.random.default_rng(0)
        n = 60
        a = rng.random(n) * 4
        b = a.copy()                      # identical: PCC 1
        noise = rng.normal(size=n)
        c = 0.25 * a + noise * 2.0        # weak correlation
        d = rng.random(n) * 4             # unrelated
        self.m = make_matrix(np.column_stack([a, b, c, d]),
                             genes=["GA", "GB", "GC", "GD"])
        self.emb = rng.normal(size=(n, 16))
        self.emb /= np.linalg.norm(self.emb, axis=1, keepdims=True)

    def test_identical_gene_is_correlated(self):
        q = build_molecular_query(self.m, ["GA"], self.emb)
        assert "GB" in q.correlated_genes

    def test_weak_gene_excluded(self):
        q = build_molecular_query(self.m, ["GA"], self.emb)
        corr = np.corrcoef(self.m.values[:, 0], self.m.values[:, 2])[0, 1]
        assert corr < 0.5
        assert "GC" not in q.correlated_genes

    def test_high_spot_retained(self):
        q = build_molecular_query(self.m, ["GA"], self.emb)
        sub = self.m.values[:, [0, 1]]
        thr = np.percentile(sub, 75, axis=0)
        all_high = (sub > thr).all(axis=1)
        retained = set(q.provenance_spot_ids)
        for i in np.flatnonzero(all_high):
            assert f"s{i}" in retained

    def test_embedding_unit_norm(self):
        q = build_molecular_query(self.m, ["GA"], self.emb)
        assert np.linalg.norm(q.embedding) == pytest.approx(1.0, abs=1e-9)

    def test_no_passing_spot_errors(self):
        q_vals = np.zeros((10, 2))
        q_vals[:, 1] = np.arange(10)
        m = make_matrix(q_vals, genes=["GA", "GB"])
        emb = np.tile([1.0, 0.0], (10, 1))
        with pytest.raises(ValueError, match="no spot passes"):
            # GA is constant-zero so no spot can exceed its 75th percentile
            build_molecular_query(m, ["GA"], emb, min_high_frac=1.0)

    def test_spot_order_invariance(self):
        q1 = build_molecular_query(self.m, ["GA"], self.emb)
        perm = np.random.default_rng(1).permutation(self.m.n_spots)
        m2 = make_matrix(self.m.values[perm], genes=list(self.m.panel.genes))
        q2 = build_molecular_query(m2, ["GA"], self.emb[perm])
        np.testing.assert_allclose(q1.embedding, q2.embedding, atol=1e-12)

    def test_duplication_invariance(self):
        vals = np.vstack([self.m.values, self.m.values])
        m2 = make_matrix(vals, genes=list(self.m.panel.genes))
        emb2 = np.vstack([self.emb, self.emb])
        q1 = build_molecular_query(self.m, ["GA"], self.emb)
        q2 = build_molecular_query(m2, ["GA"], emb2)
        np.testing.assert_allclose(q1.embedding, q2.embedding, atol=1e-12)


class TestRanking:
    def test_top_and_bottom(self):
        q = np.array([1.0, 0.0])
        embs = np.array([[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]])
        pct = rank_patches(q, embs)
        assert pct[0] == 100.0
        assert pct[1] == 0.0

    def test_two_patches(self):
        q = np.array([1.0, 0.0])
        embs = np.array([[0.9, 0.1], [0.1, 0.9]])
        assert sorted(rank_patches(q, embs)) == [0.0, 100.0]

    def test_percentiles_bijective(self):
        rng = np.random.default_rng(0)
        embs = rng.normal(size=(11, 4))
        embs /= np.linalg.norm(embs, axis=1, keepdims=True)
        pct = rank_patches(embs[0], embs)
        assert len(set(pct)) == 11
        np.testing.assert_allclose(sorted(pct), np.arange(11) * 10.0)


class TestExpressionHeatmap:
    def test_constant_flat(self):
        hm = expression_heatmap({"G": np.full((3, 4, 4), 2.0)}, "G")
        assert np.unique(hm.values).size == 1
        assert hm.alpha == 0.7

    def test_central_plane_bounds_apply_everywhere(self):
        stack = np.zeros((3, 4, 4))
        stack[0] = 100.0  # extreme plane clipped by central-plane bounds
        stack[1] = np.linspace(0, 1, 16).reshape(4, 4)
        hm = expression_heatmap({"G": stack}, "G")
        lo, hi = hm.clamp
        assert hm.values.max() <= hi + 1e-6
        assert hi <= 1.0

    def test_unknown_gene(self):
        with pytest.raises(KeyError):
            expression_heatmap({"G": np.zeros((1, 2, 2))}, "NOPE")


class TestIDW:
    def test_exact_at_spots(self):
        coords = np.array([(0.0, 0.0), (100.0, 0.0), (0.0, 100.0), (100.0, 100.0)])
        vals = np.array([1.0, 2.0, 3.0, 4.0])
        grid, (x0, y0, step) = upsample_idw(coords, vals, resolution_factor=2)
        for (x, y), v in zip(coords, vals):
            i = int(round((y - y0) / step))
            j = int(round((x - x0) / step))
            assert grid[i, j] == pytest.approx(v)

    def test_midpoint_mean_of_equidistant(self):
        coords = np.array([(0.0, 0.0), (100.0, 0.0)])
        vals = np.array([1.0, 3.0])
        grid, (x0, y0, step) = upsample_idw(coords, vals, resolution_factor=2,
                                            pitch=100.0)
        j = int(round((50.0 - x0) / step))
        assert grid[0, j] == pytest.approx(2.0)

    def test_resolution_factor_refines_grid(self):
        coords = np.array([(0.0, 0.0), (100.0, 0.0)])
        vals = np.array([1.0, 3.0])
        g15, (_, _, step15) = upsample_idw(coords, vals, resolution_factor=15,
                                           pitch=100.0)
        assert step15 == pytest.approx(100.0 / 15)
        assert g15.shape[1] == 16

    def test_no_spots_errors(self):
        with pytest.raises(ValueError):
            upsample_idw(np.zeros((0, 2)), np.zeros(0))


class TestBlending:
    def test_anchor_planes_pure(self):
        rng = np.random.default_rng(0)
        fwd = rng.normal(size=(5, 4, 4, 3))
        bwd = rng.normal(size=(5, 4, 4, 3))
        labels = blend_propagated_masks(fwd, bwd, (10, 14))
        np.testing.assert_array_equal(labels[0], fwd[0].argmax(axis=-1))
        np.testing.assert_array_equal(labels[-1], bwd[-1].argmax(axis=-1))

    def test_midpoint_tie_breaks_low_index(self):
        fwd = np.zeros((3, 2, 2, 3))
        bwd = np.zeros((3, 2, 2, 3))
        fwd[1, :, :, 1] = 1.0
        bwd[1, :, :, 2] = 1.0
        labels = blend_propagated_masks(fwd, bwd, (0, 2))
        assert (labels[1] == 1).all()

    def test_equal_stacks(self):
        rng = np.random.default_rng(1)
        fwd = rng.normal(size=(4, 3, 3, 2))
        labels = blend_propagated_masks(fwd, fwd, (0, 3))
        np.testing.assert_array_equal(labels, fwd.argmax(axis=-1))

    def test_weights_sum_to_one(self):
        # a pure-constant logit stack stays constant under any valid blend
        fwd = np.full((4, 2, 2, 2), 3.0)
        bwd = np.full((4, 2, 2, 2), 3.0)
        labels = blend_propagated_masks(fwd, bwd, (2, 5))
        assert (labels == 0).all()

    def test_same_anchor_errors(self):
        with pytest.raises(ValueError):
            blend_propagated_masks(np.zeros((1, 2, 2, 2)),
                                   np.zeros((1, 2, 2, 2)), (3, 3))


class TestHeatmapExport:
    def test_save_round_trip(self, tmp_path):
        vals = np.random.default_rng(0).random((2, 4, 4)).astype(np.float32)
        hm = Heatmap(values=vals, clamp=(0.0, 1.0), alpha=0.7)
        save_heatmap(hm, tmp_path / "h.f32", uint8=True)
        raw = np.frombuffer((tmp_path / "h.f32").read_bytes(), dtype=np.float32)
        np.testing.assert_array_equal(raw.reshape(2, 4, 4), vals)
        assert (tmp_path / "h.f32.json").exists()
        assert (tmp_path / "h.f32.u8").exists()
