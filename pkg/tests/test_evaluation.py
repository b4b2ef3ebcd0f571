import numpy as np
import pytest

from vortex3d.evaluation import (
    DegenerateError,
    ari,
    autocorr_delta,
    compute_metrics,
    gearys_c,
    grid_rook_weights,
    hex_weights,
    knn_weights,
    morans_i,
    pcc,
    pcc_mean,
    pcc_per_gene,
    rasterize_spots,
    spearman,
    spearman_variance,
    ssim_gene,
    ssim_images,
    wilcoxon_signed_rank,
)
from vortex3d.store import GenePanel


def checkerboard(n=4):
    x, y = np.meshgrid(range(n), range(n), indexing="ij")
    return ((x + y) % 2).astype(float).ravel()


class TestPCC:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=20)
        assert pcc(x, x) == pytest.approx(1.0)
        assert pcc(x, -x) == pytest.approx(-1.0)

    def test_hand_case(self):
        assert pcc([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9820, abs=1e-4)

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=15), rng.normal(size=15)
        assert pcc(2.5 * x + 3, y) == pytest.approx(pcc(x, y), abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateError):
            pcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_mean_excludes_degenerate(self):
        gt = np.column_stack([np.ones(5), np.arange(5.0)])
        pred = np.column_stack([np.arange(5.0), np.arange(5.0)])
        vals = pcc_per_gene(gt, pred)
        assert np.isnan(vals[0]) and vals[1] == pytest.approx(1.0)
        assert pcc_mean(vals) == pytest.approx(1.0)


class TestSpearman:
    def test_perfect(self):
        gt = np.random.default_rng(0).normal(size=(30, 6))
        assert spearman_variance(gt, gt) == pytest.approx(1.0)

    def test_reversed(self):
        gt = np.random.default_rng(1).normal(size=(40, 5)) * np.arange(1, 6)
        order = np.argsort(gt.var(axis=0))
        # build predictions whose variance ranking is exactly reversed
        scales = np.empty(5)
        scales[order] = np.sort(gt.var(axis=0))[::-1]
        pred = np.random.default_rng(2).normal(size=(40, 5)) * np.sqrt(scales)
        assert spearman_variance(gt, pred) == pytest.approx(-1.0)

    def test_shift_invariance(self):
        gt = np.random.default_rng(3).normal(size=(25, 6))
        pred = gt + np.random.default_rng(4).normal(size=(25, 1))  # per-spot shift
        assert spearman_variance(gt, gt + 0 * pred) == pytest.approx(1.0)
        assert spearman_variance(gt, gt + 5.0) == pytest.approx(1.0)


class TestSSIM:
    def test_identity_is_one(self):
        rng = np.random.default_rng(0)
        coords = np.array([(i * 100.0, j * 100.0) for i in range(12) for j in range(12)])
        vals = rng.random(144)
        assert ssim_gene(vals, vals, coords, 100.0) == pytest.approx(1.0)

    def test_inverted_structured_field_low(self):
        x, y = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        field = np.sin(x / 2.0) * np.cos(y / 3.0)
        coords = np.column_stack([x.ravel() * 100.0, y.ravel() * 100.0])
        vals = (field.ravel() - field.min()) / (field.max() - field.min())
        assert ssim_gene(vals, 1.0 - vals, coords, 100.0) < 0.2

    def test_raster_indices_divide_by_pitch(self):
        coords = np.array([(0.0, 0.0), (100.0, 0.0), (200.0, 100.0)])
        img = rasterize_spots(coords, [1.0, 2.0, 3.0], 100.0)
        assert img.shape == (2, 3)
        assert img[0, 0] == 1.0 and img[0, 1] == 2.0 and img[1, 2] == 3.0

    def test_matches_reference_implementation(self):
        skimage = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(5)
        a = rng.random((24, 20))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        ours = ssim_images(a, b)
        ref = skimage.structural_similarity(
            a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
            data_range=1.0,
        )
        assert ours == pytest.approx(ref, abs=5e-4)


class TestAutocorrelation:
    def test_checkerboard_moran_minus_one(self):
        w = grid_rook_weights((4, 4))
        assert morans_i(checkerboard(4), w) == pytest.approx(-1.0, abs=1e-12)

    def test_checkerboard_geary(self):
        w = grid_rook_weights((4, 4))
        assert gearys_c(checkerboard(4), w) == pytest.approx(1.875, abs=1e-12)

    def test_smooth_ramp(self):
        x, y = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        ramp = x.astype(float).ravel()
        w = grid_rook_weights((8, 8))
        assert morans_i(ramp, w) > 0.5
        assert gearys_c(ramp, w) < 0.5

    def test_permutation_null(self):
        rng = np.random.default_rng(0)
        w = grid_rook_weights((6, 6))
        vals = rng.normal(size=36)
        cs = [gearys_c(rng.permutation(vals), w) for _ in range(100)]
        assert 0.9 < np.mean(cs) < 1.1

    def test_constant_degenerate(self):
        w = grid_rook_weights((4, 4))
        with pytest.raises(DegenerateError):
            morans_i(np.ones(16), w)
        with pytest.raises(DegenerateError):
            gearys_c(np.ones(16), w)

    def test_delta_sign_convention(self):
        rng = np.random.default_rng(1)
        w = grid_rook_weights((5, 5))
        x, y = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
        smooth = (x + y).astype(float).ravel()
        rough = rng.permutation(smooth)
        gt = np.column_stack([smooth])
        pred = np.column_stack([rough])
        d_i, d_c, skipped = autocorr_delta(gt, pred, w)
        assert skipped == 0
        # truth is smoother: I(gt) > I(pred) so the delta is positive
        assert d_i[0] > 0.2

    def test_shuffle_delta_magnitude(self):
        rng = np.random.default_rng(2)
        x, y = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        w = grid_rook_weights((8, 8))
        genes = [np.sin(x / 2 + k).ravel() + 0.1 * y.ravel() for k in range(6)]
        gt = np.column_stack(genes)
        pred = np.column_stack([rng.permutation(g) for g in genes])
        d_i, _, _ = autocorr_delta(gt, pred, w)
        assert np.median(np.abs(d_i)) > 0.2

    def test_pred_equals_gt_zero_delta(self):
        rng = np.random.default_rng(3)
        gt = rng.normal(size=(36, 4))
        w = grid_rook_weights((6, 6))
        d_i, d_c, _ = autocorr_delta(gt, gt, w)
        np.testing.assert_allclose(d_i, 0.0, atol=1e-12)
        np.testing.assert_allclose(d_c, 0.0, atol=1e-12)


class TestWeights:
    def test_knn_row_normalized(self):
        coords = np.random.default_rng(0).random((30, 2)) * 100
        w = knn_weights(coords, k=6)
        sums = np.asarray(w.matrix.sum(axis=1)).ravel()
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)
        assert w.matrix.diagonal().max() == 0.0

    def test_hex_neighbors_on_hex_grid(self):
        # hexagonal lattice: 6 neighbors at pitch distance for interior spots
        pts = []
        for r in range(6):
            for c in range(6):
                pts.append((c * 100.0 + (r % 2) * 50.0, r * 86.6))
        w = hex_weights(np.array(pts), row_normalize=False)
        counts = np.asarray((w.matrix > 0).sum(axis=1)).ravel()
        assert counts.max() == 6


class TestARI:
    def test_identical(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        assert ari(labels, labels) == pytest.approx(1.0)

    def test_label_permutation_invariance(self):
        a = np.array([0, 0, 1, 1, 2, 2])
        b = np.array([5, 5, 9, 9, 1, 1])
        assert ari(a, b) == pytest.approx(1.0)

    def test_singletons_vs_one_cluster(self):
        assert ari(np.arange(4), np.zeros(4, dtype=int)) == pytest.approx(0.0)

    def test_matches_sklearn(self):
        sk = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = rng.integers(0, 4, 50)
            b = rng.integers(0, 3, 50)
            assert ari(a, b) == pytest.approx(sk.adjusted_rand_score(a, b), abs=1e-12)


class TestWilcoxon:
    def test_strict_dominance_exact(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=10)
        a = b + rng.uniform(0.5, 1.0, 10)
        assert wilcoxon_signed_rank(a, b) == pytest.approx(2.0 ** -10, rel=1e-12)

    def test_all_equal_errors(self):
        x = np.arange(8.0)
        with pytest.raises(ValueError, match="zero"):
            wilcoxon_signed_rank(x, x)

    def test_symmetric_null(self):
        rng = np.random.default_rng(1)
        ps = []
        for _ in range(60):
            d = rng.normal(size=15)
            ps.append(wilcoxon_signed_rank(d, np.zeros(15)))
        assert abs(np.mean(ps) - 0.5) < 0.1

    def test_matches_scipy_exact(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = rng.normal(size=12)
            b = rng.normal(size=12)
            ours = wilcoxon_signed_rank(a, b, alternative="greater")
            ref = scipy_stats.wilcoxon(a, b, alternative="greater",
                                       method="exact").pvalue
            assert ours == pytest.approx(ref, rel=1e-9)

    def test_normal_approx_large_n(self):
        rng = np.random.default_rng(3)
        a = rng.normal(0.3, 1.0, size=60)
        b = np.zeros(60)
        p = wilcoxon_signed_rank(a, b)
        ref = pytest.importorskip("scipy.stats").wilcoxon(
            a, b, alternative="greater", method="approx", correction=True
        ).pvalue
        assert p == pytest.approx(ref, rel=0.05)


class TestReport:
    def test_report_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 64
        coords = np.array([(i * 100.0, j * 100.0) for i in range(8) for j in range(8)])
        gt = rng.random((n, 5))
        pred = gt + rng.normal(0, 0.1, (n, 5))
        panel = GenePanel(genes=[f"G{i}" for i in range(5)])
        rep = compute_metrics(gt, pred, coords, 100.0, panel,
                              markers=["G0"], scenario="S3D", section_id="sec1")
        d = rep.to_dict()
        assert d["aggregates"]["pcc"]["all"] > 0.8
        assert d["aggregates"]["pcc"]["marker"] is not None
        rep.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert len(lines) == 6
        assert rep.to_json()
