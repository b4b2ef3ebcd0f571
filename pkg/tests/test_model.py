import numpy as np
import pytest

from vortex3d.model import (
    LossWeights,
    ModelConfig,
    TokenOrigin,
    da_forward,
    encode_transcriptome,
    featurize_patch,
    init_params,
    loss_contrastive,
    loss_direct,
    loss_dual_contrastive,
    loss_reconstruction,
    patch_stats,
    pool,
    predict_expression,
    total_loss,
)
from vortex3d.model.layers import linear, mha, layernorm
from vortex3d.preprocess import Patch
from vortex3d.store import Modality

SMALL = ModelConfig(
    d_token=32, d_embed=16, pool_heads=4, n_rec_queries=32, tx_layers=1,
    tx_heads=4, tx_mlp_ratio=2, pred_heads=4, pred_mlp_ratio=2, da_hidden=8,
    n_bins=11,
)


def small_params(panel=6, genes=5, batches=3, seed=0, dtype=np.float64):
    return init_params(SMALL, panel, genes, batches, seed=seed, dtype=dtype)


def make_patch(depth, seed=0):
    rng = np.random.default_rng(seed)
    return Patch(data=rng.random((112, 112, depth), dtype=np.float32),
                 center=(56, 56, depth // 2), modality=Modality.MICROCT,
                 depth_extent_um=depth * 4.0)


class TestFeaturizer:
    def test_token_counts(self):
        params = small_params()
        for depth, n in ((1, 196), (3, 588), (21, 4116)):
            ts = featurize_patch(make_patch(depth), params, SMALL)
            assert ts.tokens.shape == (n, SMALL.d_token)
        assert featurize_patch(make_patch(1), params, SMALL).origin == TokenOrigin.IMG2D
        assert featurize_patch(make_patch(21), params, SMALL).origin == TokenOrigin.IMG3D

    def test_full_width_contract(self):
        cfg = ModelConfig()
        params = init_params(cfg, 4, 5, 2, seed=0)
        ts = featurize_patch(make_patch(21), params, cfg)
        assert ts.tokens.shape == (4116, 768)

    def test_constant_zero_patch_stats(self):
        stats = patch_stats(np.zeros((112, 112, 1)))
        np.testing.assert_array_equal(stats, np.zeros((196, 8)))

    def test_zero_patch_tokens_are_bias_plus_depth(self):
        params = small_params()
        zero = Patch(data=np.zeros((112, 112, 1), dtype=np.float32),
                     center=(56, 56, 0), modality=Modality.MICROCT,
                     depth_extent_um=4.0)
        ts = featurize_patch(zero, params, SMALL)
        center_row = SMALL.depth_rows(1)[0]
        expected = params["feat.proj.b"] + params["feat.depth_emb"][center_row]
        np.testing.assert_allclose(ts.tokens, np.tile(expected, (196, 1)), atol=1e-12)

    def test_d1_matches_central_plane_of_d21(self):
        params = small_params()
        rng = np.random.default_rng(1)
        vol_patch = rng.random((112, 112, 21))
        t21 = featurize_patch(Patch(data=vol_patch, center=(0, 0, 0),
                                    modality=Modality.MICROCT,
                                    depth_extent_um=84), params, SMALL)
        t1 = featurize_patch(Patch(data=vol_patch[:, :, 10:11], center=(0, 0, 0),
                                   modality=Modality.MICROCT,
                                   depth_extent_um=4), params, SMALL)
        # both use the central depth row, so the central-plane tokens agree
        np.testing.assert_allclose(
            t1.tokens, t21.tokens[10 * 196 : 11 * 196], atol=1e-12
        )
        # plane 0 differs from the d=1 tokens exactly by the embedding rows
        delta = params["feat.depth_emb"][0] - params["feat.depth_emb"][10]
        np.testing.assert_allclose(
            t21.tokens[0:196] + np.tile(-delta, (196, 1)),
            featurize_patch(
                Patch(data=vol_patch[:, :, 0:1], center=(0, 0, 0),
                      modality=Modality.MICROCT, depth_extent_um=4),
                params, SMALL,
            ).tokens,
            atol=1e-12,
        )


class TestPoolers:
    def test_cont_unit_norm(self):
        params = small_params()
        ts = featurize_patch(make_patch(3), params, SMALL)
        h = pool(ts, "CONT", params, SMALL)
        assert h.shape == (SMALL.d_embed,)
        assert np.linalg.norm(h) == pytest.approx(1.0, abs=1e-6)

    def test_rec_shape(self):
        params = small_params()
        ts = featurize_patch(make_patch(3), params, SMALL)
        h = pool(ts, "REC", params, SMALL)
        assert h.shape == (32, SMALL.d_embed)

    def test_constant_tokens_analytic(self):
        """With identical tokens, attention output bypasses the pattern."""
        params = small_params()
        t = np.random.default_rng(0).normal(size=SMALL.d_token)
        tokens = np.tile(t, (50, 1))[None]
        prefix = "pool3d_cont"
        kn, _ = layernorm(tokens, params, f"{prefix}.ln_kv")
        vproj = kn[0, 0] @ params[f"{prefix}.attn.v.w"] + params[f"{prefix}.attn.v.b"]
        attn_out = vproj @ params[f"{prefix}.attn.o.w"] + params[f"{prefix}.attn.o.b"]
        h = params[f"{prefix}.query"][0] + attn_out
        expected = h @ params[f"{prefix}.out.w"] + params[f"{prefix}.out.b"]
        expected = expected / np.linalg.norm(expected)
        got = pool(tokens[0], "CONT", params, SMALL, path="3d")
        np.testing.assert_allclose(got, expected, atol=1e-10)


class TestTranscriptomeEncoder:
    def test_unit_norm_and_determinism(self):
        params = small_params()
        bins = np.array([0, 3, 7, 1, 9])
        g1 = encode_transcriptome(bins, params, SMALL)
        g2 = encode_transcriptome(bins, params, SMALL)
        assert np.linalg.norm(g1) == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_array_equal(g1, g2)

    def test_permutation_invariance(self):
        params = small_params()
        rng = np.random.default_rng(2)
        bins = rng.integers(0, SMALL.n_bins, 5)
        idx = np.arange(5)
        perm = rng.permutation(5)
        g = encode_transcriptome(bins, params, SMALL, local_indices=idx)
        gp = encode_transcriptome(bins[perm], params, SMALL, local_indices=idx[perm])
        np.testing.assert_allclose(g, gp, atol=1e-9)

    def test_empty_gene_set_errors(self):
        params = small_params()
        with pytest.raises(ValueError, match="empty"):
            encode_transcriptome(np.zeros((0,)), params, SMALL)


class TestPredictor:
    def test_output_length(self):
        params = small_params(panel=6)
        h = np.random.default_rng(0).normal(size=(32, SMALL.d_embed))
        y = predict_expression(h, params, SMALL)
        assert y.shape == (6,)

    def test_zero_head_gives_bias(self):
        params = small_params(panel=6)
        params["pred.head.w"] = np.zeros_like(params["pred.head.w"])
        params["pred.head.b"] = np.arange(6.0)
        h = np.random.default_rng(0).normal(size=(32, SMALL.d_embed))
        np.testing.assert_allclose(predict_expression(h, params, SMALL),
                                   np.arange(6.0), atol=1e-12)

    def test_batch_matches_single(self):
        params = small_params(panel=6)
        h = np.random.default_rng(1).normal(size=(3, 32, SMALL.d_embed))
        batch = predict_expression(h, params, SMALL)
        single = np.stack([predict_expression(h[i], params, SMALL) for i in range(3)])
        np.testing.assert_allclose(batch, single, atol=1e-12)


def unit_rows(m, e, seed=0):
    x = np.random.default_rng(seed).normal(size=(m, e))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestLosses:
    def test_single_pair_zero(self):
        h = unit_rows(1, 8)
        assert loss_contrastive(h, h, LossWeights()) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("m", [2, 4, 8])
    @pytest.mark.parametrize("conv", ["DIVIDE", "MULTIPLY"])
    def test_identical_embeddings_ln_m(self, m, conv):
        v = unit_rows(1, 8)[0]
        h = np.tile(v, (m, 1))
        w = LossWeights(tau=0.1, tau_convention=conv)
        assert loss_contrastive(h, h, w) == pytest.approx(np.log(m), abs=1e-9)

    def test_matched_orthogonal_pairs(self):
        h = np.eye(2, 8)
        w = LossWeights(tau=0.1, tau_convention="DIVIDE")  # logit scale 10
        expected = np.log(1 + np.exp(-10.0))
        assert loss_contrastive(h, h, w) == pytest.approx(expected, rel=1e-9)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        h = unit_rows(5, 8, 3)
        g = unit_rows(5, 8, 4)
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        w = LossWeights()
        assert loss_contrastive(h @ q, g @ q, w) == pytest.approx(
            loss_contrastive(h, g, w), abs=1e-9
        )

    def test_non_normalized_rejected(self):
        h = unit_rows(3, 8) * 2.0
        with pytest.raises(ValueError, match="unit-norm"):
            loss_contrastive(h, unit_rows(3, 8), LossWeights())

    def test_dual_is_sum_of_pairwise(self):
        h3, g, h2 = unit_rows(4, 8, 0), unit_rows(4, 8, 1), unit_rows(4, 8, 2)
        w = LossWeights()
        dual = loss_dual_contrastive(h3, g, h2, w)
        assert dual == pytest.approx(
            loss_contrastive(h3, g, w) + loss_contrastive(h3, h2, w), abs=1e-12
        )

    def test_dual_identical_rows_2_ln_m(self):
        v = unit_rows(1, 8)[0]
        h = np.tile(v, (4, 1))
        assert loss_dual_contrastive(h, h, h, LossWeights()) == pytest.approx(
            2 * np.log(4), abs=1e-9
        )

    def test_reconstruction_literal(self):
        assert loss_reconstruction(np.array([[1.0, 2.0]]),
                                   np.array([[0.0, 0.0]])) == pytest.approx(5.0)
        y = np.random.default_rng(0).normal(size=(3, 4))
        assert loss_reconstruction(y, y) == 0.0
        # duplicating rows leaves the mean unchanged
        yy = np.vstack([y, y])
        yhat = y + 1.0
        assert loss_reconstruction(yy, np.vstack([yhat, yhat])) == pytest.approx(
            loss_reconstruction(y, yhat)
        )

    def test_direct_loss(self):
        a = np.zeros((1, 4, 8))
        b = np.zeros((1, 4, 8))
        b[0, 2, 3] = 1.0
        assert loss_direct(a, b) == pytest.approx(1.0)
        assert loss_direct(b, a) == pytest.approx(1.0)
        assert loss_direct(a, a) == 0.0

    def test_da_uniform_logits(self):
        params = small_params(batches=4)
        params["da.fc1.w"] = np.zeros_like(params["da.fc1.w"])
        params["da.fc1.b"] = np.zeros_like(params["da.fc1.b"])
        params["da.fc2.w"] = np.zeros_like(params["da.fc2.w"])
        params["da.fc2.b"] = np.zeros_like(params["da.fc2.b"])
        g = unit_rows(6, 16)
        loss, _ = da_forward(g, np.array([0, 1, 2, 3, 0, 1]), params)
        assert loss == pytest.approx(np.log(4), abs=1e-12)

    def test_da_single_source_zero(self):
        params = small_params(batches=1)
        g = unit_rows(3, 16)
        loss, _ = da_forward(g, np.zeros(3, dtype=int), params)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_da_unknown_batch_errors(self):
        params = small_params(batches=2)
        with pytest.raises(ValueError, match="batch id"):
            da_forward(unit_rows(2, 16), np.array([0, 5]), params)


class TestTotalLoss:
    def test_all_zero(self):
        w = LossWeights()
        assert total_loss("I", {"cont": 0, "rec": 0, "da": 0}, w) == 0.0

    def test_stage1_da_weight(self):
        w = LossWeights(lambda_da=0.1)
        assert total_loss("I", {"cont": 0, "rec": 0, "da": 1.0}, w) == pytest.approx(0.1)

    def test_stage2_dir_toggle(self):
        on = LossWeights(lambda_dir=1.0)
        off = LossWeights(lambda_dir=0.0)
        parts = {"cont": 0.5, "dir": 2.0, "rec": 0.25}
        assert total_loss("II", parts, on) == pytest.approx(2.75)
        assert total_loss("II", parts, off) == pytest.approx(0.75)

    def test_missing_part_errors(self):
        with pytest.raises(ValueError, match="requires"):
            total_loss("II", {"cont": 0.0}, LossWeights())
