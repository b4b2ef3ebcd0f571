"""Central finite-difference verification of every trainable tensor's
gradient, per training stage, at float64.

The batch-ID head trains adversarially: its own parameters follow the
plain classification gradient while upstream tensors receive the negated
term, so the finite-difference reference flips the sign of that loss part
for non-head tensors.
"""

import numpy as np
import pytest

from vortex3d.model import (
    LossWeights,
    ModelConfig,
    StageBatch,
    gradient,
    init_params,
    trainable_names,
)

from fdutil import run_fd_suite

CFG = ModelConfig(
    d_token=16,
    d_embed=8,
    pool_heads=2,
    n_rec_queries=4,
    tx_layers=1,
    tx_heads=2,
    tx_mlp_ratio=2,
    pred_heads=2,
    pred_mlp_ratio=2,
    da_hidden=6,
    n_depths=21,
    n_bins=11,
)
W = LossWeights()
M, G, P = 3, 5, 4
H_FD = 1e-4
MAX_ELEMENTS = 6


def make_batch(depth3d=3, seed=0):
    rng = np.random.default_rng(seed)
    return StageBatch(
        bins=rng.integers(0, CFG.n_bins, (M, G)),
        gene_indices=np.arange(G),
        y=rng.normal(size=(M, P)),
        stats2d=rng.random((M, 196, 8)),
        stats3d=rng.random((M, 196 * depth3d, 8)),
        depth3d=depth3d,
        batch_ids=np.array([0, 1, 2]),
    )


def make_params(seed=1):
    # check at a generic point: a wider init keeps unit-normalization
    # denominators O(1) (bounding the h^2 truncation term), and jittering
    # every tensor moves biases off 0 so no ReLU kink sits on the FD path
    params = init_params(CFG, P, G, 3, seed=seed, dtype=np.float64, init_std=0.3)
    rng = np.random.default_rng(seed + 100)
    return {n: v + rng.normal(0.0, 0.05, v.shape) for n, v in params.items()}


def fd_reference(params, batch, stage, name):
    """Loss whose plain FD matches the reported gradient for tensor `name`."""

    def f():
        _, _, parts = gradient(params, batch, stage, W, CFG)
        if stage == "I":
            sign = 1.0 if name.startswith("da.") else -1.0
            return (
                W.lambda_cont * parts["cont"]
                + W.lambda_rec * parts["rec"]
                + sign * W.lambda_da * parts["da"]
            )
        if stage == "II":
            return (
                W.lambda_cont * parts["cont"]
                + W.lambda_dir * parts["dir"]
                + W.lambda_rec * parts["rec"]
            )
        return (
            W.lambda_cont * (parts["cont_2d"] + parts["cont_3d"])
            + W.lambda_dir * parts["dir"]
            + W.lambda_rec * parts["rec"]
        )

    return f


@pytest.mark.parametrize("stage,depth_mode", [("I", "D1"), ("II", "D3"), ("III", "D3")])
def test_every_trainable_tensor_matches_fd(stage, depth_mode):
    params = make_params()
    batch = make_batch()
    _, grads, _ = gradient(params, batch, stage, W, CFG)
    names = trainable_names(params, stage, depth_mode)
    assert set(grads) == set(names)
    rng = np.random.default_rng(7)
    run_fd_suite(
        lambda name: fd_reference(params, batch, stage, name),
        params, grads, names, rng, max_elements=MAX_ELEMENTS,
        label=f"stage {stage}",
    )


def test_frozen_tensors_have_no_gradient():
    params = make_params()
    batch = make_batch(depth3d=21)  # volumetric mode: tile projection frozen
    _, grads, _ = gradient(params, batch, "II", W, CFG)
    assert not any(n.startswith(("tx.", "pool2d_", "da.", "feat.proj.")) for n in grads)
    _, grads3, _ = gradient(params, batch, "III", W, CFG)
    assert not any(n.startswith("da.") for n in grads3)


def test_gradient_deterministic():
    params = make_params()
    batch = make_batch()
    l1, g1, _ = gradient(params, batch, "I", W, CFG)
    l2, g2, _ = gradient(params, batch, "I", W, CFG)
    assert l1 == l2
    for name in g1:
        np.testing.assert_array_equal(g1[name], g2[name])


def test_reversal_flips_encoder_sign():
    """Upstream gradient of the adversarial term is the negation of the
    plain classification gradient."""
    params = make_params()
    batch = make_batch()
    w_on = LossWeights(lambda_cont=0.0, lambda_rec=0.0, lambda_da=1.0)
    _, grads_on, _ = gradient(params, batch, "I", w_on, CFG)
    name = "tx.head.w"
    flat = params[name].reshape(-1)
    rng = np.random.default_rng(3)
    for idx in rng.choice(flat.size, size=4, replace=False):
        orig = flat[idx]
        flat[idx] = orig + H_FD
        _, _, p_plus = gradient(params, batch, "I", w_on, CFG)
        flat[idx] = orig - H_FD
        _, _, p_minus = gradient(params, batch, "I", w_on, CFG)
        flat[idx] = orig
        fd_da = (p_plus["da"] - p_minus["da"]) / (2 * H_FD)
        an = grads_on[name].reshape(-1)[idx]
        assert abs(an - (-fd_da)) / max(abs(fd_da), 1e-8) < 1e-6
