from .config import LossWeights, ModelConfig, N_TILE_STATS, TOKENS_PER_PLANE
from .losses import (
    da_forward,
    da_predict,
    loss_contrastive,
    loss_direct,
    loss_dual_contrastive,
    loss_reconstruction,
    total_loss,
)
from .network import (
    EmbeddingBundle,
    StageBatch,
    TokenOrigin,
    TokenSet,
    batch_patch_stats,
    domain_embedding,
    encode_transcriptome,
    featurize_forward,
    featurize_patch,
    gradient,
    patch_stats,
    pool,
    pool_cont_forward,
    pool_forward,
    pred_forward,
    predict_expression,
    tx_forward,
)
from .params import decayable, init_params, reinit_3d_poolers, trainable_names

__all__ = [
    "EmbeddingBundle",
    "LossWeights",
    "ModelConfig",
    "N_TILE_STATS",
    "StageBatch",
    "TOKENS_PER_PLANE",
    "TokenOrigin",
    "TokenSet",
    "batch_patch_stats",
    "da_forward",
    "da_predict",
    "decayable",
    "domain_embedding",
    "encode_transcriptome",
    "featurize_forward",
    "featurize_patch",
    "gradient",
    "init_params",
    "loss_contrastive",
    "loss_direct",
    "loss_dual_contrastive",
    "loss_reconstruction",
    "patch_stats",
    "pool",
    "pool_cont_forward",
    "pool_forward",
    "pred_forward",
    "predict_expression",
    "reinit_3d_poolers",
    "total_loss",
    "trainable_names",
    "tx_forward",
]
