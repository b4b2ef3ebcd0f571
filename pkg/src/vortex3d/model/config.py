"""Model width/depth configuration and loss weighting."""

from __future__ import annotations

from dataclasses import dataclass, field

N_TILE_STATS = 8
TOKENS_PER_PLANE = 196  # 14 x 14 tiles


@dataclass(frozen=True)
class ModelConfig:
    """Widths and depths of every trainable component.

    Defaults match the production token/embedding contract (768-d tokens,
    512-d embeddings); tests and desk-scale runs shrink everything through
    this config.
    """

    d_token: int = 768
    d_embed: int = 512
    pool_heads: int = 8
    n_rec_queries: int = 32
    tx_layers: int = 2
    tx_heads: int = 8
    tx_mlp_ratio: int = 4
    pred_heads: int = 8
    pred_mlp_ratio: int = 4
    da_hidden: int = 128
    n_depths: int = 21
    n_bins: int = 51

    def __post_init__(self):
        if self.d_token % self.pool_heads:
            raise ValueError("d_token must be divisible by pool_heads")
        if self.d_embed % self.tx_heads or self.d_embed % self.pred_heads:
            raise ValueError("d_embed must be divisible by attention head counts")
        if self.n_depths < 1 or self.n_depths % 2 == 0:
            raise ValueError("n_depths must be a positive odd number")

    def depth_rows(self, depth_count):
        """Depth-embedding rows for a centered stack of `depth_count` planes."""
        if depth_count > self.n_depths:
            raise ValueError(f"depth {depth_count} exceeds table size {self.n_depths}")
        start = (self.n_depths - depth_count) // 2
        return list(range(start, start + depth_count))


@dataclass(frozen=True)
class LossWeights:
    lambda_cont: float = 1.0
    lambda_rec: float = 1.0
    lambda_da: float = 0.1
    lambda_dir: float = 1.0
    tau: float = 0.1
    tau_convention: str = "DIVIDE"  # DIVIDE: logits * (1/tau); MULTIPLY: logits * tau

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if min(self.lambda_cont, self.lambda_rec, self.lambda_da, self.lambda_dir) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau_convention not in ("DIVIDE", "MULTIPLY"):
            raise ValueError("tau_convention must be DIVIDE or MULTIPLY")

    @property
    def logit_scale(self):
        return 1.0 / self.tau if self.tau_convention == "DIVIDE" else self.tau
