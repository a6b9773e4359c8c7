"""DIN-style raw-item target attention baseline."""

from __future__ import annotations

import numpy as np

from .config import DinConfig, FeatureSchema, to_dict
from .embeddings import Batch, NonSeqEncoder, fuse_typed_tokens, item_embedding_params
from .layers import MLP, attend
from .numcore import ParameterStore, Tensor, add, concat, mul, reshape, sigmoid, sub


def din_attention(score_mlp: MLP, target: Tensor, tokens: Tensor, valid_len: np.ndarray) -> Tensor:
    """Target-weighted sum of history tokens; B x D.

    Each token is scored by an MLP over (token, target, token*target,
    token-target); scores are softmaxed over valid tokens only. An empty
    history reads out as the zero vector.
    """
    B, L, D = tokens.shape
    tgt = add(reshape(target, (B, 1, D)), Tensor(np.zeros((B, L, D))))
    feats = concat([tokens, tgt, mul(tokens, tgt), sub(tokens, tgt)], axis=-1)
    scores = reshape(score_mlp(feats), (B, 1, L))
    valid = (np.arange(L)[None, :] < valid_len[:, None])[:, None, :]
    out, _ = attend(scores, valid, tokens)
    return reshape(out, (B, D))


class DinModel:
    family = "din"

    def __init__(self, config: DinConfig, schema: FeatureSchema, seed: int = 0):
        self.config = config.validate()
        self.schema = schema
        self.seed = seed
        D = config.d_model
        self.params = store = ParameterStore(seed)
        self.item_table, self.action_table = item_embedding_params(store, schema, D)
        self.nonseq = NonSeqEncoder(store, schema, D)
        self.score_mlp = MLP(store, "din.score", 4 * D, config.attn_mlp)
        head_in = 2 * D + (self.nonseq.n_tokens * D if config.full_side else 0)
        self.head = MLP(store, "head", head_in, config.mlp_head)

    def logits(self, batch: Batch) -> Tensor:
        seq = batch.seq.trimmed()
        B = len(batch)
        tokens = fuse_typed_tokens(seq, self.item_table, self.action_table)
        t = self.item_table(batch.item_ids)
        pooled = din_attention(self.score_mlp, t, tokens, seq.valid_len)
        parts = [pooled, t]
        if self.config.full_side:
            parts.append(self.nonseq.flat(self.nonseq.tokens(batch.cat_fields, batch.dense), B))
        return reshape(self.head(concat(parts, axis=-1)), (B,))

    def forward(self, batch: Batch) -> Tensor:
        return sigmoid(self.logits(batch))

    def describe(self) -> dict:
        return {"family": self.family, "model": to_dict(self.config), "condition_source": None, "seed": self.seed}


__all__ = ["DinModel", "din_attention"]
