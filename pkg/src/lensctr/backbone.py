"""HyFormer-style latent-query CTR model with optional position priors and LENS.

Forward pass::

    f   = [t ; fields ; s_bar]                       full-side vector
    Q   = QueryGen(f)            (x TCQG gate)       q x D
    Q   = [Q ; pooled tokens]    (seq-pooling switch)
    per layer:
        Q += CrossAttn(LN(Q), S, S)  with logits  QK/sqrt(d_h) + B_pos + B_tc
        Q += SelfAttn(LN(Q) [; ns tokens])[:queries]
        Q += FFN(LN(Q))
    logit = MLP([flatten(Q[:q]) ; f])

Biases are shared across heads. Rows of the bias belonging to pooled tokens
are zero.
"""

from __future__ import annotations

import math

import numpy as np

from .config import FeatureSchema, ModelConfig, to_dict
from .embeddings import (
    Batch,
    NonSeqEncoder,
    build_fullside_vector,
    fuse_typed_tokens,
    item_embedding_params,
    masked_mean,
)
from .layers import MLP, LayerNorm, Linear, attend, merge_heads, split_heads
from .lens import LensParams, condition_vector, select_condition
from .numcore import (
    ParameterStore,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    transpose,
)
from .posbias import StaticPosition, column_index

__all__ = ["ModelConfig", "LatentQueryModel"]


class _FFN:
    """Shared FFN, or one weight set per query token when ``n_tokens`` is given."""

    def __init__(self, store: ParameterStore, name: str, dim: int, hidden: int, n_tokens: int | None):
        self.per_token = n_tokens is not None
        if self.per_token:
            self.w1 = store.fan_in(f"{name}.w1", (n_tokens, dim, hidden), dim)
            self.b1 = store.zeros(f"{name}.b1", (n_tokens, 1, hidden))
            self.w2 = store.fan_in(f"{name}.w2", (n_tokens, hidden, dim), hidden)
            self.b2 = store.zeros(f"{name}.b2", (n_tokens, 1, dim))
        else:
            self.l1 = Linear(store, f"{name}.1", dim, hidden)
            self.l2 = Linear(store, f"{name}.2", hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.per_token:
            return self.l2(relu(self.l1(x)))
        B, N, D = x.shape
        xt = reshape(x, (B, N, 1, D))
        h = relu(add(matmul(xt, self.w1), self.b1))
        return reshape(add(matmul(h, self.w2), self.b2), (B, N, D))


class LatentQueryModel:
    family = "hyformer"

    def __init__(self, config: ModelConfig, schema: FeatureSchema, seed: int = 0, samples_per_item: float | None = None):
        self.config = config.validate()
        self.schema = schema
        self.seed = seed
        cfg = config
        D, q = cfg.d_model, cfg.n_queries
        self.params = store = ParameterStore(seed)

        self.item_table, self.action_table = item_embedding_params(store, schema, D)
        self.nonseq = NonSeqEncoder(store, schema, D)
        self.fullside_dim = 2 * D + self.nonseq.n_tokens * D

        self.query_gen = Linear(store, "querygen", self.fullside_dim, q * D)
        self.k_pool = cfg.k_pool if cfg.switches.seq_pooling_tokens else 0
        if self.k_pool:
            self.pool = Linear(store, "pool", D, self.k_pool * D)
        self.n_tokens = q + self.k_pool

        self.position = StaticPosition(store, cfg)
        self.lens = None
        self.condition_source = None
        if cfg.lens.enabled:
            self.condition_source = select_condition(samples_per_item, cfg.lens.condition_source)
            self.lens = LensParams(store, cfg, self.condition_source)

        self.blocks = []
        per_q = self.n_tokens if cfg.switches.per_query_ffn else None
        for l in range(cfg.n_layers):
            self.blocks.append(
                {
                    "ln_x": LayerNorm(store, f"block{l}.ln_x", D),
                    "xq": Linear(store, f"block{l}.xattn.q", D, D, bias=False),
                    "xk": Linear(store, f"block{l}.xattn.k", D, D, bias=False),
                    "xv": Linear(store, f"block{l}.xattn.v", D, D, bias=False),
                    "xo": Linear(store, f"block{l}.xattn.o", D, D),
                    "ln_b": LayerNorm(store, f"block{l}.ln_boost", D),
                    "sq": Linear(store, f"block{l}.boost.q", D, D, bias=False),
                    "sk": Linear(store, f"block{l}.boost.k", D, D, bias=False),
                    "sv": Linear(store, f"block{l}.boost.v", D, D, bias=False),
                    "so": Linear(store, f"block{l}.boost.o", D, D),
                    "ln_f": LayerNorm(store, f"block{l}.ln_ffn", D),
                    "ffn": _FFN(store, f"block{l}.ffn", D, cfg.ffn_mult * D, per_q),
                }
            )
        self.head = MLP(store, "head", q * D + self.fullside_dim, cfg.mlp_head)
        self.capture: dict | None = None

    # -- pieces ----------------------------------------------------------

    def query_gen_out(self, f: Tensor) -> Tensor:
        B = f.shape[0]
        return reshape(self.query_gen(f), (B, self.config.n_queries, self.config.d_model))

    def pooled_tokens(self, seq_tokens_mean: Tensor) -> Tensor:
        B = seq_tokens_mean.shape[0]
        return reshape(self.pool(seq_tokens_mean), (B, self.k_pool, self.config.d_model))

    def cross_attention(self, l: int, Q: Tensor, S: Tensor, valid: np.ndarray, bias: Tensor | None) -> Tensor:
        blk = self.blocks[l]
        H = self.config.n_heads
        x = blk["ln_x"](Q)
        qh = split_heads(blk["xq"](x), H)
        kh = split_heads(blk["xk"](S), H)
        vh = split_heads(blk["xv"](S), H)
        logits = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(self.config.head_dim))
        if bias is not None:
            B, n, L = bias.shape
            logits = add(logits, reshape(bias, (B, 1, n, L)))
        out, weights = attend(logits, valid[:, None, None, :], vh)
        if self.capture is not None:
            self.capture.setdefault("cross_attention", []).append(weights.data)
        return add(Q, blk["xo"](merge_heads(out)))

    def query_boosting(self, l: int, Q: Tensor, ns_tokens: Tensor | None) -> Tensor:
        blk = self.blocks[l]
        H = self.config.n_heads
        x = blk["ln_b"](Q)
        kv = x if ns_tokens is None else concat([x, ns_tokens], axis=1)
        qh = split_heads(blk["sq"](x), H)
        kh = split_heads(blk["sk"](kv), H)
        vh = split_heads(blk["sv"](kv), H)
        logits = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(self.config.head_dim))
        out, _ = attend(logits, np.ones(logits.shape, dtype=bool), vh)
        Q = add(Q, blk["so"](merge_heads(out)))
        return add(Q, blk["ffn"](blk["ln_f"](Q)))

    def _bias(self, l: int, cols: np.ndarray, cond) -> Tensor | None:
        parts = []
        static = self.position.bias(l, cols)
        if static is not None:
            parts.append(static)
        if self.lens is not None and self.lens.W_tau:
            parts.append(self.lens.bias(cond, l, cols))
        if not parts:
            return None
        bias = parts[0]
        for p in parts[1:]:
            bias = add(bias, p)
        if self.k_pool:
            B, rows, L = bias.shape
            if rows == 1:
                bias = add(bias, Tensor(np.zeros((B, self.config.n_queries, L))))
            bias = concat([bias, Tensor(np.zeros((B, self.k_pool, L)))], axis=1)
        return bias

    # -- forward ---------------------------------------------------------

    def logits(self, batch: Batch) -> Tensor:
        cfg = self.config
        seq = batch.seq.trimmed()
        B = len(batch)
        cols, valid = column_index(seq.valid_len, seq.width, cfg.max_len)

        item_emb = self.item_table(seq.item_ids)
        s_bar = masked_mean(item_emb, seq.valid_len)
        S = fuse_typed_tokens(seq, self.item_table, self.action_table, item_emb)
        offset = self.position.token_offset(cols, valid)
        if offset is not None:
            S = add(S, offset)

        t = self.item_table(batch.item_ids)
        ns_tokens = self.nonseq.tokens(batch.cat_fields, batch.dense)
        f = build_fullside_vector(t, self.nonseq.flat(ns_tokens, B), s_bar)

        Q = self.query_gen_out(f)
        cond = None
        if self.lens is not None:
            cond = condition_vector(self.condition_source, t, s_bar)
            if self.lens.W_t is not None:
                gate = self.lens.gate(cond)
                if self.capture is not None:
                    self.capture["gate"] = gate.data
                Q = mul(Q, gate)
        if self.k_pool:
            Q = concat([Q, self.pooled_tokens(masked_mean(S, seq.valid_len))], axis=1)

        boost_tokens = ns_tokens if cfg.switches.ns_tokens_in_boosting else None
        for l in range(cfg.n_layers):
            bias = self._bias(l, cols, cond)
            Q = self.cross_attention(l, Q, S, valid, bias)
            Q = self.query_boosting(l, Q, boost_tokens)

        Q = slice_(Q, (slice(None), slice(0, cfg.n_queries)))
        head_in = concat([reshape(Q, (B, -1)), f], axis=-1)
        return reshape(self.head(head_in), (B,))

    def forward(self, batch: Batch) -> Tensor:
        return sigmoid(self.logits(batch))

    def describe(self) -> dict:
        return {
            "family": self.family,
            "model": to_dict(self.config),
            "condition_source": self.condition_source,
            "seed": self.seed,
        }
