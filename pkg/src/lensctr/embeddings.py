"""Embedding tables, model input batches and sequence-side features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import FeatureSchema
from .numcore import ParameterStore, Tensor, concat, gather, mul, reshape, sum_

PAD_ID = 0
N_ACTIONS = 4
ACTION_PAD = N_ACTIONS  # padding marker in action_types; has its own table row
EMB_STD = 0.02


class EmbeddingTable:
    def __init__(self, store: ParameterStore, name: str, vocab_size: int, dim: int):
        self.name = name
        self.vocab_size = vocab_size
        self.dim = dim
        self.weights = store.normal(name, (vocab_size, dim), EMB_STD)

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"{self.name}: id out of range [0, {self.vocab_size})")
        return gather(self.weights, ids)


@dataclass(frozen=True)
class SequenceBatch:
    """Left-packed histories: position p < valid_len[b] holds the p-th oldest
    kept behaviour, everything after is padding (item 0, action ACTION_PAD)."""

    item_ids: np.ndarray
    action_types: np.ndarray
    valid_len: np.ndarray

    @property
    def width(self) -> int:
        return self.item_ids.shape[1]

    def mask(self) -> np.ndarray:
        return np.arange(self.width)[None, :] < self.valid_len[:, None]

    def trimmed(self) -> "SequenceBatch":
        """Drop trailing all-padding columns; forward passes run on this view so
        that extra padding cannot change any reduction."""
        width = int(self.valid_len.max()) if self.valid_len.size else 0
        return SequenceBatch(self.item_ids[:, :width], self.action_types[:, :width], self.valid_len)


@dataclass(frozen=True)
class Batch:
    item_ids: np.ndarray  # candidate items, B
    seq: SequenceBatch
    cat_fields: np.ndarray  # B x n_fields
    dense: np.ndarray  # B x n_dense
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.item_ids)

    def subset(self, idx) -> "Batch":
        seq = SequenceBatch(self.seq.item_ids[idx], self.seq.action_types[idx], self.seq.valid_len[idx])
        labels = None if self.labels is None else self.labels[idx]
        return Batch(self.item_ids[idx], seq, self.cat_fields[idx], self.dense[idx], labels)


def validate_sequence(batch: SequenceBatch) -> None:
    mask = batch.mask()
    if np.any(batch.valid_len < 0) or np.any(batch.valid_len > batch.width):
        raise ValueError("valid_len outside [0, width]")
    if np.any(batch.item_ids[~mask] != PAD_ID):
        raise ValueError("non-padding item id at a position >= valid_len")
    acts = batch.action_types[mask]
    if acts.size and (acts.min() < 0 or acts.max() >= N_ACTIONS):
        raise ValueError(f"action types must lie in [0, {N_ACTIONS})")


def fuse_typed_tokens(
    batch: SequenceBatch,
    item_table: EmbeddingTable,
    action_table: EmbeddingTable,
    item_emb: Tensor | None = None,
) -> Tensor:
    """Token = item embedding + action embedding at valid positions, zero at padding.

    ``item_emb`` may carry an already gathered ``item_table(batch.item_ids)``.
    """
    if item_table.dim != action_table.dim:
        raise ValueError(f"item dim {item_table.dim} != action dim {action_table.dim}")
    if item_emb is None:
        item_emb = item_table(batch.item_ids)
    mask = batch.mask()[:, :, None].astype(np.float64)
    return mul(item_emb + action_table(batch.action_types), mask)


def masked_mean(tokens: Tensor, valid_len: np.ndarray) -> Tensor:
    """Mean over the first valid_len positions; an empty sequence gives zeros."""
    B, L = tokens.shape[:2]
    mask = (np.arange(L)[None, :] < valid_len[:, None]).astype(np.float64)[:, :, None]
    total = sum_(mul(tokens, mask), axis=1)
    inv = 1.0 / np.maximum(valid_len, 1).astype(np.float64)
    return mul(total, inv[:, None])


def build_fullside_vector(target: Tensor, nonseq_fields: Tensor, seq_mean: Tensor) -> Tensor:
    """Canonical order: (target, non-sequential fields, sequence mean)."""
    return concat([target, nonseq_fields, seq_mean], axis=-1)


class NonSeqEncoder:
    """One D-dim table per categorical field; each dense scalar x maps to x*w + b."""

    def __init__(self, store: ParameterStore, schema: FeatureSchema, dim: int):
        self.dim = dim
        self.tables = [
            EmbeddingTable(store, f"emb.field{k}", vocab, dim) for k, vocab in enumerate(schema.field_vocab)
        ]
        self.dense = [
            (store.normal(f"emb.dense{k}.w", (dim,), EMB_STD), store.zeros(f"emb.dense{k}.b", (dim,)))
            for k in range(schema.n_dense)
        ]

    @property
    def n_tokens(self) -> int:
        return len(self.tables) + len(self.dense)

    def tokens(self, cat_fields: np.ndarray, dense: np.ndarray) -> Tensor | None:
        """B x T_ns x D, or None when the schema has no non-sequential fields."""
        parts = [reshape(table(cat_fields[:, k]), (-1, 1, self.dim)) for k, table in enumerate(self.tables)]
        for k, (w, b) in enumerate(self.dense):
            x = dense[:, k][:, None, None]
            parts.append(mul(w, x) + b)
        if not parts:
            return None
        return concat(parts, axis=1)

    def flat(self, tokens: Tensor | None, batch_size: int) -> Tensor:
        if tokens is None:
            return Tensor(np.zeros((batch_size, 0)))
        return reshape(tokens, (batch_size, -1))


def item_embedding_params(store: ParameterStore, schema: FeatureSchema, dim: int):
    item = EmbeddingTable(store, "emb.item", schema.n_items + 1, dim)
    action = EmbeddingTable(store, "emb.action", N_ACTIONS + 1, dim)
    return item, action


EMBEDDING_PREFIX = "emb."


def embedding_param_count(store: ParameterStore) -> int:
    return store.count([EMBEDDING_PREFIX])


__all__ = [
    "ACTION_PAD",
    "Batch",
    "EmbeddingTable",
    "NonSeqEncoder",
    "PAD_ID",
    "SequenceBatch",
    "build_fullside_vector",
    "fuse_typed_tokens",
    "masked_mean",
]
