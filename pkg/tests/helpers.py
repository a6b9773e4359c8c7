"""Random configs and batches shared by the unit and acceptance tests."""

from dataclasses import replace

import numpy as np

from lensctr.backbone import LatentQueryModel
from lensctr.config import FeatureSchema, LensConfig, ModelConfig, Switches
from lensctr.embeddings import ACTION_PAD, Batch, SequenceBatch


def random_schema(rng) -> FeatureSchema:
    n_fields = int(rng.integers(0, 3))
    return FeatureSchema(
        n_items=int(rng.integers(5, 30)),
        field_vocab=tuple(int(v) for v in rng.integers(2, 6, n_fields)),
        n_dense=int(rng.integers(0, 2)),
    )


def random_lens_config(rng) -> ModelConfig:
    heads = int(rng.choice([1, 2]))
    return ModelConfig(
        n_queries=int(rng.integers(1, 4)),
        d_model=heads * int(rng.integers(1, 4)),
        n_layers=int(rng.integers(1, 3)),
        n_heads=heads,
        max_len=int(rng.integers(1, 9)),
        mlp_head=(int(rng.integers(2, 6)), 1),
        k_pool=int(rng.integers(0, 3)),
        switches=Switches(*(bool(b) for b in rng.integers(0, 2, 3))),
        position="query_specific",
        lens=LensConfig(
            enabled=True,
            tcqg=bool(rng.integers(0, 2)),
            tcpb=True,
            rank=int(rng.integers(1, 4)),
            condition_source=str(rng.choice(["item", "item_seq"])),
        ),
    )


def random_batch(rng, schema: FeatureSchema, max_len: int, batch: int = 5, width: int | None = None) -> Batch:
    width = max_len if width is None else width
    valid = rng.integers(0, max_len + 1, batch)
    items = np.zeros((batch, width), dtype=np.int64)
    actions = np.full((batch, width), ACTION_PAD, dtype=np.int64)
    for b, n in enumerate(valid):
        items[b, :n] = rng.integers(1, schema.n_items + 1, n)
        actions[b, :n] = rng.integers(0, 4, n)
    return Batch(
        item_ids=rng.integers(1, schema.n_items + 1, batch),
        seq=SequenceBatch(items, actions, valid),
        cat_fields=np.array([rng.integers(0, v, batch) for v in schema.field_vocab], dtype=np.int64).T.reshape(batch, -1),
        dense=rng.normal(size=(batch, schema.n_dense)),
        labels=rng.integers(0, 2, batch).astype(np.float64),
    )


def pad_batch(batch: Batch, extra: int) -> Batch:
    """Same samples with ``extra`` more padding columns."""
    seq = batch.seq
    B = len(batch)
    items = np.concatenate([seq.item_ids, np.zeros((B, extra), dtype=np.int64)], axis=1)
    acts = np.concatenate([seq.action_types, np.full((B, extra), ACTION_PAD, dtype=np.int64)], axis=1)
    return replace(batch, seq=SequenceBatch(items, acts, seq.valid_len))


def lens_and_reference(cfg: ModelConfig, schema: FeatureSchema, seed: int, randomize_pos: bool = True):
    """A LENS model with zero projections and its QueryPos reference, sharing every common parameter."""
    lens = LatentQueryModel(cfg, schema, seed=seed)
    ref = LatentQueryModel(replace(cfg, lens=LensConfig()), schema, seed=seed)
    if randomize_pos:
        rng = np.random.default_rng(seed + 1)
        for name, t in ref.params.items():
            if name.startswith("pos."):
                t.data[...] = rng.normal(size=t.shape)
                lens.params[name].data[...] = t.data
    return lens, ref


# --- scalar-loop oracles ------------------------------------------------


def matmul_oracle(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def tcpb_oracle(c, W_tau, pos_emb, cols, q, r):
    B, L = cols.shape
    out = np.zeros((B, q, L))
    for b in range(B):
        m = W_tau @ c[b]
        for i in range(q):
            for j in range(L):
                s = 0.0
                for k in range(r):
                    s += m[i * r + k] * pos_emb[cols[b, j], k]
                out[b, i, j] = s
    return out


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))
