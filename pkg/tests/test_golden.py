"""Fixed-seed outputs recorded from a verified build.

Regenerate with ``python tests/test_golden.py --record`` after an intended
numerical change, and say why in the commit.
"""

import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from lensctr.backbone import LatentQueryModel
from lensctr.cli import TINY_MODEL, TINY_SCHEMA, perturb_lens_and_position, tiny_batch
from lensctr.config import DinConfig
from lensctr.din import DinModel
from lensctr.embeddings import build_fullside_vector, masked_mean
from lensctr.numcore import concat

GOLDEN = Path(__file__).with_name("golden_values.json")
CFG = replace(TINY_MODEL, n_heads=2)


def compute() -> dict[str, np.ndarray]:
    model = LatentQueryModel(CFG, TINY_SCHEMA, seed=0)
    perturb_lens_and_position(model, 1)
    batch = tiny_batch(TINY_SCHEMA, CFG.max_len, batch=8, seed=3)
    seq = batch.seq.trimmed()
    item_emb = model.item_table(seq.item_ids)
    s_bar = masked_mean(item_emb, seq.valid_len)
    t = model.item_table(batch.item_ids)
    ns = model.nonseq.tokens(batch.cat_fields, batch.dense)
    f = build_fullside_vector(t, model.nonseq.flat(ns, len(batch)), s_bar)
    Q = model.query_gen_out(f)
    pooled = model.pooled_tokens(s_bar)
    din = DinModel(DinConfig(d_model=CFG.d_model, max_len=CFG.max_len, mlp_head=(8, 1)), TINY_SCHEMA, seed=0)
    return {
        "fullside": f.data,
        "query_gen": Q.data,
        "query_boosting": model.query_boosting(0, concat([Q, pooled], axis=1), ns).data,
        "seq_pooling": pooled.data,
        "logits": model.logits(batch).data,
        "probabilities": model.forward(batch).data,
        "din_probabilities": din.forward(batch).data,
    }


def record() -> None:
    GOLDEN.write_text(json.dumps({k: v.tolist() for k, v in compute().items()}, indent=1) + "\n")


@pytest.fixture(scope="module")
def values():
    return compute()


@pytest.mark.parametrize(
    "name", ["fullside", "query_gen", "query_boosting", "seq_pooling", "logits", "probabilities", "din_probabilities"]
)
def test_matches_recorded(values, name):
    want = np.array(json.loads(GOLDEN.read_text())[name])
    np.testing.assert_allclose(values[name], want, rtol=1e-12, atol=1e-14)


def test_fullside_order_is_target_fields_mean(values):
    D = CFG.d_model
    f = values["fullside"]
    n_tokens = len(TINY_SCHEMA.field_vocab) + TINY_SCHEMA.n_dense
    assert f.shape == (8, D + n_tokens * D + D)
    # the first sample has an empty history, so its trailing mean block is zero
    assert np.all(f[0, -D:] == 0.0) and np.any(f[0, :D] != 0.0)


if __name__ == "__main__" and "--record" in sys.argv:
    record()
