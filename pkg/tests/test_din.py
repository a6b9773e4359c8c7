import numpy as np
import pytest
from helpers import pad_batch, random_batch

from lensctr.backbone import LatentQueryModel
from lensctr.config import ConfigError, DinConfig, FeatureSchema, ModelConfig
from lensctr.din import DinModel, din_attention
from lensctr.layers import MLP
from lensctr.numcore import ParameterStore, Tensor, grad_check
from lensctr.trainer import bce_loss

SCHEMA = FeatureSchema(n_items=15, field_vocab=(3, 4), n_dense=1)


def score_mlp(D=3, seed=0):
    return MLP(ParameterStore(seed), "s", 4 * D, (5, 1))


def din_oracle(mlp, target, tokens, valid_len):
    """Per-sample loop: score every valid token, softmax, weighted sum."""
    B, L, D = tokens.shape
    out = np.zeros((B, D))
    for b in range(B):
        n = valid_len[b]
        if n == 0:
            continue
        scores = []
        for j in range(n):
            tok, tgt = tokens[b, j], target[b]
            x = np.concatenate([tok, tgt, tok * tgt, tok - tgt])[None, :]
            scores.append(float(mlp(Tensor(x)).data[0, 0]))
        e = np.exp(np.array(scores) - max(scores))
        w = e / e.sum()
        out[b] = (w[:, None] * tokens[b, :n]).sum(axis=0)
    return out


def test_din_attention_matches_loop_oracle(rng):
    mlp = score_mlp()
    tokens = rng.normal(size=(4, 5, 3))
    target = rng.normal(size=(4, 3))
    vl = np.array([0, 1, 3, 5])
    got = din_attention(mlp, Tensor(target), Tensor(tokens), vl).data
    np.testing.assert_allclose(got, din_oracle(mlp, target, tokens, vl), rtol=0, atol=1e-13)


def test_single_token_and_identical_tokens(rng):
    mlp = score_mlp()
    tokens = rng.normal(size=(2, 4, 3))
    tokens[1] = tokens[1, 0]
    got = din_attention(mlp, Tensor(rng.normal(size=(2, 3))), Tensor(tokens), np.array([1, 4])).data
    assert np.array_equal(got[0], tokens[0, 0])
    np.testing.assert_allclose(got[1], tokens[1, 0], rtol=0, atol=1e-15)


def test_empty_history_reads_zero(rng):
    got = din_attention(score_mlp(), Tensor(rng.normal(size=(1, 3))), Tensor(np.zeros((1, 2, 3))), np.array([0])).data
    assert np.array_equal(got, np.zeros((1, 3)))


def test_full_side_only_changes_head_width():
    a = DinModel(DinConfig(d_model=4, max_len=6, full_side=True), SCHEMA, seed=0)
    b = DinModel(DinConfig(d_model=4, max_len=6, full_side=False), SCHEMA, seed=0)
    assert a.params["head.0.w"].shape[0] - b.params["head.0.w"].shape[0] == 3 * 4
    shared = [n for n in b.params.names() if n != "head.0.w"]
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in shared)


def test_zero_head_gives_half(rng):
    m = DinModel(DinConfig(d_model=4, max_len=6), SCHEMA, seed=0)
    for layer in m.head.layers:
        layer.w.data[...] = 0.0
        layer.b.data[...] = 0.0
    assert np.all(m.forward(random_batch(rng, SCHEMA, 6)).data == 0.5)


def test_padding_invariance_and_gradcheck(rng):
    m = DinModel(DinConfig(d_model=2, max_len=4, attn_mlp=(3, 1), mlp_head=(4, 1)), SCHEMA, seed=1)
    batch = random_batch(rng, SCHEMA, 4)
    assert np.array_equal(m.logits(batch).data, m.logits(pad_batch(batch, 3)).data)
    assert grad_check(lambda: bce_loss(m.logits(batch), batch.labels), m.params) <= 1e-5


def test_shares_embedding_init_with_latent_models():
    din = DinModel(DinConfig(d_model=4, max_len=6), SCHEMA, seed=9)
    lq = LatentQueryModel(ModelConfig(d_model=4, max_len=6, n_heads=1), SCHEMA, seed=9)
    emb = [n for n in din.params.names() if n.startswith("emb.")]
    assert emb and all(np.array_equal(din.params[n].data, lq.params[n].data) for n in emb)


def test_din_config_validation():
    with pytest.raises(ConfigError):
        DinConfig(mlp_head=(4, 2)).validate()
