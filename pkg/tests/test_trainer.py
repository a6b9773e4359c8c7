import csv
import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import auc_oracle
from lensctr.config import DinConfig, LensConfig, ModelConfig, Switches, TrainConfig
from lensctr.numcore import ParameterStore, Tensor
from lensctr.synthdata import DatasetSpec, PlantedSignal, generate
from lensctr.trainer import (
    RESULT_COLUMNS,
    Adam,
    TrainingError,
    aggregate,
    bce_loss,
    build_model,
    dataset_batches,
    evaluate,
    evaluate_auc,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    staged_grid,
    train,
)

SPEC = DatasetSpec(
    n_items=20,
    n_users=40,
    n_samples=2000,
    max_len=12,
    target_samples_per_item=100,
    planted=PlantedSignal(recency_weight=3.0, target_match_weight=0.0, metadata_weight=1.0),
)
MODEL = ModelConfig(n_queries=2, d_model=4, n_layers=1, n_heads=1, max_len=12, mlp_head=(8, 1))
FAST = TrainConfig(epochs=1, batch_size=128)


@pytest.fixture(scope="module")
def data():
    return dataset_batches(generate(SPEC), SPEC.max_len)


# --- loss ----------------------------------------------------------------


def test_bce_examples():
    assert float(bce_loss(Tensor([0.0]), [1]).data) == pytest.approx(math.log(2), abs=1e-15)
    assert float(bce_loss(Tensor([50.0]), [1]).data) <= 1e-20


def test_bce_vs_high_precision_oracle(rng):
    x = rng.normal(size=64) * 8
    y = rng.integers(0, 2, 64)
    mpmath.mp.dps = 50
    exact = sum(
        -(yi * mpmath.log(1 / (1 + mpmath.e ** (-mpmath.mpf(xi)))) + (1 - yi) * mpmath.log(1 - 1 / (1 + mpmath.e ** (-mpmath.mpf(xi)))))
        for xi, yi in zip(x.tolist(), y.tolist())
    ) / 64
    assert float(bce_loss(Tensor(x), y).data) == pytest.approx(float(exact), rel=1e-13)


# --- Adam ----------------------------------------------------------------


def _scalar_store(value):
    store = ParameterStore(0)
    store.add("x", np.array([value]), "test")
    return store


def test_adam_zero_gradient_leaves_params():
    store = _scalar_store(1.5)
    opt = Adam(store)
    store["x"].grad = np.zeros(1)
    opt.step()
    assert store["x"].data[0] == 1.5


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-4])
def test_adam_first_step_is_lr_sign(g):
    store = _scalar_store(0.0)
    opt = Adam(store, lr=1e-3)
    store["x"].grad = np.array([g])
    opt.step()
    assert abs(store["x"].data[0] + 1e-3 * np.sign(g)) <= 1e-6


def test_adam_three_steps_on_square():
    # hand trace of f(x) = x^2 from x = 1 with lr 1e-3, betas (0.9, 0.999), eps 1e-8
    expected = [0.999000000005, 0.9980000262138343, 0.9970000960651408]
    store = _scalar_store(1.0)
    opt = Adam(store)
    for want in expected:
        store["x"].grad = 2 * store["x"].data
        opt.step()
        assert store["x"].data[0] == pytest.approx(want, abs=1e-12)
    assert opt.t == 3


def test_adam_rejects_non_finite_gradient():
    store = _scalar_store(1.0)
    store["x"].grad = np.array([np.nan])
    with pytest.raises(TrainingError, match="parameter x"):
        Adam(store).step()


# --- AUC -----------------------------------------------------------------


def test_auc_examples():
    assert evaluate_auc([0.9, 0.1], [1, 0]) == 1.0
    assert evaluate_auc([0.3] * 6, [1, 0, 1, 0, 0, 0]) == 0.5
    with pytest.raises(ValueError, match="AUC undefined"):
        evaluate_auc([0.1, 0.2], [1, 1])


def test_auc_200_random_pairs(rng):
    s = rng.random(200)
    y = rng.integers(0, 2, 200)
    assert abs(evaluate_auc(s, y) - auc_oracle(s, y)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 500), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_auc_matches_pairwise_oracle(n, levels, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, levels, n) / levels  # coarse grid forces ties
    assert abs(evaluate_auc(s, y) - auc_oracle(s, y)) <= 1e-12


# --- training ------------------------------------------------------------


def test_zero_epochs_reports_init_metrics(data):
    tr, ev = data
    m = build_model("hyformer", MODEL, SPEC.schema(), 1)
    r0 = train(m, tr, ev, replace(FAST, epochs=0))
    assert r0 == evaluate(m, ev, FAST.seed, "")
    assert r0.n_pos + r0.n_neg == len(ev)


def test_lens_at_init_equals_querypos_metrics(data):
    tr, ev = data
    qpos = replace(MODEL, position="query_specific")
    lens = replace(qpos, lens=LensConfig(enabled=True, condition_source="item_seq"))
    a = train(build_model("hyformer", qpos, SPEC.schema(), 3), tr, ev, replace(FAST, epochs=0))
    b = train(build_model("hyformer", lens, SPEC.schema(), 3), tr, ev, replace(FAST, epochs=0))
    assert (a.auc, a.logloss) == (b.auc, b.logloss)


def test_training_is_deterministic(data):
    tr, ev = data
    runs = [train(build_model("hyformer", MODEL, SPEC.schema(), 7), tr, ev, FAST) for _ in range(2)]
    assert runs[0] == runs[1]


def test_training_reduces_loss(data):
    tr, ev = data
    m = build_model("hyformer", MODEL, SPEC.schema(), 2)
    before = evaluate(m, ev, 0, "")
    after = train(m, tr, ev, replace(FAST, epochs=3))
    assert after.logloss < before.logloss


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_aborts_with_step(data):
    tr, ev = data
    m = build_model("hyformer", MODEL, SPEC.schema(), 0)
    m.params["head.0.w"].data[...] = np.inf
    with pytest.raises(TrainingError, match="step 0"):
        train(m, tr, ev, FAST)


def test_aggregate_matches_manual():
    vals = [0.71, 0.69, 0.74]
    mean, std = aggregate(vals)
    mu = sum(vals) / 3
    assert mean == pytest.approx(mu, abs=1e-15)
    assert std == pytest.approx(math.sqrt(sum((v - mu) ** 2 for v in vals) / 2), abs=1e-15)
    assert aggregate([0.5]) == (0.5, 0.0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, data):
    tr, ev = data
    cfg = replace(MODEL, position="query_specific", lens=LensConfig(enabled=True, condition_source="auto"))
    m = build_model("hyformer", cfg, SPEC.schema(), 4, samples_per_item=100)
    train(m, tr, ev, FAST)
    save_checkpoint(tmp_path, m, {"note": "test"})
    loaded, manifest = load_checkpoint(tmp_path)
    assert loaded.condition_source == "item"
    assert np.array_equal(loaded.params.flat(), m.params.flat())
    assert evaluate(loaded, ev, 0, "") == evaluate(m, ev, 0, "")
    assert (tmp_path / "checkpoint.bin").stat().st_size == 8 * m.params.count()


def test_din_checkpoint_round_trip(tmp_path, data):
    _, ev = data
    m = build_model("din", DinConfig(d_model=4, max_len=12, mlp_head=(4, 1)), SPEC.schema(), 2)
    save_checkpoint(tmp_path, m, {})
    loaded, _ = load_checkpoint(tmp_path)
    assert np.array_equal(loaded.logits(ev).data, m.logits(ev).data)


# --- ablation ------------------------------------------------------------


def _grid(parts, seeds=(42,)):
    return staged_grid(SPEC, MODEL, DinConfig(d_model=4, max_len=12, mlp_head=(4, 1)), FAST, seeds, parts)


def test_part_four_switches():
    cells = {c.cell_id: c for c in _grid(("IV",))}
    assert cells["lens_wo_tcpb"].model.lens.tcpb is False and cells["lens_wo_tcpb"].model.lens.tcqg is True
    assert cells["lens_wo_tcqg"].model.lens.tcqg is False and cells["lens_wo_tcqg"].model.lens.tcpb is True
    assert all(c.model.position == "query_specific" for c in cells.values())


def test_grid_shapes():
    grid = _grid(("I", "II", "III", "IV"))
    assert [c.part for c in grid].count("I") == 6
    assert {c.role for c in grid} >= {"din", "hyformer_ref", "querypos", "lens_final"}
    ref = next(c for c in grid if c.role == "hyformer_ref")
    assert ref.model.switches == Switches(seq_pooling_tokens=True) and ref.model.position == "none"


def test_one_cell_one_seed(tmp_path):
    grid = _grid(("II",))[:1]
    result = run_ablation(grid, tmp_path)
    rows = list(csv.reader(open(tmp_path / "results.csv")))
    assert rows[0] == list(RESULT_COLUMNS) and len(rows) == 2
    summary = (tmp_path / "summary.csv").read_text().split("\n\n")[0].splitlines()
    assert len(summary) == 2 and len(result["summary"]) == 1


def test_deltas_equal_summary_arithmetic(tmp_path):
    grid = [c for c in _grid(("I", "II", "III")) if c.role]
    run_ablation(grid, tmp_path)
    block, delta_block = (tmp_path / "summary.csv").read_text().strip().split("\n\n")
    means = {r["cell_id"]: float(r["auc_mean"]) for r in csv.DictReader(block.splitlines())}
    deltas = {r["cell_id"]: float(r["auc_delta"]) for r in csv.DictReader(delta_block.splitlines())}
    assert deltas["delta_modules_over_querypos_base"] == means["lens_selected"] - means["query_specific_pos_bias"]
    assert deltas["delta_final_lens_vs_hyformer_ref"] == means["lens_selected"] - means["hyformer_seq_pooling"]
    assert deltas["delta_final_lens_vs_din"] == means["lens_selected"] - means["din"]


def test_failed_cell_is_recorded_and_grid_continues(tmp_path):
    good = _grid(("II",))[0]
    bad = replace(good, cell_id="broken", model=replace(good.model, max_len=3))
    result = run_ablation([bad, good], tmp_path)
    assert [f["cell_id"] for f in result["failures"]] == ["broken"]
    assert [s["cell_id"] for s in result["summary"]] == [good.cell_id]
    assert (tmp_path / "failures.csv").exists()


# --- sanity floor ----------------------------------------------------------


@pytest.fixture(scope="module")
def recency_data():
    from lensctr.experiments import RECENCY

    return RECENCY, dataset_batches(generate(RECENCY), RECENCY.max_len)


@pytest.mark.parametrize("family", ["din", "backbone", "querypos", "lens"])
def test_two_epochs_beat_init_by_005(recency_data, family):
    from lensctr.experiments import BACKBONE, QUERYPOS, full_lens

    spec, (tr, ev) = recency_data
    cfg = {
        "din": DinConfig(d_model=16, max_len=spec.max_len),
        "backbone": BACKBONE,
        "querypos": QUERYPOS,
        "lens": full_lens(QUERYPOS, "item"),
    }[family]
    m = build_model("din" if family == "din" else "hyformer", cfg, spec.schema(), 42, spec.target_samples_per_item)
    before = evaluate(m, ev, 42, "").auc
    after = train(m, tr, ev, replace(FAST, epochs=2)).auc
    assert after - before >= 0.05
