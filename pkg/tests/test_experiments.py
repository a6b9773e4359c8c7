from dataclasses import replace

from lensctr import experiments
from lensctr.config import LensConfig
from lensctr.synthdata import DatasetSpec, PlantedSignal

TINY = DatasetSpec(
    n_items=20,
    n_users=40,
    n_samples=2000,
    max_len=12,
    target_samples_per_item=100.0,
    planted=PlantedSignal(recency_weight=3.0, target_match_weight=0.0, metadata_weight=1.0),
)
MODEL = replace(experiments.QUERYPOS, n_queries=2, d_model=4, n_layers=1, n_heads=1, mlp_head=(8, 1))


def tiny_direction(margin):
    return experiments.Direction(
        "tiny",
        experiments._cell("lens", experiments.full_lens(MODEL, "item", rank=2), TINY, 1, (1, 2)),
        experiments._cell("qpos", MODEL, TINY, 1, (1, 2)),
        margin,
    )


def test_named_setups_validate_and_resolve_conditions():
    for spec in (experiments.RECENCY, experiments.PROFILE, experiments.SPARSE):
        spec.validate()
    dirs = {d.name: d for d in experiments.all_directions()}
    assert dirs["lens_vs_querypos"].better.model.lens.condition_source == "item"
    assert dirs["typed_vs_click_only"].better.model.lens.condition_source == "item_seq"
    assert dirs["typed_vs_click_only"].worse.dataset.history_protocol == "click_only"
    assert dirs["querypos_vs_none"].worse.model.position == "none"
    for d in dirs.values():
        assert d.better.model.max_len == d.better.dataset.max_len
        assert d.better.seeds == (42, 123, 456)


def test_run_direction_gap_and_csvs(tmp_path):
    res = experiments.run_direction(tiny_direction(-1.0), tmp_path)
    assert res.passed and res.gap == res.better_mean - res.worse_mean
    assert len(res.rows) == 4
    assert (tmp_path / "results.csv").read_text().count("\n") == 5
    strict = experiments.run_direction(tiny_direction(res.gap + 1e-9))
    assert not strict.passed
    assert (strict.better_mean, strict.worse_mean) == (res.better_mean, res.worse_mean)


def test_identical_cells_train_once(monkeypatch):
    calls = []
    real = experiments.run_cell
    monkeypatch.setattr(experiments, "run_cell", lambda exp, seed: calls.append(seed) or real(exp, seed))
    monkeypatch.setattr(experiments, "_ROWS", {})
    d = tiny_direction(0.0)
    experiments.run_direction(d)
    experiments.run_direction(replace(d, worse=replace(d.worse, cell_id="renamed")))
    assert len(calls) == 4


def test_lens_cell_differs_from_reference_only_in_lens():
    d = experiments.profile_direction()
    assert replace(d.better.model, lens=LensConfig()) == d.worse.model
