"""Named synthetic setups for the directional experiments and a paired runner.

Each ``Direction`` trains two cells on the same data and seeds and asks
whether ``mean(better) - mean(worse) >= margin``. Budgets (epochs, sizes)
are fixed per setup so a rerun gives the same numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .config import DinConfig, LensConfig, ModelConfig, Switches, TrainConfig
from .synthdata import DatasetSpec, PlantedSignal
from .lens import select_condition
from .trainer import ExperimentSpec, run_cell, summarise, write_ablation

SEEDS = (42, 123, 456)

# position matters, nothing else does: type match against the last few exposures
RECENCY = DatasetSpec(
    n_items=40,
    n_users=200,
    n_samples=20_000,
    max_len=200,
    target_samples_per_item=500.0,
    user_bias_std=0.0,
    interest_affinity=0.0,
    positive_rate=0.3,
    planted=PlantedSignal(recency_weight=8.0, target_match_weight=0.0, metadata_weight=0.0),
)

# which window counts depends on the candidate: four 8-exposure age windows
PROFILE = replace(
    RECENCY,
    max_len=50,
    planted=PlantedSignal(recency_weight=0.0, target_match_weight=8.0, metadata_weight=0.0, position_profile_count=4),
)

# ~2 samples/item; candidates follow the user's preferred profile, so the
# history also carries the window the candidate will use
SPARSE = DatasetSpec(
    n_items=100_000,
    n_users=4000,
    n_samples=200_000,
    max_len=50,
    target_samples_per_item=2.0,
    user_bias_std=1.0,
    interest_affinity=0.6,
    profile_affinity=1.0,
    positive_rate=0.3,
    planted=PlantedSignal(recency_weight=2.0, target_match_weight=6.0, metadata_weight=1.0, position_profile_count=4),
)

DENSE_EPOCHS = 12
SPARSE_EPOCHS = 2

BACKBONE = ModelConfig(
    n_queries=4,
    d_model=16,
    n_layers=2,
    n_heads=2,
    max_len=200,
    switches=Switches(seq_pooling_tokens=True),
)
QUERYPOS = replace(BACKBONE, position="query_specific")


def full_lens(model: ModelConfig, source: str, rank: int = 4) -> ModelConfig:
    return replace(model, position="query_specific", lens=LensConfig(enabled=True, rank=rank, condition_source=source))


@dataclass(frozen=True)
class Direction:
    name: str
    better: ExperimentSpec
    worse: ExperimentSpec
    margin: float


@dataclass(frozen=True)
class DirectionResult:
    name: str
    better_mean: float
    worse_mean: float
    margin: float
    seconds: float
    rows: tuple

    @property
    def gap(self) -> float:
        return self.better_mean - self.worse_mean

    @property
    def passed(self) -> bool:
        return self.gap >= self.margin

    def line(self) -> str:
        return (
            f"{self.name}: {self.better_mean:.4f} vs {self.worse_mean:.4f}, "
            f"gap {self.gap:+.4f} (need >= {self.margin:+.4f}), {self.seconds:.0f}s"
        )


def _cell(cell_id: str, model: ModelConfig, dataset: DatasetSpec, epochs: int, seeds) -> ExperimentSpec:
    model = replace(model, max_len=dataset.max_len)
    return ExperimentSpec(cell_id, "dir", "hyformer", model, DinConfig(), dataset, TrainConfig(epochs=epochs), tuple(seeds))


def _selected(dataset: DatasetSpec) -> str:
    return select_condition(dataset.target_samples_per_item)


def recency_direction(seeds: Sequence[int] = SEEDS) -> Direction:
    """QueryPos against the position-free backbone on the recency synthetic."""
    return Direction(
        "querypos_vs_none",
        _cell("query_specific_pos_bias", QUERYPOS, RECENCY, DENSE_EPOCHS, seeds),
        _cell("none", BACKBONE, RECENCY, DENSE_EPOCHS, seeds),
        0.005,
    )


def profile_direction(seeds: Sequence[int] = SEEDS) -> Direction:
    """Full LENS against its QueryPos reference when the useful window depends on the candidate."""
    return Direction(
        "lens_vs_querypos",
        _cell("lens", full_lens(QUERYPOS, _selected(PROFILE)), PROFILE, DENSE_EPOCHS, seeds),
        _cell("query_specific_pos_bias", QUERYPOS, PROFILE, DENSE_EPOCHS, seeds),
        0.005,
    )


def sparse_condition_direction(seeds: Sequence[int] = SEEDS) -> Direction:
    return Direction(
        "sparse_item_seq_vs_item",
        _cell("lens_item_seq", full_lens(QUERYPOS, "item_seq"), SPARSE, SPARSE_EPOCHS, seeds),
        _cell("lens_item", full_lens(QUERYPOS, "item"), SPARSE, SPARSE_EPOCHS, seeds),
        0.0,
    )


def dense_condition_direction(seeds: Sequence[int] = SEEDS) -> Direction:
    return Direction(
        "dense_item_vs_item_seq",
        _cell("lens_item", full_lens(QUERYPOS, "item"), PROFILE, DENSE_EPOCHS, seeds),
        _cell("lens_item_seq", full_lens(QUERYPOS, "item_seq"), PROFILE, DENSE_EPOCHS, seeds),
        -0.002,
    )


def protocol_direction(seeds: Sequence[int] = SEEDS) -> Direction:
    """Typed exposure histories against click-only histories, full LENS on sparse data."""
    lens = full_lens(QUERYPOS, _selected(SPARSE))
    return Direction(
        "typed_vs_click_only",
        _cell("typed_exposure", lens, SPARSE, SPARSE_EPOCHS, seeds),
        _cell("click_only", lens, replace(SPARSE, history_protocol="click_only"), SPARSE_EPOCHS, seeds),
        0.01,
    )


def all_directions(seeds: Sequence[int] = SEEDS) -> list[Direction]:
    return [
        recency_direction(seeds),
        profile_direction(seeds),
        sparse_condition_direction(seeds),
        dense_condition_direction(seeds),
        protocol_direction(seeds),
    ]


# identical (cell config, seed) pairs across directions train once per process
_ROWS: dict[tuple, dict] = {}


def _row(exp: ExperimentSpec, seed: int) -> dict:
    key = (exp.family, exp.model, exp.dataset, exp.train, seed)
    if key not in _ROWS:
        _ROWS[key] = run_cell(exp, seed)
    return dict(_ROWS[key], cell_id=exp.cell_id, part=exp.part)


def run_direction(direction: Direction, out_dir: Path | None = None) -> DirectionResult:
    """Train both cells over their seeds; optionally write results/summary CSVs."""
    t0 = time.perf_counter()
    grid = [direction.better, direction.worse]
    rows = [_row(exp, seed) for exp in grid for seed in exp.seeds]
    summary, _ = summarise(rows, grid)
    if out_dir is not None:
        write_ablation(Path(out_dir), {"rows": rows, "summary": summary, "deltas": [], "failures": []})
    means = {row["cell_id"]: row["auc_mean"] for row in summary}
    return DirectionResult(
        direction.name,
        means[direction.better.cell_id],
        means[direction.worse.cell_id],
        direction.margin,
        time.perf_counter() - t0,
        tuple(rows),
    )
