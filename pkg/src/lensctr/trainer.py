"""Loss, Adam, AUC, training loop, checkpoints and the staged ablation grid."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .backbone import LatentQueryModel
from .config import (
    ConfigError,
    DinConfig,
    FeatureSchema,
    LensConfig,
    ModelConfig,
    Switches,
    TrainConfig,
    config_hash,
    from_dict,
    to_dict,
)
from .din import DinModel
from .embeddings import Batch, embedding_param_count
from .numcore import ParameterStore, Tape, Tensor, bce_with_logits
from .synthdata import Dataset, DatasetSpec, generate, to_batch

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("cell_id", "part", "seed", "auc", "logloss", "params_total", "params_lens", "wall_seconds")


class TrainingError(RuntimeError):
    pass


def bce_loss(logits: Tensor, labels) -> Tensor:
    return bce_with_logits(logits, labels)


class Adam:
    def __init__(self, store: ParameterStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(p.shape) for n, p in store.items()}
        self.v = {n: np.zeros(p.shape) for n, p in store.items()}

    def step(self) -> None:
        for name, p in self.store.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(opt: Adam) -> None:
    opt.step()


def evaluate_auc(scores, labels) -> float:
    """Tie-aware ROC AUC (normalised Mann-Whitney U)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    logloss: float
    n_pos: int
    n_neg: int
    seed: int
    config_hash: str


def predict_logits(model, batch: Batch, chunk: int = 1024) -> np.ndarray:
    out = [model.logits(batch.subset(slice(i, i + chunk))).data for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model, batch: Batch, seed: int, cfg_hash: str, chunk: int = 1024) -> MetricsReport:
    logits = predict_logits(model, batch, chunk)
    labels = batch.labels
    loss = float(bce_with_logits(Tensor(logits), labels).data)
    n_pos = int(labels.sum())
    return MetricsReport(evaluate_auc(logits, labels), loss, n_pos, len(labels) - n_pos, seed, cfg_hash)


def build_model(family: str, model_cfg, schema: FeatureSchema, seed: int, samples_per_item: float | None = None):
    if family == "din":
        return DinModel(model_cfg, schema, seed)
    if family == "hyformer":
        return LatentQueryModel(model_cfg, schema, seed, samples_per_item)
    raise ConfigError(f"unknown model family {family!r}")


def dataset_batches(dataset: Dataset, max_len: int) -> tuple[Batch, Batch]:
    return to_batch(dataset.split("train"), max_len), to_batch(dataset.split("eval"), max_len)


def train(model, train_batch: Batch, eval_batch: Batch, cfg: TrainConfig, cfg_hash: str = "") -> MetricsReport:
    """Fixed epoch budget, per-epoch shuffle seeded by (seed, epoch), no early stopping."""
    cfg.validate()
    opt = Adam(model.params, cfg.learning_rate, cfg.betas, cfg.epsilon)
    n = len(train_batch)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            mb = train_batch.subset(order[start : start + cfg.batch_size])
            model.params.zero_grad()
            try:
                with Tape() as tape:
                    loss = bce_loss(model.logits(mb), mb.labels)
            except FloatingPointError as exc:
                raise TrainingError(f"NaN/Inf during forward at step {step}: {exc}") from None
            if not math.isfinite(float(loss.data)):
                raise TrainingError(f"non-finite loss at step {step}")
            tape.backward(loss)
            opt.step()
            step += 1
            if cfg.eval_every and step % cfg.eval_every == 0:
                m = evaluate(model, eval_batch, cfg.seed, cfg_hash, cfg.eval_batch_size)
                log.info("step %d eval auc %.4f logloss %.4f", step, m.auc, m.logloss)
    return evaluate(model, eval_batch, cfg.seed, cfg_hash, cfg.eval_batch_size)


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample std (ddof=1; 0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


# --- checkpoints -------------------------------------------------------


def save_checkpoint(out_dir: Path, model, run_config: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = model.params
    manifest = {
        "format": "lensctr-checkpoint-1",
        "dtype": "<f8",
        "describe": model.describe(),
        "schema": to_dict(model.schema),
        "config_hash": config_hash(run_config),
        "run_config": run_config,
        "params": [{"name": n, "shape": list(t.shape)} for n, t in store.items()],
        "n_values": store.count(),
    }
    (out_dir / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    store.flat().astype("<f8").tofile(out_dir / "checkpoint.bin")
    return out_dir / "checkpoint.json"


def load_checkpoint(path: Path):
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    manifest = json.loads(path.read_text())
    desc = manifest["describe"]
    schema_d = manifest["schema"]
    schema = FeatureSchema(
        n_items=schema_d["n_items"],
        field_vocab=tuple(schema_d["field_vocab"]),
        n_dense=schema_d["n_dense"],
        n_actions=schema_d["n_actions"],
    )
    if desc["family"] == "din":
        model = DinModel(from_dict(DinConfig, desc["model"]), schema, desc["seed"])
    else:
        cfg = from_dict(ModelConfig, desc["model"])
        if cfg.lens.enabled:
            # the condition source (and so d_c) is fixed by the checkpoint
            cfg = replace(cfg, lens=replace(cfg.lens, condition_source=desc["condition_source"]))
        model = LatentQueryModel(cfg, schema, desc["seed"])
    expected = [{"name": n, "shape": list(t.shape)} for n, t in model.params.items()]
    if expected != manifest["params"]:
        raise ValueError("checkpoint parameter layout does not match its model config")
    values = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    model.params.load_flat(values)
    return model, manifest


# --- ablation harness --------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    cell_id: str
    part: str
    family: str = "hyformer"
    model: ModelConfig = field(default_factory=ModelConfig)
    din: DinConfig = field(default_factory=DinConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (42, 123, 456)
    role: str = ""


def staged_grid(
    dataset: DatasetSpec,
    model: ModelConfig,
    din: DinConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = (42, 123, 456),
    parts: Sequence[str] = ("I", "II", "III", "IV"),
) -> list[ExperimentSpec]:
    """Cells of the five-part staged ablation (Part V is derived in the summary)."""
    seeds = tuple(seeds)
    plain = replace(model, switches=Switches(), position="none", lens=LensConfig())
    ref = replace(plain, switches=Switches(seq_pooling_tokens=True))
    qpos = replace(ref, position="query_specific")
    lens = replace(model.lens, enabled=True, tcqg=True, tcpb=True)
    cell = lambda cid, part, m, role="", family="hyformer": ExperimentSpec(  # noqa: E731
        cid, part, family, m, din, dataset, train_cfg, seeds, role
    )
    grid = []
    if "I" in parts:
        grid += [
            cell("din", "I", plain, "din", "din"),
            cell("hyformer_no_switches", "I", plain),
            cell("hyformer_seq_pooling", "I", ref, "hyformer_ref"),
            cell("hyformer_ns_tokens", "I", replace(plain, switches=Switches(ns_tokens_in_boosting=True))),
            cell("hyformer_per_query_ffn", "I", replace(plain, switches=Switches(per_query_ffn=True))),
            cell("hyformer_full_switches", "I", replace(plain, switches=Switches(True, True, True))),
        ]
    if "II" in parts:
        grid += [
            cell("global_pos_bias", "II", replace(ref, position="global")),
            cell("abs_pos_emb", "II", replace(ref, position="abs_emb")),
            cell("query_specific_pos_bias", "II", qpos, "querypos"),
        ]
    if "III" in parts:
        grid += [
            cell("lens_item", "III", replace(qpos, lens=replace(lens, condition_source="item"))),
            cell("lens_item_seq", "III", replace(qpos, lens=replace(lens, condition_source="item_seq"))),
            cell("lens_selected", "III", replace(qpos, lens=replace(lens, condition_source="auto")), "lens_final"),
        ]
    if "IV" in parts:
        grid += [
            cell("lens_wo_tcpb", "IV", replace(qpos, lens=replace(lens, tcpb=False, condition_source="auto"))),
            cell("lens_wo_tcqg", "IV", replace(qpos, lens=replace(lens, tcqg=False, condition_source="auto"))),
        ]
    return grid


_DATASETS: dict[DatasetSpec, tuple[Dataset, Batch, Batch]] = {}


def _prepared(spec: DatasetSpec):
    if spec not in _DATASETS:
        ds = generate(spec)
        tr, ev = dataset_batches(ds, spec.max_len)
        _DATASETS.clear()
        _DATASETS[spec] = (ds, tr, ev)
    return _DATASETS[spec]


def run_cell(exp: ExperimentSpec, seed: int) -> dict:
    """Train and evaluate one (cell, seed); returns a results row."""
    t0 = time.perf_counter()
    ds, tr, ev = _prepared(exp.dataset)
    schema = exp.dataset.schema()
    model_cfg = exp.din if exp.family == "din" else exp.model
    model = build_model(exp.family, model_cfg, schema, seed, ds.stats["samples_per_item"])
    tcfg = replace(exp.train, seed=seed)
    run_cfg = {"family": exp.family, "model": to_dict(model_cfg), "dataset": to_dict(exp.dataset), "train": to_dict(tcfg)}
    metrics = train(model, tr, ev, tcfg, config_hash(run_cfg))
    return {
        "cell_id": exp.cell_id,
        "part": exp.part,
        "seed": seed,
        "auc": metrics.auc,
        "logloss": metrics.logloss,
        "params_total": model.params.count(),
        "params_lens": model.params.count(["lens."]),
        "wall_seconds": time.perf_counter() - t0,
        "embedding_params": embedding_param_count(model.params),
    }


def _run_job(job):
    exp, seed = job
    try:
        return run_cell(exp, seed), None
    except Exception as exc:  # recorded, grid continues
        return None, f"{type(exc).__name__}: {exc}"


def run_ablation(grid: Sequence[ExperimentSpec], out_dir: Path | None = None, workers: int = 1) -> dict:
    """Run every (cell, seed); write results.csv, summary.csv and failures.csv."""
    jobs = [(exp, seed) for exp in grid for seed in exp.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_run_job, jobs))
    else:
        outcomes = [_run_job(j) for j in jobs]
    rows, failures = [], []
    for (exp, seed), (row, err) in zip(jobs, outcomes):
        if row is None:
            failures.append({"cell_id": exp.cell_id, "part": exp.part, "seed": seed, "error": err})
            row = {c: float("nan") for c in RESULT_COLUMNS}
            row.update(cell_id=exp.cell_id, part=exp.part, seed=seed)
        rows.append(row)
    summary, deltas = summarise(rows, grid)
    result = {"rows": rows, "summary": summary, "deltas": deltas, "failures": failures}
    if out_dir is not None:
        write_ablation(Path(out_dir), result)
    return result


def summarise(rows: list[dict], grid: Sequence[ExperimentSpec]) -> tuple[list[dict], list[dict]]:
    summary = []
    by_role = {}
    for exp in grid:
        aucs = [r["auc"] for r in rows if r["cell_id"] == exp.cell_id and not math.isnan(r["auc"])]
        losses = [r["logloss"] for r in rows if r["cell_id"] == exp.cell_id and not math.isnan(r["logloss"])]
        if not aucs:
            continue
        auc_mean, auc_std = aggregate(aucs)
        ll_mean, ll_std = aggregate(losses)
        summary.append(
            {
                "cell_id": exp.cell_id,
                "part": exp.part,
                "n_seeds": len(aucs),
                "auc_mean": auc_mean,
                "auc_std": auc_std,
                "logloss_mean": ll_mean,
                "logloss_std": ll_std,
            }
        )
        if exp.role:
            by_role[exp.role] = auc_mean
    deltas = []
    final = by_role.get("lens_final")
    for label, base in (
        ("delta_modules_over_querypos_base", "querypos"),
        ("delta_final_lens_vs_hyformer_ref", "hyformer_ref"),
        ("delta_final_lens_vs_din", "din"),
    ):
        if final is not None and base in by_role:
            deltas.append({"cell_id": label, "part": "V", "auc_delta": final - by_role[base]})
    return summary, deltas


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_ablation(out_dir: Path, result: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in result["rows"]:
            w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ("cell_id", "part", "n_seeds", "auc_mean", "auc_std", "logloss_mean", "logloss_std")
        w.writerow(cols)
        for r in result["summary"]:
            w.writerow([_fmt(r[c]) for c in cols])
        w.writerow([])
        w.writerow(("cell_id", "part", "auc_delta"))
        for d in result["deltas"]:
            w.writerow([d["cell_id"], d["part"], _fmt(d["auc_delta"])])
    if result["failures"]:
        with open(out_dir / "failures.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ("cell_id", "part", "seed", "error"), lineterminator="\n")
            w.writeheader()
            w.writerows(result["failures"])
