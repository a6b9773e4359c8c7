"""Command-line entry point: ``lensctr <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (flags, files, config), 2 runtime failure.

A config document is YAML or JSON with the sections ``dataset``, ``model``,
``train`` and ``ablation``. ``model.family`` selects ``hyformer`` (default) or
``din``; the remaining ``model`` keys are that family's config fields.
``dataset`` is either a full generator spec or ``{path: <dataset dir>}``.
Every run writes into ``<out>/<hash12>-<UTC timestamp>/`` together with the
resolved config it ran with.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

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
from .embeddings import Batch, NonSeqEncoder, SequenceBatch, item_embedding_params, masked_mean
from .lens import condition_dim, condition_vector, export_lens_profiles, param_count, select_condition
from .numcore import ParameterStore, Tensor, grad_check
from .posbias import column_index
from .synthdata import (
    DatasetFormatError,
    DatasetSpec,
    gen_dataset,
    generate,
    read_dataset,
    read_manifest,
)
from .trainer import (
    TrainingError,
    bce_loss,
    build_model,
    dataset_batches,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    staged_grid,
    train,
)

log = logging.getLogger("lensctr")

SECTIONS = ("dataset", "model", "train", "ablation")
ABLATION_KEYS = ("seeds", "parts", "workers", "din")
GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    """Bad flags, missing files or an invalid config (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- config documents ----------------------------------------------------


def load_document(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: not valid YAML/JSON: {exc}") from None
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections {unknown}; expected a subset of {list(SECTIONS)}")
    return doc


def resolve_dataset(section: dict | None):
    """(DatasetSpec, Dataset or None, resolved section) from a ``dataset`` section."""
    section = dict(section or {})
    if "path" in section:
        if set(section) != {"path"}:
            raise ConfigError("dataset: 'path' cannot be combined with generator fields")
        data_dir = Path(section["path"])
        if not (data_dir / "manifest.json").is_file():
            raise UsageError(f"dataset path has no manifest.json: {data_dir}")
        ds = read_dataset(data_dir)
        return ds.spec, ds, {"path": str(data_dir), "spec": to_dict(ds.spec)}
    spec = from_dict(DatasetSpec, section, "dataset")
    spec.validate()
    return spec, None, to_dict(spec)


def resolve_model(section: dict | None):
    """(family, config) from a ``model`` section."""
    section = dict(section or {})
    family = section.pop("family", "hyformer")
    if family == "din":
        return family, from_dict(DinConfig, section, "model").validate()
    if family != "hyformer":
        raise ConfigError(f"model.family must be 'hyformer' or 'din', got {family!r}")
    return family, from_dict(ModelConfig, section, "model").validate()


def resolve_train(section: dict | None, seed: int | None = None) -> TrainConfig:
    cfg = from_dict(TrainConfig, section, "train")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()


def make_run_dir(out: str | Path, resolved: dict) -> Path:
    digest = config_hash(resolved)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(out) / f"{digest[:12]}-{stamp}"
    run_dir, k = base, 1
    while run_dir.exists():
        run_dir = base.with_name(f"{base.name}.{k}")
        k += 1
    run_dir.mkdir(parents=True)
    text = json.dumps(resolved, indent=2, sort_keys=True)
    (run_dir / "resolved_config.json").write_text(text + "\n")
    log.info("config hash %s", digest)
    log.info("resolved config:\n%s", text)
    return run_dir


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError("empty list")
    return values


# --- subcommands ---------------------------------------------------------


def cmd_gen_data(args) -> int:
    path = Path(args.spec)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    # either a config document with a dataset section or a bare generator spec
    section = doc["dataset"] if "dataset" in doc else doc
    spec = from_dict(DatasetSpec, section, "dataset")
    spec.validate()
    resolved = {"command": "gen-data", "dataset": to_dict(spec)}
    run_dir = make_run_dir(args.out, resolved)
    _, manifest_path = gen_dataset(spec, run_dir)
    manifest = json.loads(manifest_path.read_text())
    print(f"samples {manifest['stats']['n_samples']}  samples/item {manifest['stats']['samples_per_item']:.3f}")
    print(f"records sha256 {manifest['sha256']}")
    print(run_dir)
    return 0


def cmd_train(args) -> int:
    doc = load_document(args.config)
    if doc.get("ablation"):
        log.warning("ablation section ignored by 'train'")
    spec, ds, ds_resolved = resolve_dataset(doc.get("dataset"))
    family, model_cfg = resolve_model(doc.get("model"))
    tcfg = resolve_train(doc.get("train"), args.seed)
    _check_lengths(family, model_cfg, spec)
    resolved = {
        "command": "train",
        "dataset": ds_resolved,
        "model": {"family": family, **to_dict(model_cfg)},
        "train": to_dict(tcfg),
    }
    run_dir = make_run_dir(args.out, resolved)
    if ds is None:
        ds = generate(spec)
    tr, ev = dataset_batches(ds, model_cfg.max_len)
    model = build_model(family, model_cfg, spec.schema(), tcfg.seed, ds.stats["samples_per_item"])
    t0 = time.perf_counter()
    metrics = train(model, tr, ev, tcfg, config_hash(resolved))
    log.info("trained in %.1fs", time.perf_counter() - t0)
    save_checkpoint(run_dir, model, resolved)
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("auc", "logloss", "n_pos", "n_neg", "seed", "config_hash"))
        w.writerow((repr(metrics.auc), repr(metrics.logloss), metrics.n_pos, metrics.n_neg, metrics.seed, metrics.config_hash))
    print(f"auc {metrics.auc:.6f}  logloss {metrics.logloss:.6f}")
    print(run_dir)
    return 0


def _check_lengths(family, model_cfg, spec: DatasetSpec) -> None:
    if model_cfg.max_len < spec.max_len:
        raise ConfigError(f"model.max_len {model_cfg.max_len} < dataset.max_len {spec.max_len}")


def cmd_ablate(args) -> int:
    doc = load_document(args.config)
    section = dict(doc.get("ablation") or {})
    unknown = sorted(set(section) - set(ABLATION_KEYS))
    if unknown:
        raise ConfigError(f"ablation: unknown keys {unknown}")
    spec, ds, ds_resolved = resolve_dataset(doc.get("dataset"))
    if ds is not None:
        raise ConfigError("ablate generates its datasets from a spec; pass generator fields, not a path")
    family, model_cfg = resolve_model(doc.get("model"))
    if family != "hyformer":
        raise ConfigError("ablate takes the HyFormer base config in 'model'; DIN settings go in ablation.din")
    din_cfg = from_dict(DinConfig, section.get("din"), "ablation.din").validate()
    _check_lengths(family, model_cfg, spec)
    tcfg = resolve_train(doc.get("train"))
    seeds = _int_list(args.seeds) if args.seeds else list(section.get("seeds", (42, 123, 456)))
    parts = tuple(section.get("parts", ("I", "II", "III", "IV")))
    bad = sorted(set(parts) - {"I", "II", "III", "IV"})
    if bad:
        raise ConfigError(f"ablation.parts: unknown parts {bad}")
    workers = int(args.workers if args.workers is not None else section.get("workers", 1))
    resolved = {
        "command": "ablate",
        "dataset": ds_resolved,
        "model": {"family": family, **to_dict(model_cfg)},
        "train": to_dict(tcfg),
        "ablation": {"seeds": seeds, "parts": list(parts), "din": to_dict(din_cfg)},
    }
    run_dir = make_run_dir(args.out, resolved)
    grid = staged_grid(spec, model_cfg, din_cfg, tcfg, seeds, parts)
    result = run_ablation(grid, run_dir, workers=workers)
    for row in result["summary"]:
        print(f"{row['part']:>4} {row['cell_id']:<28} auc {row['auc_mean']:.4f} +- {row['auc_std']:.4f}")
    for d in result["deltas"]:
        print(f"{d['part']:>4} {d['cell_id']:<28} {d['auc_delta']:+.4f}")
    if result["failures"]:
        log.error("%d cell runs failed; see failures.csv", len(result["failures"]))
    print(run_dir)
    return 2 if result["failures"] else 0


TINY_MODEL = ModelConfig(
    n_queries=2,
    d_model=4,
    n_layers=1,
    n_heads=1,
    max_len=6,
    mlp_head=(8, 4, 1),
    k_pool=2,
    switches=Switches(True, True, True),
    position="query_specific",
    lens=LensConfig(enabled=True, tcqg=True, tcpb=True, rank=2, condition_source="item_seq"),
)
TINY_SCHEMA = FeatureSchema(n_items=12, field_vocab=(5, 5), n_dense=1)


def tiny_batch(schema: FeatureSchema, max_len: int, batch: int = 4, seed: int = 0) -> Batch:
    """Small random batch that includes an empty and a full-length history."""
    rng = np.random.default_rng(seed)
    valid = rng.integers(0, max_len + 1, batch)
    valid[0], valid[-1] = 0, max_len
    items = np.zeros((batch, max_len), dtype=np.int64)
    actions = np.full((batch, max_len), 4, dtype=np.int64)
    for b, n in enumerate(valid):
        items[b, :n] = rng.integers(1, schema.n_items + 1, n)
        actions[b, :n] = rng.integers(0, 4, n)
    return Batch(
        item_ids=rng.integers(1, schema.n_items + 1, batch),
        seq=SequenceBatch(items, actions, valid),
        cat_fields=np.stack([rng.integers(0, v, batch) for v in schema.field_vocab], axis=1),
        dense=rng.normal(size=(batch, schema.n_dense)),
        labels=np.array([1, 0] * (batch // 2) + [1] * (batch % 2)),
    )


def perturb_lens_and_position(model: LatentQueryModel, seed: int, std: float = 0.5) -> None:
    """Move zero-initialised LENS and position parameters off zero so their gradients are exercised."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.startswith(("lens.", "pos.")):
            t.data[...] = rng.normal(0.0, std, t.shape)


def gradcheck_model(cfg: ModelConfig, schema: FeatureSchema, seed: int = 0) -> float:
    model = LatentQueryModel(cfg, schema, seed=seed)
    perturb_lens_and_position(model, seed + 1)
    batch = tiny_batch(schema, cfg.max_len, seed=seed)
    return grad_check(lambda: bce_loss(model.logits(batch), batch.labels), model.params)


def cmd_gradcheck(args) -> int:
    cfg = TINY_MODEL
    if args.config:
        family, cfg = resolve_model(load_document(args.config).get("model"))
        if family != "hyformer":
            raise ConfigError("gradcheck runs on the HyFormer family")
    if not cfg.lens.enabled:
        sources = [None]
    elif args.config and cfg.lens.condition_source != "auto":
        sources = [cfg.lens.condition_source]
    else:
        sources = ["item", "item_seq"]
    worst = 0.0
    for source in sources:
        run_cfg = cfg if source is None else replace(cfg, lens=replace(cfg.lens, condition_source=source))
        err = gradcheck_model(run_cfg, TINY_SCHEMA, args.seed)
        worst = max(worst, err)
        print(f"condition {source or '-':<9} max relative error {err:.3e}")
    ok = worst <= GRADCHECK_TOL
    print(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return 0 if ok else 2


def embedding_count(schema: FeatureSchema, d_model: int) -> int:
    store = ParameterStore(0)
    item_embedding_params(store, schema, d_model)
    NonSeqEncoder(store, schema, d_model)
    return store.count(["emb."])


def cmd_param_count(args) -> int:
    doc = load_document(args.config)
    family, cfg = resolve_model(doc.get("model"))
    if family != "hyformer":
        raise ConfigError("param-count reports the HyFormer position and LENS modules")
    spec = from_dict(DatasetSpec, doc.get("dataset"), "dataset") if "path" not in (doc.get("dataset") or {}) else None
    if spec is None:
        spec = read_dataset_spec(doc["dataset"]["path"])
    source = select_condition(spec.target_samples_per_item, cfg.lens.condition_source)
    d_c = condition_dim(source, cfg.d_model)
    counts = param_count(cfg, d_c)
    emb = embedding_count(spec.schema(), cfg.d_model)
    share = counts["total"] / emb
    print(f"condition source   {source} (d_c = {d_c})")
    print(f"QueryPos           {counts['querypos']}")
    print(f"TCQG               {counts['tcqg']}")
    print(f"TCPB               {counts['tcpb']}")
    print(f"LENS total         {counts['lens']}")
    print(f"LENS + QueryPos    {counts['total']}")
    print(f"embedding params   {emb}")
    print(f"share of embedding {100 * share:.3f}%")
    return 0


def read_dataset_spec(path: str) -> DatasetSpec:
    manifest = read_manifest(Path(path))
    return from_dict(DatasetSpec, manifest["spec"], "manifest.spec")


def bench_attention(n_queries: int, lengths, repeats: int = 5, batch: int = 32, d_model: int = 64, seed: int = 0):
    """Median forward time of one latent cross-attention layer per sequence length."""
    max_len = max(lengths)
    cfg = ModelConfig(
        n_queries=n_queries,
        d_model=d_model,
        n_layers=1,
        n_heads=4,
        max_len=max_len,
        switches=Switches(),
        position="query_specific",
    )
    model = LatentQueryModel(cfg, FeatureSchema(n_items=8, field_vocab=(2,), n_dense=0), seed=seed)
    rng = np.random.default_rng(seed)
    Q = Tensor(rng.normal(size=(batch, n_queries, d_model)))
    rows = []
    for L in lengths:
        S = Tensor(rng.normal(size=(batch, L, d_model)))
        valid_len = np.full(batch, L)
        cols, valid = column_index(valid_len, L, max_len)
        times = []
        for _ in range(repeats + 1):
            t0 = time.perf_counter()
            model.cross_attention(0, Q, S, valid, model.position.bias(0, cols))
            times.append(time.perf_counter() - t0)
        rows.append((L, float(np.median(times[1:]))))  # first call is warm-up
    return rows


def cmd_bench_attn(args) -> int:
    lengths = _int_list(args.lengths)
    if args.q < 1 or min(lengths) < 1 or args.repeats < 1:
        raise UsageError("--q, --lengths and --repeats must be positive")
    rows = bench_attention(args.q, lengths, args.repeats, args.batch, args.d_model)
    print(f"{'L':>6} {'median_s':>12} {'ratio':>7}")
    prev = None
    for L, t in rows:
        ratio = f"{t / prev:7.3f}" if prev else f"{'-':>7}"
        print(f"{L:>6} {t:12.6f} {ratio}")
        prev = t
    return 0


def cmd_export_bias(args) -> int:
    path = Path(args.checkpoint)
    if not (path.is_file() or (path / "checkpoint.json").is_file()):
        raise UsageError(f"no checkpoint at {path}")
    model, manifest = load_checkpoint(path)
    if model.family != "hyformer":
        raise ConfigError("export-bias needs a HyFormer-family checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = model.position.export(out)
    if model.lens is not None:
        spec_section = manifest["run_config"]["dataset"]
        spec_dict = spec_section.get("spec", spec_section) if "path" in spec_section else spec_section
        spec = from_dict(DatasetSpec, spec_dict, "dataset")
        _, ev = dataset_batches(generate(spec), model.config.max_len)
        ev = ev.subset(np.arange(min(len(ev), args.samples)))
        written += export_lens(model, ev, out)
    for p in written:
        print(p)
    return 0


def export_lens(model: LatentQueryModel, batch: Batch, out: Path) -> list[Path]:
    model.capture = {}
    cfg = model.config
    try:
        model.logits(batch)
        gates = model.capture.get("gate")
    finally:
        model.capture = None
    per_layer = []
    if model.lens.W_tau:
        seq = batch.seq
        cols, valid = column_index(seq.valid_len, seq.width, cfg.max_len)
        s_bar = masked_mean(model.item_table(seq.item_ids), seq.valid_len)
        cond = condition_vector(model.condition_source, model.item_table(batch.item_ids), s_bar)
        for l in range(cfg.n_layers):
            bias = model.lens.bias(cond, l, cols).data
            dense = np.zeros((len(batch), cfg.n_queries, cfg.max_len))
            covered = np.zeros((len(batch), cfg.max_len), dtype=bool)
            for b in range(len(batch)):
                c = cols[b][valid[b]]
                dense[b][:, c] = bias[b][:, valid[b]]
                covered[b, c] = True
            per_layer.append((dense, covered[:, None, :].repeat(cfg.n_queries, axis=1)))
    return export_lens_profiles(out, batch.item_ids, gates, per_layer)


# --- entry point ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lensctr", description="Latent-query CTR models with target-conditioned position priors.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train one model with one seed")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("ablate", help="run the staged ablation grid")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", default=None, help="comma-separated, e.g. 42,123,456")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check on a tiny model")
    s.add_argument("--config", default=None, help="model section to check (default: tiny full-LENS config)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("param-count", help="position prior and LENS parameter breakdown")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_param_count)

    s = sub.add_parser("bench-attn", help="cross-attention timing against sequence length")
    s.add_argument("--q", type=int, required=True)
    s.add_argument("--lengths", default="512,1024,2048")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--d-model", type=int, default=64)
    s.set_defaults(fn=cmd_bench_attn)

    s = sub.add_parser("export-bias", help="dump learned position biases and LENS profiles as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=int, default=1024, help="eval samples for LENS profiles")
    s.set_defaults(fn=cmd_export_bias)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except (UsageError, ConfigError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.exception("unexpected failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
