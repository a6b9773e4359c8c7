"""Synthetic CTR data with controllable item density and planted click mechanisms.

Every user produces a time-ordered stream of exposures. At each step the
user's current interest type may drift, a candidate is drawn from a
Zipf(1.1) popularity law (biased toward the current interest type and, with
``profile_affinity``, toward the user's preferred position profile), and the
click probability is

    sigmoid(base + user_bias
            + recency_weight      * recency-weighted type match
            + target_match_weight * type match inside the candidate's profile window
            + metadata_weight     * [user segment == item category])

The candidate's profile picks one of ``position_profile_count`` consecutive
age windows of ``profile_window`` exposures each. ``base`` is solved so the
mean click probability equals ``positive_rate``. Signals only depend on
which items were exposed and when, so labels never feed back into later
probabilities; clicked exposures become action types 1/2 and skips 0/3.

File layout: ``records.tsv`` holds one record per line (no header) with tab
separated fields in ``RECORD_FIELDS`` order; list-valued fields are comma
separated and floats are written with ``repr``. ``manifest.json`` carries the
spec, realised statistics, schema version and the data file's sha256.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .config import ConfigError, FeatureSchema, from_dict, to_dict
from .embeddings import ACTION_PAD, Batch, SequenceBatch

SCHEMA_VERSION = 1
RECORD_FIELDS = (
    "user_id",
    "item_id",
    "label",
    "time",
    "split",
    "valid_len",
    "seq_items",
    "seq_actions",
    "cat_fields",
    "dense",
    "oracle_p",
)
PROTOCOLS = ("typed_exposure", "all_exposure", "click_only")
DENSITY_TOLERANCE = 0.15


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class PlantedSignal:
    recency_weight: float = 2.0
    target_match_weight: float = 2.0
    position_profile_count: int = 4
    metadata_weight: float = 1.0
    recency_halflife: float = 2.0
    profile_window: int = 8


@dataclass(frozen=True)
class DatasetSpec:
    n_items: int = 100_000
    n_users: int = 1_000
    n_samples: int = 200_000
    max_len: int = 50
    n_nonseq_fields: int = 3
    n_dense_fields: int = 1
    field_vocab: int = 8
    n_types: int = 8
    target_samples_per_item: float = 2.0
    positive_rate: float = 0.10
    zipf_exponent: float = 1.1
    planted: PlantedSignal = field(default_factory=PlantedSignal)
    history_protocol: str = "typed_exposure"
    interest_drift: float = 0.1
    interest_affinity: float = 0.6
    profile_affinity: float = 0.0
    user_bias_std: float = 0.5
    eval_fraction: float = 0.2
    seed: int = 42

    def validate(self) -> "DatasetSpec":
        if self.history_protocol not in PROTOCOLS:
            raise ConfigError(f"history_protocol must be one of {PROTOCOLS}")
        if min(self.n_items, self.n_users, self.max_len, self.n_types, self.field_vocab) < 1:
            raise ConfigError("n_items, n_users, max_len, n_types and field_vocab must be >= 1")
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")
        if not 0 < self.positive_rate < 1:
            raise ConfigError("positive_rate must lie in (0, 1)")
        if self.n_nonseq_fields < 2 and self.planted.metadata_weight:
            raise ConfigError("metadata signal needs n_nonseq_fields >= 2 (user segment, item category)")
        if self.planted.position_profile_count < 1 or self.planted.profile_window < 1:
            raise ConfigError("position_profile_count and profile_window must be >= 1")
        if self.n_samples:
            if self.target_samples_per_item <= 0:
                raise ConfigError("target_samples_per_item must be > 0")
            realised = self.n_samples / self.n_items
            if abs(realised - self.target_samples_per_item) > DENSITY_TOLERANCE * self.target_samples_per_item:
                raise ConfigError(
                    f"infeasible density: n_samples/n_items = {realised:.3g} is more than "
                    f"{DENSITY_TOLERANCE:.0%} away from target {self.target_samples_per_item}"
                )
        return self

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            n_items=self.n_items,
            field_vocab=(self.field_vocab,) * self.n_nonseq_fields,
            n_dense=self.n_dense_fields,
        )


@dataclass(frozen=True)
class SampleRecord:
    user_id: int
    item_id: int
    label: int
    time: int
    split: str
    seq_items: tuple[int, ...]
    seq_actions: tuple[int, ...]
    cat_fields: tuple[int, ...]
    dense: tuple[float, ...]
    oracle_p: float

    @property
    def valid_len(self) -> int:
        return len(self.seq_items)


@dataclass
class Dataset:
    spec: DatasetSpec
    records: list[SampleRecord]
    stats: dict

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]


# --- generation ---------------------------------------------------------


@dataclass(frozen=True)
class _Items:
    types: np.ndarray  # index 0 unused (padding)
    profiles: np.ndarray
    categories: np.ndarray
    popularity: np.ndarray


def _item_table(spec: DatasetSpec) -> _Items:
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.n_items
    types = np.concatenate([[-1], rng.integers(0, spec.n_types, n)])
    profiles = np.concatenate([[-1], rng.integers(0, spec.planted.position_profile_count, n)])
    categories = np.concatenate([[-1], rng.integers(0, spec.field_vocab, n)])
    ranks = rng.permutation(n) + 1
    pop = np.concatenate([[0.0], ranks.astype(np.float64) ** -spec.zipf_exponent])
    return _Items(types, profiles, categories, pop / pop.sum())


class _Sampler:
    """Inverse-CDF draws from the popularity law restricted to item subsets."""

    def __init__(self, items: _Items, spec: DatasetSpec):
        self.all = self._cdf(np.arange(1, spec.n_items + 1), items.popularity)
        self.by_type = {}
        self.by_type_profile = {}
        for t in range(spec.n_types):
            ids = np.flatnonzero(items.types == t)
            self.by_type[t] = self._cdf(ids, items.popularity)
            for p in range(spec.planted.position_profile_count):
                sub = ids[items.profiles[ids] == p]
                self.by_type_profile[t, p] = self._cdf(sub, items.popularity)
        self.by_profile = {
            p: self._cdf(np.flatnonzero(items.profiles == p), items.popularity)
            for p in range(spec.planted.position_profile_count)
        }

    @staticmethod
    def _cdf(ids, pop):
        if len(ids) == 0:
            return None
        c = np.cumsum(pop[ids])
        return ids, c / c[-1]

    @staticmethod
    def draw(table, u: float) -> int:
        ids, cdf = table
        return int(ids[min(np.searchsorted(cdf, u, side="right"), len(ids) - 1)])


def profile_windows(planted: PlantedSignal, max_len: int) -> list[tuple[int, int]]:
    """Inclusive age ranges (1 = most recent) for each position profile."""
    w = planted.profile_window
    return [(1 + p * w, min((p + 1) * w, max_len)) for p in range(planted.position_profile_count)]


def _signals(hist_types: np.ndarray, target_type: int, target_profile: int, spec: DatasetSpec, windows) -> tuple[float, float]:
    """Recency-weighted and profile-window type match; hist_types oldest first."""
    planted = spec.planted
    if hist_types.size == 0:
        return 0.0, 0.0
    match = (hist_types[::-1] == target_type).astype(np.float64)  # index 0 = age 1
    ages = np.arange(spec.max_len)
    w = 0.5 ** (ages / planted.recency_halflife)
    recency = float(match @ w[: match.size]) / float(w.sum())
    lo, hi = windows[target_profile]
    seg = match[lo - 1 : hi]
    profile = float(seg.mean()) if seg.size else 0.0
    return recency, profile


def _user_counts(spec: DatasetSpec) -> np.ndarray:
    base, extra = divmod(spec.n_samples, spec.n_users)
    return np.array([base + (u < extra) for u in range(spec.n_users)])


def _simulate_user(u: int, n_rec: int, spec: DatasetSpec, items: _Items, sampler: _Sampler, windows):
    """Exposure stream for one user without labels: candidates, fields, signal."""
    rng = np.random.default_rng([spec.seed, 2, u])
    planted = spec.planted
    segment = int(rng.integers(spec.field_vocab))
    pref_profile = int(rng.integers(planted.position_profile_count))
    user_bias = float(rng.normal(0.0, spec.user_bias_std)) if spec.user_bias_std > 0 else 0.0
    interest = int(rng.integers(spec.n_types))
    cand = np.zeros(n_rec, dtype=np.int64)
    signal = np.zeros(n_rec)
    cat = np.zeros((n_rec, spec.n_nonseq_fields), dtype=np.int64)
    dense = np.zeros((n_rec, spec.n_dense_fields))
    hist_types = np.zeros(n_rec, dtype=np.int64)
    for step in range(n_rec):
        if rng.random() < spec.interest_drift:
            interest = int(rng.integers(spec.n_types))
        r_interest, r_profile, r_draw = rng.random(3)
        table = None
        if r_interest < spec.interest_affinity:
            if r_profile < spec.profile_affinity:
                table = sampler.by_type_profile[interest, pref_profile]
            if table is None:
                table = sampler.by_type[interest]
        elif r_profile < spec.profile_affinity:
            table = sampler.by_profile[pref_profile]
        if table is None:
            table = sampler.all
        item = _Sampler.draw(table, r_draw)
        cand[step] = item
        t_type = int(items.types[item])
        lo = max(0, step - spec.max_len)
        recency, profile = _signals(hist_types[lo:step], t_type, int(items.profiles[item]), spec, windows)
        fields = rng.integers(0, spec.field_vocab, spec.n_nonseq_fields)
        if spec.n_nonseq_fields >= 2:
            fields[0] = segment
            fields[1] = items.categories[item]
        cat[step] = fields
        dense[step] = rng.normal(size=spec.n_dense_fields)
        meta = float(spec.n_nonseq_fields >= 2 and fields[0] == fields[1])
        signal[step] = (
            user_bias
            + planted.recency_weight * recency
            + planted.target_match_weight * profile
            + planted.metadata_weight * meta
        )
        hist_types[step] = t_type
    return cand, signal, cat, dense


def _solve_base(signal: np.ndarray, rate: float) -> float:
    if signal.size == 0:
        return math.log(rate / (1 - rate))
    f = lambda b: float(expit(b + signal).mean()) - rate  # noqa: E731
    lo, hi = -60.0 - signal.max(), 60.0 - signal.min()
    return float(brentq(f, lo, hi, xtol=1e-12))


def _history(cand, labels, actions, step: int, spec: DatasetSpec) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if spec.history_protocol == "click_only":
        idx = np.flatnonzero(labels[:step])[-spec.max_len :]
        return tuple(int(x) for x in cand[idx]), (1,) * len(idx)
    lo = max(0, step - spec.max_len)
    seq = tuple(int(x) for x in cand[lo:step])
    if spec.history_protocol == "all_exposure":
        return seq, (0,) * len(seq)
    return seq, tuple(int(a) for a in actions[lo:step])


def generate(spec: DatasetSpec) -> Dataset:
    spec.validate()
    items = _item_table(spec)
    sampler = _Sampler(items, spec)
    windows = profile_windows(spec.planted, spec.max_len)
    counts = _user_counts(spec)
    streams = [_simulate_user(u, int(n), spec, items, sampler, windows) for u, n in enumerate(counts)]
    all_signal = np.concatenate([s[1] for s in streams]) if streams else np.zeros(0)
    base = _solve_base(all_signal, spec.positive_rate)

    records: list[SampleRecord] = []
    for u, (cand, signal, cat, dense) in enumerate(streams):
        rng = np.random.default_rng([spec.seed, 3, u])
        n = len(cand)
        p = expit(base + signal)
        labels = (rng.random(n) < p).astype(np.int64)
        strong = rng.random(n)
        actions = np.where(labels == 1, np.where(strong < 0.25, 2, 1), np.where(strong < 0.05, 3, 0))
        n_eval = int(round(spec.eval_fraction * n))
        for step in range(n):
            seq_items, seq_actions = _history(cand, labels, actions, step, spec)
            records.append(
                SampleRecord(
                    user_id=u,
                    item_id=int(cand[step]),
                    label=int(labels[step]),
                    time=step,
                    split="eval" if step >= n - n_eval else "train",
                    seq_items=seq_items,
                    seq_actions=seq_actions,
                    cat_fields=tuple(int(x) for x in cat[step]),
                    dense=tuple(float(x) for x in dense[step]),
                    oracle_p=float(p[step]),
                )
            )
    return Dataset(spec, records, realised_stats(records, spec, base))


def realised_stats(records: list[SampleRecord], spec: DatasetSpec, base: float | None = None) -> dict:
    n = len(records)
    labels = np.array([r.label for r in records], dtype=np.int64)
    train = [r for r in records if r.split == "train"]
    stats = {
        "n_samples": n,
        "n_train": len(train),
        "n_eval": n - len(train),
        "n_items": spec.n_items,
        "samples_per_item": n / spec.n_items,
        "train_samples_per_item": len(train) / spec.n_items,
        "distinct_candidates": len({r.item_id for r in records}),
        "positive_rate": float(labels.mean()) if n else 0.0,
        "mean_valid_len": float(np.mean([r.valid_len for r in records])) if n else 0.0,
    }
    if base is not None:
        stats["logit_base"] = base
    return stats


# --- file I/O ----------------------------------------------------------


def _fmt_list(values) -> str:
    return ",".join(str(v) for v in values)


def format_record(r: SampleRecord) -> str:
    return "\t".join(
        [
            str(r.user_id),
            str(r.item_id),
            str(r.label),
            str(r.time),
            r.split,
            str(r.valid_len),
            _fmt_list(r.seq_items),
            _fmt_list(r.seq_actions),
            _fmt_list(r.cat_fields),
            ",".join(repr(float(x)) for x in r.dense),
            repr(float(r.oracle_p)),
        ]
    )


def parse_record(line: str, offset: int = 0) -> SampleRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != len(RECORD_FIELDS):
        raise DatasetFormatError(f"expected {len(RECORD_FIELDS)} fields, got {len(parts)}", offset)
    try:
        ints = lambda s: tuple(int(x) for x in s.split(",")) if s else ()  # noqa: E731
        seq_items, seq_actions = ints(parts[6]), ints(parts[7])
        valid_len = int(parts[5])
        rec = SampleRecord(
            user_id=int(parts[0]),
            item_id=int(parts[1]),
            label=int(parts[2]),
            time=int(parts[3]),
            split=parts[4],
            seq_items=seq_items,
            seq_actions=seq_actions,
            cat_fields=ints(parts[8]),
            dense=tuple(float(x) for x in parts[9].split(",")) if parts[9] else (),
            oracle_p=float(parts[10]),
        )
    except ValueError as exc:
        raise DatasetFormatError(f"malformed field: {exc}", offset) from None
    if valid_len != len(seq_items) or len(seq_actions) != len(seq_items):
        raise DatasetFormatError("valid_len does not match sequence lengths", offset)
    if rec.label not in (0, 1) or rec.split not in ("train", "eval"):
        raise DatasetFormatError("label must be 0/1 and split train/eval", offset)
    if any(a < 0 or a > 3 for a in seq_actions):
        raise DatasetFormatError("action type outside 0..3", offset)
    return rec


def write_dataset(out_dir: Path, dataset: Dataset) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / "records.tsv"
    with open(data_path, "w", newline="\n") as fh:
        for r in dataset.records:
            fh.write(format_record(r))
            fh.write("\n")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "fields": list(RECORD_FIELDS),
        "spec": to_dict(dataset.spec),
        "stats": dataset.stats,
        "data_file": data_path.name,
        "sha256": hashlib.sha256(data_path.read_bytes()).hexdigest(),
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return data_path, manifest_path


def gen_dataset(spec: DatasetSpec, out_dir: Path) -> tuple[Path, Path]:
    """Generate and write ``records.tsv`` + ``manifest.json`` into ``out_dir``."""
    return write_dataset(out_dir, generate(spec))


def read_manifest(path: Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION or manifest.get("fields") != list(RECORD_FIELDS):
        raise DatasetFormatError(
            f"schema mismatch: file has version {manifest.get('schema_version')}, reader expects {SCHEMA_VERSION}", 0
        )
    return manifest


def iter_records(data_dir: Path) -> Iterator[SampleRecord]:
    """Stream records in file order; errors carry the byte offset of the bad line."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    offset = 0
    with open(data_dir / manifest["data_file"], "rb") as fh:
        for raw in fh:
            if not raw.endswith(b"\n"):
                raise DatasetFormatError("truncated record (missing newline)", offset)
            yield parse_record(raw.decode("utf-8"), offset)
            offset += len(raw)


def read_dataset(data_dir: Path) -> Dataset:
    manifest = read_manifest(data_dir)
    spec = from_dict(DatasetSpec, manifest["spec"], "spec")
    return Dataset(spec, list(iter_records(data_dir)), manifest["stats"])


def buffer_shuffle(records: Iterable, buffer_size: int, seed: int) -> Iterator:
    """Reservoir-style streaming shuffle with an explicit seed."""
    rng = np.random.default_rng(seed)
    buf = []
    for r in records:
        buf.append(r)
        if len(buf) >= buffer_size:
            k = int(rng.integers(len(buf)))
            buf[k], buf[-1] = buf[-1], buf[k]
            yield buf.pop()
    rng.shuffle(buf)
    yield from buf


def iter_batches(records: Iterable[SampleRecord], batch_size: int, max_len: int) -> Iterator[Batch]:
    chunk = []
    for r in records:
        chunk.append(r)
        if len(chunk) == batch_size:
            yield to_batch(chunk, max_len)
            chunk = []
    if chunk:
        yield to_batch(chunk, max_len)


def to_batch(records: list[SampleRecord], max_len: int) -> Batch:
    B = len(records)
    n_fields = len(records[0].cat_fields) if records else 0
    n_dense = len(records[0].dense) if records else 0
    ids = np.zeros((B, max_len), dtype=np.int64)
    acts = np.full((B, max_len), ACTION_PAD, dtype=np.int64)
    vl = np.zeros(B, dtype=np.int64)
    for b, r in enumerate(records):
        n = min(r.valid_len, max_len)
        vl[b] = n
        if n:
            ids[b, :n] = r.seq_items[-n:]
            acts[b, :n] = r.seq_actions[-n:]
    return Batch(
        item_ids=np.array([r.item_id for r in records], dtype=np.int64),
        seq=SequenceBatch(ids, acts, vl),
        cat_fields=np.array([r.cat_fields for r in records], dtype=np.int64).reshape(B, n_fields),
        dense=np.array([r.dense for r in records], dtype=np.float64).reshape(B, n_dense),
        labels=np.array([r.label for r in records], dtype=np.float64),
    )
