"""Target-conditioned residuals on top of the query-specific position reference.

* TCQG scales the initial queries elementwise by ``2 * sigmoid(W_t c)``.
* TCPB adds a low-rank bias ``<M(c)_i, P_j>`` per layer, where
  ``M(c) = reshape(W_tau c, q x r)`` and ``P`` is a learned L_max x r
  position embedding read at right-aligned columns.

Both projections start at zero, so an untrained LENS model computes exactly
what the plain query-specific-bias model computes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .embeddings import EMB_STD
from .numcore import ParameterStore, Tensor, concat, gather, matmul, reshape, scale, sigmoid, transpose

DENSITY_THRESHOLD = 50.0


def select_condition(samples_per_item: float | None, mode: str = "auto") -> str:
    """Pick the condition source. Above 50 samples/item the target embedding
    alone is used; at or below it the sequence mean is appended."""
    if mode in ("item", "item_seq"):
        return mode
    if mode != "auto":
        raise ValueError(f"unknown condition mode {mode!r}")
    if samples_per_item is None or not samples_per_item > 0:
        raise ValueError("auto condition needs samples_per_item > 0")
    return "item" if samples_per_item > DENSITY_THRESHOLD else "item_seq"


def condition_dim(source: str, d_model: int) -> int:
    return d_model if source == "item" else 2 * d_model


@dataclass(frozen=True)
class ConditionVector:
    source: str
    value: Tensor


def condition_vector(source: str, target: Tensor, seq_mean: Tensor) -> ConditionVector:
    if source == "item":
        return ConditionVector(source, target)
    if source == "item_seq":
        return ConditionVector(source, concat([target, seq_mean], axis=-1))
    raise ValueError(f"condition source must be resolved to item/item_seq, got {source!r}")


class LensParams:
    def __init__(self, store: ParameterStore, config: ModelConfig, source: str):
        lens = config.lens
        q, D, r = config.n_queries, config.d_model, lens.rank
        self.source = source
        self.d_c = condition_dim(source, D)
        self.n_queries, self.d_model, self.rank = q, D, r
        self.W_t = store.zeros("lens.gate.W", (q * D, self.d_c)) if lens.tcqg else None
        self.W_tau: list[Tensor] = []
        self.pos_emb: list[Tensor] = []
        if lens.tcpb:
            for l in range(config.n_layers):
                self.W_tau.append(store.zeros(f"lens.tcpb{l}.W", (q * r, self.d_c)))
                self.pos_emb.append(store.normal(f"lens.tcpb{l}.pos", (config.max_len, r), EMB_STD))

    def gate(self, c: ConditionVector) -> Tensor:
        return tcqg_gate(c.value, self.W_t, self.n_queries, self.d_model)

    def bias(self, c: ConditionVector, layer: int, cols: np.ndarray) -> Tensor:
        return tcpb_bias(c.value, self.W_tau[layer], self.pos_emb[layer], cols, self.n_queries, self.rank)


def tcqg_gate(c: Tensor, W_t: Tensor, n_queries: int, d_model: int) -> Tensor:
    """B x q x D gate in (0, 2); row-major reshape, index = query * D + dim."""
    B = c.shape[0]
    logits = matmul(c, transpose(W_t, (1, 0)))
    return scale(sigmoid(reshape(logits, (B, n_queries, d_model))), 2.0)


def tcpb_bias(c: Tensor, W_tau: Tensor, pos_emb: Tensor, cols: np.ndarray, n_queries: int, rank: int) -> Tensor:
    """B x q x L bias; ``cols`` holds the right-aligned column of every token."""
    B = c.shape[0]
    M = reshape(matmul(c, transpose(W_tau, (1, 0))), (B, n_queries, rank))
    P = gather(pos_emb, cols)  # B x L x r
    return matmul(M, transpose(P, (0, 2, 1)))


def param_count(config: ModelConfig, d_c: int | None = None) -> dict[str, int]:
    """Exact parameter counts of the position reference and the LENS modules.

    With ``d_c = D`` these equal the closed forms N_L*q*L_max, q*D^2 and
    N_L*(q*D*r + L_max*r); in general the projections hold q*D*d_c and
    q*r*d_c weights.
    """
    q, D, NL, L, r = config.n_queries, config.d_model, config.n_layers, config.max_len, config.lens.rank
    if d_c is None:
        d_c = D
    querypos = NL * q * L
    tcqg = q * D * d_c
    tcpb = NL * (q * r * d_c + L * r)
    return {
        "querypos": querypos,
        "tcqg": tcqg,
        "tcpb": tcpb,
        "lens": tcqg + tcpb,
        "total": querypos + tcqg + tcpb,
    }


def export_lens_profiles(out_dir: Path, item_ids: np.ndarray, gates: np.ndarray | None, tc_bias: list[tuple]):
    """Per-sample mean gate per query and the sample-averaged TCPB bias per layer.

    ``tc_bias[l]`` is a ``(bias, covered)`` pair of B x q x L_max arrays with
    right-aligned columns; entries a sample does not cover are left out of
    the average.
    """
    from .posbias import write_matrix_csv

    out_dir = Path(out_dir)
    written = []
    if gates is not None:
        path = out_dir / "tcqg_gate_profiles.csv"
        q = gates.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "item_id"] + [f"query{i}" for i in range(q)])
            for b in range(gates.shape[0]):
                w.writerow([b, int(item_ids[b])] + [repr(float(v)) for v in gates[b].mean(axis=-1)])
        written.append(path)
    for l, (bias, covered) in enumerate(tc_bias):
        counts = covered.sum(axis=0)
        total = np.where(covered, bias, 0.0).sum(axis=0)
        avg = np.where(counts > 0, total / np.maximum(counts, 1), 0.0)
        path = out_dir / f"tcpb_mean_bias_layer{l}.csv"
        write_matrix_csv(path, avg, row_label="query")
        written.append(path)
    return written
