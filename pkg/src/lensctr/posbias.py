"""Static position priors for the latent-query cross-attention.

Three mechanisms are supported besides ``none``:

* ``global``: one learnable recency curve per layer, shared by every query;
* ``abs_emb``: a learned absolute embedding added to sequence tokens before
  the key/value projections;
* ``query_specific``: per layer, a q x L_max bias table, one curve per query.

All of them index positions right-aligned: a sequence of length n occupies
columns ``[L_max - n, L_max)`` and the most recent behaviour sits in column
``L_max - 1``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .embeddings import EMB_STD
from .numcore import ParameterStore, Tensor, gather, mul, reshape, transpose


def right_align_columns(valid_len: int, max_len: int) -> range:
    if valid_len < 0 or valid_len > max_len:
        raise ValueError(f"valid_len={valid_len} outside [0, {max_len}]")
    return range(max_len - valid_len, max_len)


def column_index(valid_len: np.ndarray, width: int, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Bias column for every (sample, position) of a left-packed batch.

    Returns ``(cols, valid)``; padded positions get column 0 and ``valid=False``.
    """
    valid_len = np.asarray(valid_len, dtype=np.int64)
    if np.any(valid_len > max_len) or np.any(valid_len < 0):
        raise ValueError(f"valid_len outside [0, {max_len}]")
    pos = np.arange(width)[None, :]
    valid = pos < valid_len[:, None]
    cols = np.where(valid, max_len - valid_len[:, None] + pos, 0)
    return cols, valid


class StaticPosition:
    def __init__(self, store: ParameterStore, config: ModelConfig):
        self.mechanism = config.position
        self.n_queries = config.n_queries
        self.max_len = config.max_len
        self.curves: list[Tensor] = []
        self.tables: list[Tensor] = []
        self.abs_table: Tensor | None = None
        L = config.max_len
        if self.mechanism == "global":
            self.curves = [store.zeros(f"pos.global{l}", (L,)) for l in range(config.n_layers)]
        elif self.mechanism == "query_specific":
            self.tables = [store.zeros(f"pos.query{l}", (config.n_queries, L)) for l in range(config.n_layers)]
        elif self.mechanism == "abs_emb":
            self.abs_table = store.normal("pos.abs_emb", (L, config.d_model), EMB_STD)

    def token_offset(self, cols: np.ndarray, valid: np.ndarray) -> Tensor | None:
        """Absolute position embedding for every token (abs_emb only)."""
        if self.abs_table is None:
            return None
        return mul(gather(self.abs_table, cols), valid[:, :, None].astype(np.float64))

    def bias(self, layer: int, cols: np.ndarray) -> Tensor | None:
        """B x q x L additive logit bias (or B x 1 x L for the shared curve)."""
        if self.mechanism == "global":
            B, L = cols.shape
            return reshape(gather(self.curves[layer], cols), (B, 1, L))
        if self.mechanism == "query_specific":
            return transpose(gather(self.tables[layer], cols, axis=1), (1, 0, 2))
        return None

    def static_bias(self, layer: int, valid_len: np.ndarray) -> np.ndarray:
        """Dense B x q x L_max view with right-aligned columns; zero elsewhere."""
        valid_len = np.asarray(valid_len)
        out = np.zeros((len(valid_len), self.n_queries, self.max_len))
        if self.mechanism == "global":
            row = np.broadcast_to(self.curves[layer].data, (self.n_queries, self.max_len))
        elif self.mechanism == "query_specific":
            row = self.tables[layer].data
        else:
            return out
        for b, n in enumerate(valid_len):
            cols = right_align_columns(int(n), self.max_len)
            out[b, :, cols.start : cols.stop] = row[:, cols.start : cols.stop]
        return out

    def export(self, out_dir: Path) -> list[Path]:
        """Write one CSV per layer: rows are queries, columns right-aligned positions."""
        out_dir = Path(out_dir)
        written = []
        rows_per_layer = []
        if self.mechanism == "query_specific":
            rows_per_layer = [t.data for t in self.tables]
        elif self.mechanism == "global":
            rows_per_layer = [c.data[None, :] for c in self.curves]
        for l, rows in enumerate(rows_per_layer):
            path = out_dir / f"{self.mechanism}_bias_layer{l}.csv"
            write_matrix_csv(path, rows, row_label="query")
            written.append(path)
        return written


def write_matrix_csv(path: Path, matrix: np.ndarray, row_label: str) -> None:
    """Rows x positions; the header also gives each column's age (0 = most recent)."""
    n_cols = matrix.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([row_label] + [f"pos{j}_age{n_cols - 1 - j}" for j in range(n_cols)])
        for i, row in enumerate(matrix):
            w.writerow([i] + [repr(float(v)) for v in row])
