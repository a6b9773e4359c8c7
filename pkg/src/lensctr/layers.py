"""Small building blocks shared by the latent-query model and DIN."""

from __future__ import annotations

import numpy as np

from .numcore import (
    ParameterStore,
    Tensor,
    concat,
    layer_norm,
    matmul,
    relu,
    reshape,
    slice_,
    softmax_masked,
    transpose,
)


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.w = store.fan_in(f"{name}.w", (d_in, d_out), d_in)
        self.b = store.zeros(f"{name}.b", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return y if self.b is None else y + self.b


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.gamma = store.ones(f"{name}.g", (dim,))
        self.beta = store.zeros(f"{name}.b", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class MLP:
    """Linear layers with ReLU in between (none after the last)."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, sizes):
        self.layers = []
        for k, d_out in enumerate(sizes):
            self.layers.append(Linear(store, f"{name}.{k}", d_in, d_out))
            d_in = d_out

    def __call__(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = relu(x)
        return x


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """B x N x D -> B x H x N x d_h."""
    B, N, D = x.shape
    return transpose(reshape(x, (B, N, n_heads, D // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, H, N, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, N, H * dh))


def attend(logits: Tensor, valid: np.ndarray, values: Tensor) -> tuple[Tensor, Tensor]:
    """Masked softmax over keys, then weighted sum of ``values``.

    A null slot with zero value is appended to every row and made valid only
    where a row has no valid key, so empty histories give a zero read-out
    instead of an error. Returns (output, weights over the real keys).
    """
    valid = np.broadcast_to(valid, logits.shape)
    empty = ~valid.any(axis=-1, keepdims=True)
    null = Tensor(np.zeros(logits.shape[:-1] + (1,)))
    weights = softmax_masked(concat([logits, null], axis=-1), np.concatenate([valid, empty], axis=-1))
    L = logits.shape[-1]
    weights = slice_(weights, (Ellipsis, slice(0, L)))
    return matmul(weights, values), weights
