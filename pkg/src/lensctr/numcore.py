"""Dense float64 tensors with a reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape everything is plain
forward evaluation, which is what evaluation and benchmarking use.

    with Tape() as tape:
        loss = bce_with_logits(model.logits(batch), labels)
    tape.backward(loss)
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; ``backward`` replays it in reverse."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss or explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
        if loss.is_leaf and loss.requires_grad:
            _accumulate(loss, pending.pop(id(loss)))
        for out, inputs, backward_fn in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate(inp, gi)
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    # a float sum is finite only if every term is (barring overflow near 1e308)
    if not np.isfinite(data.sum()):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.is_leaf = True
    out.name = None
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        _TAPES[-1].records.append((out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


# --- linear algebra and shape ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    if b.ndim == 2:
        return _matmul_weight(a, b)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def _matmul_weight(a: Tensor, w: Tensor) -> Tensor:
    """(..., k) @ (k, n) as one 2-D GEMM over the flattened leading axes."""
    k, n = w.shape
    a2 = a.data.reshape(-1, k)

    def backward(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ w.data.T).reshape(a.shape) if a.requires_grad else None
        gw = a2.T @ g2 if w.requires_grad else None
        return ga, gw

    return _result((a2 @ w.data).reshape(a.shape[:-1] + (n,)), (a, w), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + " and ".join(str(t.shape) for t in tensors)) from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def slice_(a: Tensor, index) -> Tensor:
    """Basic (view) indexing only: ints, slices, Ellipsis, None."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.array(out), (a,), backward, "slice")


def gather(table: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis`` with a scatter-add backward (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather: index out of range [0, {n}) on axis {axis} of {table.shape}")

    def backward(g):
        # scatter-add as one bincount over (index, trailing offset) pairs
        gm = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        moved_shape = (n,) + table.shape[:axis] + table.shape[axis + 1 :]
        inner = int(np.prod(moved_shape[1:]))
        flat_idx = (index.reshape(-1, 1) * inner + np.arange(inner)).ravel()
        summed = np.bincount(flat_idx, weights=gm.reshape(-1), minlength=n * inner)
        return (np.moveaxis(summed.reshape(moved_shape), 0, axis),)

    return _result(np.take(table.data, index, axis=axis), (table,), backward, "gather")


# --- reductions and normalisation ----------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis, then apply learnable scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: scale {gamma.shape} / shift {beta.shape} do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def softmax_masked(logits: Tensor, valid) -> Tensor:
    """Softmax over the last axis restricted to ``valid`` entries.

    Masked entries come out as exact zeros. ``valid`` broadcasts against
    ``logits``.
    """
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), logits.shape)
    if not valid.any(axis=-1).all():
        raise ValueError("empty attention row")
    x = np.where(valid, logits.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (logits,), backward, "softmax_masked")


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy evaluated from logits: max(x,0) - x*y + log1p(exp(-|x|))."""
    y = np.asarray(labels, dtype=np.float64)
    x = logits.data
    if x.shape != y.shape:
        raise ShapeError(f"bce_with_logits: logits {x.shape} vs labels {y.shape}")
    n = max(x.size, 1)
    loss = (np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / n
    return _result(
        np.asarray(loss),
        (logits,),
        lambda g: (g * (_stable_sigmoid(x) - y) / n,),
        "bce_with_logits",
    )


# --- parameters ----------------------------------------------------------


class ParameterStore:
    """Named, ordered parameter tensors plus how each was initialised.

    Random initialisers draw from a generator keyed on ``(seed, crc32(name))``,
    so a parameter's initial value does not depend on creation order or on
    which other parameters exist.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.init: dict[str, str] = {}

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape), "zeros")

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape), "ones")

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self.add(name, self.rng(name).normal(0.0, std, size=shape), f"normal(0,{std})")

    def fan_in(self, name: str, shape, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self.rng(name).uniform(-bound, bound, size=shape), f"uniform(+-1/sqrt({fan_in}))")

    def add(self, name: str, value: np.ndarray, init: str) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        self.init[name] = init
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self, prefixes: Iterable[str] | None = None) -> int:
        if prefixes is None:
            return sum(t.data.size for t in self._params.values())
        prefixes = tuple(prefixes)
        return sum(t.data.size for n, t in self._params.items() if n.startswith(prefixes))

    def shapes(self) -> dict[str, list[int]]:
        return {n: list(t.shape) for n, t in self._params.items()}

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def load_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.count():
            raise ValueError(f"expected {self.count()} values, got {values.size}")
        pos = 0
        for t in self._params.values():
            n = t.data.size
            t.data = values[pos : pos + n].reshape(t.shape).copy()
            pos += n


def grad_check(fn: Callable[[], Tensor], params: ParameterStore, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per entry is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    params.zero_grad()
    with Tape() as tape:
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in grad_check")
    tape.backward(loss)
    worst = 0.0
    for _, t in params.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(fn().data)
            flat[k] = orig - step
            down = float(fn().data)
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss perturbing {t.name}[{k}]")
            numeric = (up - down) / (2 * step)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    params.zero_grad()
    return worst
