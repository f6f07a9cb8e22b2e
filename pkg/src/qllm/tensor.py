"""Small dense tensor type with a tape-based reverse-mode autodiff.

Only the handful of primitives needed to train low-rank adapters through
Attention-FFN blocks are provided. All math runs in float64.

Usage::

    with Tape() as tape:
        y = matmul(x, w)
        loss = mean_squared(y, target)
    grads = backward(tape, loss)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import quant


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False, _checked: bool = True):
        arr = np.array(data, dtype=np.float64, copy=True) if _checked else data
        if _checked:
            if arr.ndim > 3:
                raise ShapeError(f"rank {arr.ndim} > 3 not supported")
            if not np.all(np.isfinite(arr)):
                raise ValueError("tensor data must be finite")
            arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._on_tape = False

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        arr.setflags(write=False)
        return cls(arr, requires_grad, _checked=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive ops executed while the tape is active."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward_fn) -> Tensor:
    needs = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        result._on_tape = True
        _ACTIVE[-1].nodes.append(Node(op, inputs, result, backward_fn))
    return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; fills ``.grad`` on leaves that require it.

    Returns a mapping from each such leaf to its gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if not inp._on_tape:
                leaves[key] = inp
    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key, np.zeros_like(leaf.data))
        leaf.grad = g
        out[leaf] = g
    return out


# --- primitives -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or a batched product of two rank-3 stacks."""
    A, B = a.data, b.data
    if not (A.ndim == B.ndim == 2 or (A.ndim == B.ndim == 3 and A.shape[0] == B.shape[0])):
        raise ShapeError(f"matmul expects two 2-D or two equal-batch 3-D operands: {a.shape} x {b.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def bwd(g):
        return g @ B.swapaxes(-1, -2), A.swapaxes(-1, -2) @ g

    return _record("matmul", (a, b), A @ B, bwd)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError("transpose expects at least 2 axes")
    return _record("transpose", (a,), np.ascontiguousarray(a.data.swapaxes(-1, -2)),
                   lambda g: (g.swapaxes(-1, -2),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _record("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record("slice", (a,), np.ascontiguousarray(a.data[..., start:stop]), bwd)


def split_heads(a: Tensor, n_heads: int, seq_len: int | None = None) -> Tensor:
    """``(S*L) x M`` to ``(S*h) x L x M/h``.

    Rows are ``S`` stacked sequences of ``seq_len`` tokens (one sequence when
    ``seq_len`` is None); each head is a consecutive channel slice.
    """
    N, M = a.shape
    L = N if seq_len is None else seq_len
    if M % n_heads or N % L:
        raise ShapeError(f"cannot split {a.shape} into {n_heads} heads of length-{L} sequences")
    S, d = N // L, M // n_heads
    out = np.ascontiguousarray(a.data.reshape(S, L, n_heads, d).transpose(0, 2, 1, 3).reshape(S * n_heads, L, d))

    def bwd(g):
        return (g.reshape(S, n_heads, L, d).transpose(0, 2, 1, 3).reshape(N, M),)

    return _record("split_heads", (a,), out, bwd)


def merge_heads(a: Tensor, n_heads: int) -> Tensor:
    """Inverse of :func:`split_heads`."""
    SH, L, d = a.shape
    if SH % n_heads:
        raise ShapeError(f"leading extent {SH} is not a multiple of {n_heads} heads")
    S = SH // n_heads
    out = np.ascontiguousarray(a.data.reshape(S, n_heads, L, d).transpose(0, 2, 1, 3).reshape(S * L, n_heads * d))

    def bwd(g):
        return (np.ascontiguousarray(g.reshape(S, L, n_heads, d).transpose(0, 2, 1, 3).reshape(SH, L, d)),)

    return _record("merge_heads", (a,), out, bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=-1), bwd)


@lru_cache(maxsize=32)
def _causal_mask(rows: int, cols: int) -> np.ndarray:
    mask = np.triu(np.ones((rows, cols), dtype=bool), k=1 + cols - rows)
    mask.setflags(write=False)
    return mask


def softmax_rows(a: Tensor, causal: bool = False) -> Tensor:
    """Row-wise softmax; ``causal`` masks entries above the diagonal."""
    x = a.data
    if causal:
        x = np.where(_causal_mask(*x.shape[-2:]), -np.inf, x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), p, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    X = x.data
    if X.ndim != 2 or gain.shape != (X.shape[1],) or bias.shape != (X.shape[1],):
        raise ShapeError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    G = gain.data
    out = xhat * G + bias.data

    def bwd(g):
        gx_hat = g * G
        m = X.shape[1]
        gx = rstd / m * (m * gx_hat - gx_hat.sum(axis=1, keepdims=True)
                         - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", (x, gain, bias), out, bwd)


def silu(x: Tensor) -> Tensor:
    X = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * X))  # overflow-free sigmoid
    return _record("silu", (x,), X * s, lambda g: (g * (s * (1.0 + X * (1.0 - s))),))


def fake_quant(x: Tensor, bits: int, granularity: str) -> Tensor:
    """Quantize-dequantize with a straight-through gradient inside the clamp range."""
    out, in_range = quant.fake_quant_array(x.data, bits, granularity, return_mask=True)
    return _record("fake_quant", (x,), out, lambda g: (np.where(in_range, g, 0.0),))


def linear_map_cols(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
                    adjoint: Callable[[np.ndarray], np.ndarray], name: str = "channel_map") -> Tensor:
    """Apply a fixed linear map along the channel axis (e.g. a reassembly plan)."""
    return _record(name, (x,), forward(x.data), lambda g: (adjoint(g),))


# --- compositions ---------------------------------------------------------


def mean_squared(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return scale(sum_all(mul(d, d)), 1.0 / d.data.size)
