"""Evaluation metrics: channel ranges, output MSE, percentile MSE and BOP counts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Model, QuantizedModel, model_forward
from .reassembly import _stack


def channel_minmax_report(acts) -> list[tuple[int, float, float]]:
    """Rows ``(channel_index, min, max)`` over every token of every sample."""
    x = _stack(acts)
    lo, hi = x.min(axis=0), x.max(axis=0)
    return [(i, float(a), float(b)) for i, (a, b) in enumerate(zip(lo, hi))]


def stage_output_mse(model_fp: Model, model_q: Model | QuantizedModel, eval_set: Sequence[np.ndarray],
                     adapters=None) -> float:
    """Mean squared error between final hidden states, averaged over samples."""
    if not len(eval_set):
        raise ValueError("empty evaluation set")
    xs = [np.asarray(x, dtype=np.float64) for x in eval_set]
    if len({x.shape for x in xs}) != 1:
        raise ValueError("evaluation samples must share one shape")
    L = xs[0].shape[0]
    stacked = np.concatenate(xs, axis=0)  # equal-length samples, so the row mean is the sample mean
    ref = model_forward(stacked, model_fp, seq_len=L).data
    got = model_forward(stacked, model_q, adapters=adapters, seq_len=L).data
    return float(np.mean((ref - got) ** 2))


def percentile_mse(before, after, p: float) -> float:
    """MSE between per-channel ``p``-quantiles (linear interpolation) of two tensors.

    Channels are the last axis; every other axis is pooled.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    a, b = np.asarray(before, dtype=np.float64), np.asarray(after, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    qa = np.quantile(a.reshape(-1, a.shape[-1]), p, axis=0, method="linear")
    qb = np.quantile(b.reshape(-1, b.shape[-1]), p, axis=0, method="linear")
    return float(np.mean((qa - qb) ** 2))


@dataclass(frozen=True)
class ArchDims:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    head_out: int = 0  # output-head width, 0 when there is no head

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.n_heads, self.d_ff) <= 0 or self.head_out < 0:
            raise ValueError("dimensions must be positive")


LLAMA_7B = ArchDims(n_layers=32, d_model=4096, n_heads=32, d_ff=11008, head_out=32000)


@dataclass(frozen=True)
class BopCount:
    weight: float  # projection (and head) matmuls, b_w x b_a
    attention: float  # score and value matmuls, b_a x b_a
    overhead: float  # runtime disassembly/assembly, reported separately

    @property
    def total(self) -> float:
        return self.weight + self.attention

    def to_dict(self) -> dict:
        return {"weight": self.weight, "attention": self.attention,
                "total": self.total, "reassembly_overhead": self.overhead}


def projection_macs(dims: ArchDims, seq_len: int) -> list[int]:
    """MAC count of every weight matmul, in execution order."""
    m, f, L = dims.d_model, dims.d_ff, seq_len
    per_layer = [L * m * m] * 4 + [L * m * f] * 3
    macs = per_layer * dims.n_layers
    if dims.head_out:
        macs.append(L * m * dims.head_out)
    return macs


def bop_count(dims: ArchDims, seq_len: int, b_w: int, b_a: int, extra_channels: int = 0) -> BopCount:
    """Bit operations as ``2 * MACs * bits_left * bits_right``.

    Attention scores and the probability-value product are full (unmasked)
    ``L x L x d`` matmuls between activations.  The overhead term charges one
    rescale and one add per extra channel and token at ``b_a x b_a``.
    """
    if seq_len <= 0 or b_w <= 0 or b_a <= 0 or extra_channels < 0:
        raise ValueError("sequence length and bit-widths must be positive")
    weight = 2.0 * sum(projection_macs(dims, seq_len)) * b_w * b_a
    attn_macs = 2 * seq_len * seq_len * dims.d_model * dims.n_layers
    attention = 2.0 * attn_macs * b_a * b_a
    overhead = 2.0 * seq_len * extra_channels * b_a * b_a
    return BopCount(weight, attention, overhead)
