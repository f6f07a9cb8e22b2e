"""Uniform affine (asymmetric) quantization.

Granularities on a 2-D array:

* ``per_tensor``  - one (alpha, beta) pair for the whole array
* ``per_channel`` - one pair per column; weights are stored ``in x out`` so a
  column is an output channel
* ``per_token``   - one pair per row; activations are ``tokens x channels``
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRANULARITIES = ("per_tensor", "per_channel", "per_token")


@dataclass(frozen=True)
class QuantParams:
    alpha: np.ndarray  # broadcastable against the quantized array
    beta: np.ndarray
    bits: int
    granularity: str

    def __post_init__(self):
        check_bits(self.bits)
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not np.all(self.alpha > 0):
            raise ValueError("alpha must be positive in every group")
        qmax = 2**self.bits - 1
        if np.any(self.beta < 0) or np.any(self.beta > qmax):
            raise ValueError(f"zero-point outside [0, {qmax}]")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    @property
    def n_groups(self) -> int:
        return int(np.asarray(self.alpha).size)

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "granularity": self.granularity,
            "alpha": np.ravel(self.alpha).tolist(),
            "beta": np.ravel(self.beta).astype(int).tolist(),
        }


def check_bits(bits: int) -> None:
    if not isinstance(bits, (int, np.integer)) or not 2 <= bits <= 16:
        raise ValueError(f"bits must be an integer in [2, 16], got {bits!r}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _reduce_axis(ndim: int, granularity: str):
    if granularity == "per_tensor":
        return None
    if ndim != 2:
        raise ValueError(f"{granularity} quantization needs a 2-D array")
    return 0 if granularity == "per_channel" else 1


def _group_params(x: np.ndarray, bits: int, granularity: str):
    axis = _reduce_axis(x.ndim, granularity)
    keep = axis is not None
    lo = np.minimum(x.min(axis=axis, keepdims=keep), 0.0)
    hi = np.maximum(x.max(axis=axis, keepdims=keep), 0.0)
    qmax = 2**bits - 1
    span = hi - lo
    live = span / qmax > 0  # a subnormal span underflows; treat it like an empty range
    alpha = np.where(live, span, 1.0) / qmax
    beta = -round_half_away(lo / alpha)
    # Snap alpha onto a fixpoint of the range reconstruction so that
    # re-quantizing dequantized data reproduces it bit for bit.
    for _ in range(8):
        rebuilt = np.where(live, ((qmax - beta) * alpha - (-beta) * alpha) / qmax, alpha)
        if np.array_equal(rebuilt, alpha):
            break
        alpha = rebuilt
    return alpha, beta


def compute_quant_params(x, bits: int, granularity: str = "per_tensor") -> QuantParams:
    """Scale and zero-point per group from the group's range.

    The range is widened to include zero so the zero-point is a valid code.
    An all-zero group gets ``alpha = 1 / (2**bits - 1)``.
    """
    check_bits(bits)
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    alpha, beta = _group_params(x, bits, granularity)
    return QuantParams(np.asarray(alpha), np.asarray(beta), bits, granularity)


def quantize(x, p: QuantParams, return_mask: bool = False):
    """Integer codes in ``[0, 2**bits - 1]`` (returned as int64)."""
    x = np.asarray(x, dtype=np.float64)
    raw = round_half_away(x / p.alpha) + p.beta
    codes = np.clip(raw, 0, p.qmax).astype(np.int64)
    if return_mask:
        return codes, (raw >= 0) & (raw <= p.qmax)
    return codes


def dequantize(codes, p: QuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    if np.any(codes < 0) or np.any(codes > p.qmax):
        raise ValueError(f"code outside [0, {p.qmax}]")
    return (codes - p.beta) * p.alpha


def fake_quant_array(x, bits: int, granularity: str, return_mask: bool = False):
    check_bits(bits)
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    alpha, beta = _group_params(x, bits, granularity)
    raw = round_half_away(x / alpha) + beta
    qmax = 2**bits - 1
    out = (np.clip(raw, 0, qmax) - beta) * alpha
    return (out, (raw >= 0) & (raw <= qmax)) if return_mask else out


@dataclass(frozen=True)
class QuantConfig:
    """Bit-widths for weights and activations; ``None`` disables that side."""

    w_bits: int | None = 4
    a_bits: int | None = 4
    weight_granularity: str = "per_channel"
    act_granularity: str = "per_token"

    def __post_init__(self):
        for b in (self.w_bits, self.a_bits):
            if b is not None:
                check_bits(b)

    def quant_weight(self, w: np.ndarray) -> np.ndarray:
        if self.w_bits is None:
            return w
        return fake_quant_array(w, self.w_bits, self.weight_granularity)

    def quant_act(self, x: np.ndarray) -> np.ndarray:
        if self.a_bits is None:
            return x
        return fake_quant_array(x, self.a_bits, self.act_granularity)
