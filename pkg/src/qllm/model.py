"""Toy LLaMA-style feature-to-feature transformer.

Each block is pre-norm: ``h = x + attn(ln1(x))`` then ``h + ffn(ln2(h))`` with
a SiLU-gated FFN ``down(silu(gate(.)) * up(.))``.  Weights are stored
``in x out``.  There is no embedding or output head.

In ``quantsim`` mode every projection input is fake-quantized per token and
every projection weight per output channel.  Reassembly plans are applied at
three sites per block: the shared q/k/v input (``attn``), the shared gate/up
input (``ffn``) and the down-projection input (``down``).  The attention
output projection has no plan.  Softmax probabilities are never quantized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .optim import make_rng
from .quant import QuantConfig, QuantParams, compute_quant_params, dequantize, quantize
from .reassembly import ReassemblyPlan, causal_attention, reassemble_weights
from .tensor import Tensor

PROJECTIONS = ("q", "k", "v", "o", "gate", "up", "down")
SITES = ("attn", "ffn", "down")
SITE_OF = {"q": "attn", "k": "attn", "v": "attn", "o": None,
           "gate": "ffn", "up": "ffn", "down": "down"}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 86
    n_layers: int = 8
    seq_len: int = 64

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ff", "seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class OutlierSpec:
    channels: tuple[int, ...] = (7,)
    factor: float = 50.0

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "factor": self.factor}


@dataclass
class BlockWeights:
    n_heads: int
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    proj: dict[str, np.ndarray]  # keyed by PROJECTIONS

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"ln1_g": self.ln1_g, "ln1_b": self.ln1_b, "ln2_g": self.ln2_g, "ln2_b": self.ln2_b}
        out.update({f"w_{k}": self.proj[k] for k in PROJECTIONS})
        return out


@dataclass
class Model:
    config: ModelConfig
    blocks: list[BlockWeights]


@dataclass
class QWeight:
    """A projection weight after reassembly and quantization."""

    deq: np.ndarray
    codes: np.ndarray | None = None
    params: QuantParams | None = None
    fp: np.ndarray | None = None  # reassembled full-precision weight, kept for merging


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def quantize_weight(w: np.ndarray, bits: int | None, granularity: str = "per_channel") -> QWeight:
    w = _frozen(w)
    if bits is None:
        return QWeight(w, fp=w)
    p = compute_quant_params(w, bits, granularity)
    codes = quantize(w, p)
    return QWeight(_frozen(dequantize(codes, p)), codes, p, fp=w)


@dataclass
class QuantBlock:
    n_heads: int
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    plans: dict[str, ReassemblyPlan]
    weights: dict[str, QWeight]
    quant: QuantConfig = QuantConfig()


@dataclass
class QuantizedModel:
    config: ModelConfig
    quant: QuantConfig
    blocks: list[QuantBlock]


def reassembled_weights(w: BlockWeights, plans: Mapping[str, ReassemblyPlan]) -> dict[str, np.ndarray]:
    """Full-precision projection weights with each site's plan folded into their rows."""
    out = {}
    for name in PROJECTIONS:
        site = SITE_OF[name]
        plan = plans.get(site) if site else None
        out[name] = w.proj[name] if plan is None else reassemble_weights(w.proj[name], plan)
    return out


def quantize_block(w: BlockWeights, plans: Mapping[str, ReassemblyPlan] | None,
                   quant_cfg: QuantConfig) -> QuantBlock:
    m, dff = w.proj["q"].shape[0], w.proj["down"].shape[0]
    plans = dict(plans or {})
    for site, n in (("attn", m), ("ffn", m), ("down", dff)):
        plans.setdefault(site, ReassemblyPlan.identity(n))
    weights = {name: quantize_weight(wr, quant_cfg.w_bits, quant_cfg.weight_granularity)
               for name, wr in reassembled_weights(w, plans).items()}
    return QuantBlock(w.n_heads, w.ln1_g, w.ln1_b, w.ln2_g, w.ln2_b, plans, weights, quant_cfg)


def quantize_model(model: Model, plans: Sequence[Mapping[str, ReassemblyPlan]] | None,
                   quant_cfg: QuantConfig) -> QuantizedModel:
    plans = plans if plans is not None else [None] * len(model.blocks)
    blocks = [quantize_block(b, p, quant_cfg) for b, p in zip(model.blocks, plans)]
    return QuantizedModel(model.config, quant_cfg, blocks)


# --- forward ----------------------------------------------------------------


def _const(a: np.ndarray) -> Tensor:
    return Tensor._wrap(a, False) if not a.flags.writeable else Tensor(a)


def _proj(x: Tensor, w: np.ndarray, adapter=None) -> Tensor:
    y = T.matmul(x, _const(w))
    if adapter is not None:
        y = T.add(y, T.matmul(T.matmul(x, adapter.A), adapter.B))
    return y


def _attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, seq_len: int | None) -> Tensor:
    dh = q.shape[1] // n_heads
    qh, kh, vh = (T.split_heads(t, n_heads, seq_len) for t in (q, k, v))
    s = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh))
    return T.merge_heads(T.matmul(T.softmax_rows(s, causal=True), vh), n_heads)


def _site(x: Tensor, plan: ReassemblyPlan | None, quant_cfg: QuantConfig | None) -> Tensor:
    if plan is not None and not plan.is_identity:
        R = plan.matrix
        x = T.linear_map_cols(x, lambda a: a @ R, lambda g: g @ R.T, "reassembly")
    if quant_cfg is not None and quant_cfg.a_bits is not None:
        x = T.fake_quant(x, quant_cfg.a_bits, quant_cfg.act_granularity)
    return x


def block_forward(x, block: BlockWeights | QuantBlock, mode: str = "fp",
                  plans: Mapping[str, ReassemblyPlan] | None = None,
                  adapters: Mapping | None = None,
                  quant_cfg: QuantConfig | None = None, seq_len: int | None = None) -> Tensor:
    """One Attention-FFN block.  ``x`` is ``L x M`` (array or Tensor).

    With ``seq_len`` set, ``x`` may hold several sequences stacked along the
    token axis; attention never crosses a sequence boundary.
    """
    x = T.as_tensor(x)
    ad = adapters or {}
    if mode == "fp":
        if not isinstance(block, BlockWeights):
            raise TypeError("fp mode needs full-precision BlockWeights")
        weights = block.proj
        plans, qc = {}, None
    elif mode == "quantsim":
        if isinstance(block, BlockWeights):
            block = quantize_block(block, plans, quant_cfg or QuantConfig())
        qc = block.quant
        weights = {k: qw.deq for k, qw in block.weights.items()}
        plans = block.plans
    else:
        raise ValueError(f"unknown mode {mode!r}")
    m = block.ln1_g.shape[0]
    if x.data.ndim != 2 or x.shape[1] != m:
        raise T.ShapeError(f"block expects L x {m} input, got {x.shape}")

    h = T.layer_norm(x, _const(block.ln1_g), _const(block.ln1_b))
    a = _site(h, plans.get("attn"), qc)
    q, k, v = (_proj(a, weights[n], ad.get(n)) for n in ("q", "k", "v"))
    o = _site(_attention(q, k, v, block.n_heads, seq_len), None, qc)
    x1 = T.add(x, _proj(o, weights["o"], ad.get("o")))

    f = _site(T.layer_norm(x1, _const(block.ln2_g), _const(block.ln2_b)), plans.get("ffn"), qc)
    g = _proj(f, weights["gate"], ad.get("gate"))
    u = _proj(f, weights["up"], ad.get("up"))
    mid = _site(T.mul(T.silu(g), u), plans.get("down"), qc)
    return T.add(x1, _proj(mid, weights["down"], ad.get("down")))


def model_forward(x, model: Model | QuantizedModel, mode: str | None = None,
                  adapters: Sequence[Mapping] | None = None,
                  plans: Sequence[Mapping[str, ReassemblyPlan]] | None = None,
                  quant_cfg: QuantConfig | None = None, seq_len: int | None = None) -> Tensor:
    if mode is None:
        mode = "quantsim" if isinstance(model, QuantizedModel) else "fp"
    out = T.as_tensor(x)
    for i, block in enumerate(model.blocks):
        out = block_forward(out, block, mode,
                            plans=plans[i] if plans else None,
                            adapters=adapters[i] if adapters else None,
                            quant_cfg=quant_cfg, seq_len=seq_len)
    return out


def site_activations(x, block: BlockWeights) -> dict[str, np.ndarray]:
    """Full-precision inputs of the three reassembly sites of ``block``, plus its output."""
    x = T.as_tensor(x)
    p = block.proj
    h = layer_norm_np(x.data, block.ln1_g, block.ln1_b)
    q, k, v = h @ p["q"], h @ p["k"], h @ p["v"]
    x1 = x.data + causal_attention(q, k, v, block.n_heads) @ p["o"]
    f = layer_norm_np(x1, block.ln2_g, block.ln2_b)
    g, u = f @ p["gate"], f @ p["up"]
    mid = g * (0.5 * (1.0 + np.tanh(0.5 * g))) * u
    return {"attn": h, "ffn": f, "down": mid, "out": x1 + mid @ p["down"]}


def layer_norm_np(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps) * g + b


# --- synthetic generators ---------------------------------------------------


def _f32(a: np.ndarray) -> np.ndarray:
    """Round to float32 precision but keep float64 storage."""
    out = a.astype(np.float32).astype(np.float64)
    out.setflags(write=False)
    return out


def gen_synthetic_model(config: ModelConfig, seed: int = 0,
                        outliers: OutlierSpec | None = OutlierSpec()) -> Model:
    """Gaussian weights (std ``1/sqrt(fan_in)``); LayerNorm gains at the outlier
    channels are multiplied by ``outliers.factor`` in every block.

    The matching input rows of the q/k/v and gate/up projections are divided by
    the same factor, so the full-precision function stays unit-scale while the
    projection inputs carry the outliers.
    """
    m, dff = config.d_model, config.d_ff
    if outliers is not None and any(not 0 <= c < m for c in outliers.channels):
        raise ValueError(f"outlier channels must lie in [0, {m})")
    blocks = []
    for layer in range(config.n_layers):
        rng = make_rng(seed, 1, layer)
        shapes = {"q": (m, m), "k": (m, m), "v": (m, m), "o": (m, m),
                  "gate": (m, dff), "up": (m, dff), "down": (dff, m)}
        proj = {k: rng.standard_normal(s) / math.sqrt(s[0]) for k, s in shapes.items()}
        gains, biases = [], []
        for _ in range(2):
            g = 1.0 + 0.1 * rng.standard_normal(m)
            if outliers is not None:
                g[list(outliers.channels)] *= outliers.factor
            gains.append(_f32(g))
            biases.append(_f32(0.05 * rng.standard_normal(m)))
        if outliers is not None:
            # consumers see the outlier channel at its usual contribution
            rows = list(outliers.channels)
            for k in ("q", "k", "v", "gate", "up"):
                proj[k][rows] /= outliers.factor
        proj = {k: _f32(w) for k, w in proj.items()}
        blocks.append(BlockWeights(config.n_heads, gains[0], biases[0], gains[1], biases[1], proj))
    return Model(config, blocks)


@dataclass
class CalibrationSet:
    samples: list[np.ndarray]
    seed: int
    outliers: OutlierSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise ValueError("calibration set needs at least one sample")
        if len({s.shape for s in self.samples}) != 1:
            raise ValueError("calibration samples must share one shape")


def gen_calibration(config: ModelConfig, seed: int = 0, n_samples: int = 16,
                    outliers: OutlierSpec | None = None) -> CalibrationSet:
    rng = make_rng(seed, 2)
    samples = [_f32(rng.standard_normal((config.seq_len, config.d_model))) for _ in range(n_samples)]
    return CalibrationSet(samples, seed, outliers)


def replace_weights(qblock: QuantBlock, weights: Mapping[str, QWeight]) -> QuantBlock:
    return replace(qblock, weights={**qblock.weights, **weights})
