"""Low-rank error correction for a reassembled, quantized model.

Every projection gets an adapter ``(A, B)`` so that its output becomes
``quant(x) quant(W) + quant(x) A B``.  Groups of consecutive blocks are
trained front to back against the full-precision model, each group fed with
the activations produced by the already corrected (and merged) groups before
it.  After training a group its adapters are folded into the weights as
``quant(W + A B)``.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import (PROJECTIONS, BlockWeights, Model, QuantBlock, QuantizedModel, QWeight,
                    block_forward, quantize_weight, reassembled_weights, replace_weights)
from .optim import AdamW, make_rng
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class CorrectionError(RuntimeError):
    pass


@dataclass
class LowRankAdapter:
    A: Tensor
    B: Tensor

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def n_params(self) -> int:
        return self.A.data.size + self.B.data.size

    def delta(self) -> np.ndarray:
        return self.A.data @ self.B.data


@dataclass(frozen=True)
class CorrectionConfig:
    rank: int = 4
    epochs: int = 10
    batch_size: int = 1
    lr: float = 5e-4
    group_size: int = 4
    weight_decay: float = 0.0
    init_std: float = 1e-3
    merge: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("rank", "epochs", "batch_size", "group_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class ReconstructionTrace:
    group: tuple[int, ...]
    initial_loss: float
    final_loss: float = float("nan")
    step_losses: list[float] = field(default_factory=list)
    improved: bool = False
    n_params: int = 0
    seconds: float = 0.0

    def to_dict(self, max_steps: int | None = None) -> dict:
        steps = self.step_losses
        if max_steps and len(steps) > max_steps:
            stride = -(-len(steps) // max_steps)
            steps = steps[::stride]
        return {"blocks": list(self.group), "initial_loss": self.initial_loss,
                "final_loss": self.final_loss, "improved": self.improved,
                "trainable_params": self.n_params, "step_losses": steps}


Adapters = dict[str, LowRankAdapter]


def attach_adapters(model: QuantizedModel, rank: int = 4, seed: int = 0,
                    init_std: float = 1e-3) -> list[Adapters]:
    """One adapter per projection: ``A`` small Gaussian, ``B`` zero."""
    out = []
    for i, block in enumerate(model.blocks):
        ads = {}
        for j, name in enumerate(PROJECTIONS):
            m, n = block.weights[name].deq.shape
            if not 1 <= rank <= min(m, n):
                raise ValueError(f"rank {rank} exceeds dims {m}x{n} of {name}")
            rng = make_rng(seed, 3, i, j)
            ads[name] = LowRankAdapter(Tensor(init_std * rng.standard_normal((m, rank)), True),
                                       Tensor(np.zeros((rank, n)), True))
        out.append(ads)
    return out


def count_params(adapters: Sequence[Adapters]) -> int:
    return sum(a.n_params for ads in adapters for a in ads.values())


def _stacked(xs: Sequence[np.ndarray]) -> tuple[np.ndarray, int]:
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    if not xs or len({x.shape for x in xs}) != 1 or xs[0].ndim != 2:
        raise T.ShapeError("samples must be a non-empty list of equal-shape L x M arrays")
    return np.concatenate(xs, axis=0), xs[0].shape[0]


def _group_forward(x, blocks, adapters, seq_len: int | None = None) -> Tensor:
    for block, ads in zip(blocks, adapters):
        x = block_forward(x, block, "quantsim", adapters=ads, seq_len=seq_len)
    return x


def _fp_forward(x, blocks: Sequence[BlockWeights], seq_len: int | None = None) -> np.ndarray:
    for block in blocks:
        x = block_forward(x, block, "fp", seq_len=seq_len)
    return T.as_tensor(x).data


def group_loss(q_blocks, adapters, q_input: np.ndarray, target: np.ndarray,
               seq_len: int | None = None) -> float:
    """Mean squared error of the quantized group output against ``target``."""
    out = _group_forward(q_input, q_blocks, adapters, seq_len)
    return float(np.mean((out.data - target) ** 2))


def reconstruct_group(fp_blocks: Sequence[BlockWeights], q_blocks: Sequence[QuantBlock],
                      adapters: Sequence[Adapters], fp_inputs: Sequence[np.ndarray],
                      q_inputs: Sequence[np.ndarray], cfg: CorrectionConfig,
                      group: tuple[int, ...] = ()) -> ReconstructionTrace:
    """Train the group's adapters (in place) to match the full-precision group output.

    The loss is the mean squared error over samples and elements.  Quantized
    weights stay frozen; gradients reach earlier blocks through the
    straight-through activation fake-quant.  A mini-batch is run as one pass
    over its samples stacked along the token axis.
    """
    t0 = time.perf_counter()
    fp_all, L = _stacked(fp_inputs)
    q_all, Lq = _stacked(q_inputs)
    if fp_all.shape != q_all.shape:
        raise T.ShapeError(f"fp inputs {fp_all.shape} and quantized inputs {q_all.shape} differ")
    target_all = _fp_forward(fp_all, fp_blocks, L)
    n = len(q_inputs)
    params = [t for ads in adapters for a in ads.values() for t in (a.A, a.B)]
    steps_per_epoch = -(-n // cfg.batch_size)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                total_steps=cfg.epochs * steps_per_epoch)

    def rows(idx):
        return np.concatenate([np.arange(i * L, (i + 1) * L) for i in idx])

    trace = ReconstructionTrace(tuple(group), group_loss(q_blocks, adapters, q_all, target_all, L),
                                n_params=count_params(adapters))
    rng = make_rng(cfg.seed, 4, *group)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            r = rows(order[start:start + cfg.batch_size])
            with Tape() as tape:
                out = _group_forward(q_all[r], q_blocks, adapters, L)
                loss = T.mean_squared(out, Tensor._wrap(target_all[r], False))
            value = float(loss.data)
            if not np.isfinite(value):
                raise CorrectionError(
                    f"non-finite loss in group {group} at epoch {epoch}, step {opt.step_count}")
            g = T.backward(tape, loss)
            trace.step_losses.append(value)
            opt.step([g.get(p, np.zeros_like(p.data)) for p in params])
    trace.final_loss = group_loss(q_blocks, adapters, q_all, target_all, L)
    trace.improved = trace.final_loss < trace.initial_loss
    trace.seconds = time.perf_counter() - t0
    if not trace.improved:
        warnings.warn(f"reconstruction of group {group} did not reduce the loss "
                      f"({trace.initial_loss:.4g} -> {trace.final_loss:.4g})")
    log.info("group %s: loss %.4g -> %.4g", group, trace.initial_loss, trace.final_loss)
    return trace


def merge_adapters(w: np.ndarray, adapter: LowRankAdapter | None, granularity: str = "per_channel",
                   bits: int | None = 4) -> QWeight:
    """``quant(W + A B)`` computed in full precision, then quantized."""
    merged = w if adapter is None else w + adapter.delta()
    return quantize_weight(merged, bits, granularity)


def merge_block(block: QuantBlock, adapters: Adapters, bits: int | None,
                granularity: str = "per_channel", fp_block: BlockWeights | None = None) -> QuantBlock:
    """Merge every adapter of ``block``.  The full-precision base weights come
    from ``fp_block`` (re-folded with the block's plans) when given, otherwise
    from the copies kept on the quantized weights."""
    if fp_block is not None:
        base = reassembled_weights(fp_block, block.plans)
    else:
        base = {name: block.weights[name].fp for name in PROJECTIONS}
        if any(v is None for v in base.values()):
            raise CorrectionError("quantized block carries no full-precision weights; pass fp_block")
    merged = {name: merge_adapters(base[name], adapters.get(name), granularity, bits)
              for name in PROJECTIONS}
    return replace_weights(block, merged)


@dataclass
class CorrectionResult:
    model: QuantizedModel
    adapters: list[Adapters]
    traces: list[ReconstructionTrace]
    unmerged: QuantizedModel


def sequential_correct(fp_model: Model, qmodel: QuantizedModel, calib: Sequence[np.ndarray],
                       cfg: CorrectionConfig = CorrectionConfig()) -> CorrectionResult:
    """Correct groups of ``cfg.group_size`` blocks front to back.

    ``fp_model`` supplies the targets; ``qmodel`` must already carry its
    reassembly plans.  With ``cfg.merge`` each group is merged before the next
    one is trained, so later groups see the merged weights' error.
    """
    qc = qmodel.quant
    adapters = attach_adapters(qmodel, cfg.rank, cfg.seed, cfg.init_std)
    blocks = list(qmodel.blocks)
    merged_blocks: list[QuantBlock] = []
    traces = []
    fp_x, L = _stacked(calib)
    q_x = fp_x
    n_samples = len(calib)

    def split(x):
        return [x[i * L:(i + 1) * L] for i in range(n_samples)]

    n = len(blocks)
    for start in range(0, n, cfg.group_size):
        idx = tuple(range(start, min(start + cfg.group_size, n)))
        fp_blocks = [fp_model.blocks[i] for i in idx]
        q_blocks = [blocks[i] for i in idx]
        ads = [adapters[i] for i in idx]
        traces.append(reconstruct_group(fp_blocks, q_blocks, ads, split(fp_x), split(q_x), cfg, idx))
        if cfg.merge:
            group_out = [merge_block(blocks[i], adapters[i], qc.w_bits, qc.weight_granularity,
                                     fp_model.blocks[i]) for i in idx]
            q_x = _group_forward(q_x, group_out, [{}] * len(idx), L).data
        else:
            group_out = q_blocks
            q_x = _group_forward(q_x, q_blocks, ads, L).data
        merged_blocks.extend(group_out)
        fp_x = _fp_forward(fp_x, fp_blocks, L)
    final = QuantizedModel(qmodel.config, qc, merged_blocks)
    return CorrectionResult(final, adapters, traces, qmodel)
