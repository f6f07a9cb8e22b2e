"""Channel disassembly / assembly of activation outliers and the threshold search.

Indexing conventions
--------------------
Activations are ``tokens x channels`` and a consuming weight is
``channels x outputs``.  A plan splits channel ``i`` into ``T_i`` adjacent
sub-channels (the "expanded" index space of size ``M' = sum(T)``) and then
merges ``sum(T - 1)`` unprotected channels back so the count returns to ``M``.
``merge_pairs`` hold ``(src, dst)`` indices in the expanded space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .quant import QuantConfig


class InfeasiblePlanError(ValueError):
    """More channels would have to be merged than the matching can provide."""


class PlanError(ValueError):
    """A plan is inconsistent with itself or with the tensor it is applied to."""


@dataclass(frozen=True)
class ChannelStats:
    max: np.ndarray
    min: np.ndarray
    maxabs: np.ndarray

    @property
    def n_channels(self) -> int:
        return int(self.max.shape[0])


@dataclass(frozen=True)
class ReassemblyPlan:
    theta: float
    splits: np.ndarray
    merge_pairs: tuple[tuple[int, int], ...] = ()
    protected: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        splits = np.asarray(self.splits, dtype=np.int64)
        splits.setflags(write=False)
        object.__setattr__(self, "splits", splits)
        object.__setattr__(self, "merge_pairs", tuple((int(s), int(d)) for s, d in self.merge_pairs))
        object.__setattr__(self, "protected", frozenset(int(i) for i in self.protected))
        self.validate()

    @classmethod
    def identity(cls, n_channels: int, theta: float = math.inf) -> "ReassemblyPlan":
        return cls(theta, np.ones(n_channels, dtype=np.int64))

    @property
    def n_channels(self) -> int:
        return int(self.splits.shape[0])

    @property
    def n_expanded(self) -> int:
        return int(self.splits.sum())

    @property
    def extra_channels(self) -> int:
        return int((self.splits - 1).sum())

    @property
    def expansion_ratio(self) -> float:
        return self.extra_channels / self.n_channels

    @property
    def is_identity(self) -> bool:
        return self.extra_channels == 0 and not self.merge_pairs

    def validate(self) -> None:
        if np.any(self.splits < 1):
            raise PlanError("every split count must be >= 1")
        if self.extra_channels != len(self.merge_pairs):
            raise PlanError(
                f"{self.extra_channels} extra channels but {len(self.merge_pairs)} merge pairs"
            )
        srcs = [s for s, _ in self.merge_pairs]
        dsts = {d for _, d in self.merge_pairs}
        if len(set(srcs)) != len(srcs):
            raise PlanError("a source channel is merged more than once")
        if dsts & set(srcs):
            raise PlanError("a channel is both a merge source and destination")
        for idx in (*srcs, *dsts):
            if not 0 <= idx < self.n_expanded:
                raise PlanError(f"merge index {idx} outside expanded range {self.n_expanded}")
            if idx in self.protected:
                raise PlanError(f"merge index {idx} is a protected sub-channel")

    @cached_property
    def matrix(self) -> np.ndarray:
        """``M x M`` matrix ``R`` with ``apply_plan_runtime(X) == X @ R`` (up to rounding)."""
        return apply_plan_runtime(np.eye(self.n_channels), self)

    def to_dict(self) -> dict:
        big = np.flatnonzero(self.splits > 1)
        return {
            "theta": None if math.isinf(self.theta) else float(self.theta),
            "n_channels": self.n_channels,
            "splits": {str(int(i)): int(self.splits[i]) for i in big},
            "merge_pairs": [list(p) for p in self.merge_pairs],
            "expansion_ratio": self.expansion_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReassemblyPlan":
        splits = np.ones(d["n_channels"], dtype=np.int64)
        for i, t in d["splits"].items():
            splits[int(i)] = t
        theta = math.inf if d["theta"] is None else d["theta"]
        return cls(theta, splits, tuple(map(tuple, d["merge_pairs"])), protected_subchannels(splits))


# --- statistics and thresholds --------------------------------------------


def _stack(acts) -> np.ndarray:
    if isinstance(acts, np.ndarray):
        return acts if acts.ndim == 2 else acts.reshape(-1, acts.shape[-1])
    return np.concatenate([np.asarray(a, dtype=np.float64) for a in acts], axis=0)


def channel_outlier_stats(calib_acts: Sequence[np.ndarray]) -> ChannelStats:
    if len(calib_acts) == 0:
        raise ValueError("empty calibration set")
    widths = {np.shape(a)[-1] for a in calib_acts}
    if len(widths) != 1:
        raise ValueError(f"calibration samples disagree on channel count: {sorted(widths)}")
    x = _stack(calib_acts)
    hi, lo = x.max(axis=0), x.min(axis=0)
    return ChannelStats(hi, lo, np.maximum(np.abs(hi), np.abs(lo)))


def _maxabs(stats) -> np.ndarray:
    return stats.maxabs if isinstance(stats, ChannelStats) else np.asarray(stats, dtype=np.float64)


def disassembly_counts(stats, theta: float) -> np.ndarray:
    """``T_i = ceil(maxabs_i / theta)``, at least 1, and never leaving ``maxabs_i / T_i > theta``."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    m = _maxabs(stats)
    t = np.maximum(np.ceil(m / theta), 1).astype(np.int64)
    # guard against the ratio rounding down across an integer
    while np.any(over := m / t > theta):
        t[over] += 1
    return t


def theta_grid(stats, grid_points: int) -> np.ndarray:
    """Candidates ``min(m) + p/P * (max(m) - min(m))`` for ``p = 1..P``; the last is ``max(m)``."""
    if grid_points < 1:
        raise ValueError("grid_points must be >= 1")
    m = _maxabs(stats)
    lo, hi = float(m.min()), float(m.max())
    grid = np.array([lo + (p / grid_points) * (hi - lo) for p in range(1, grid_points + 1)])
    grid[-1] = hi
    return grid


def theta_from_expansion_ratio(stats, gamma: float, grid_points: int = 100) -> float:
    """Smallest grid threshold whose disassembly adds at most ``floor(gamma * M)`` channels."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    m = _maxabs(stats)
    budget = math.floor(gamma * m.shape[0])
    grid = theta_grid(m, grid_points)
    if budget == 0:
        return float(grid[-1])
    for theta in grid:
        if (disassembly_counts(m, theta) - 1).sum() <= budget:
            return float(theta)
    return float(grid[-1])


def protected_subchannels(splits) -> frozenset[int]:
    splits = np.asarray(splits)
    ends = np.cumsum(splits)
    out: set[int] = set()
    for t, end in zip(splits, ends):
        if t > 1:
            out.update(range(end - t, end))
    return frozenset(out)


# --- the two halves of a plan ---------------------------------------------


def disassemble(x: np.ndarray, splits) -> np.ndarray:
    """Replace channel ``i`` with ``T_i`` adjacent copies of ``x_i / T_i``."""
    splits = np.asarray(splits)
    if x.shape[-1] != splits.shape[0]:
        raise PlanError(f"{x.shape[-1]} channels but {splits.shape[0]} split counts")
    return np.repeat(x / splits, splits, axis=-1)


def replicate_rows(w: np.ndarray, splits) -> np.ndarray:
    return np.repeat(w, np.asarray(splits), axis=0)


def channel_distance(x_i, x_j, w_i, w_j) -> float:
    """Squared error of replacing ``x_i w_i + x_j w_j`` by their merged channel."""
    x_i, x_j = np.asarray(x_i, float), np.asarray(x_j, float)
    w_i, w_j = np.asarray(w_i, float), np.asarray(w_j, float)
    if x_i.shape != x_j.shape or w_i.shape != w_j.shape:
        raise ValueError("channel shapes differ")
    d = np.outer(x_i, w_i - w_j) / 2 + np.outer(x_j, w_j - w_i) / 2
    return float((d * d).sum())


def _pair_distances(x: np.ndarray, w: np.ndarray, a_idx, b_idx) -> np.ndarray:
    # The merged-pair error factorises: D(i, j) = |x_i - x_j|^2 |w_i - w_j|^2 / 4.
    def sq_dists(u, v):  # rows of u against rows of v
        d = (u * u).sum(1)[:, None] + (v * v).sum(1)[None, :] - 2.0 * (u @ v.T)
        return np.maximum(d, 0.0)

    return sq_dists(x[:, a_idx].T, x[:, b_idx].T) * sq_dists(w[a_idx], w[b_idx]) / 4.0


def bipartite_sets(n_expanded: int, protected=()) -> tuple[np.ndarray, np.ndarray]:
    """Alternate the unprotected channels (in index order) between sets A and B."""
    free = np.array([i for i in range(n_expanded) if i not in protected], dtype=np.int64)
    return free[0::2], free[1::2]


def find_merge_pairs(acts, w: np.ndarray, budget: int, protected=()) -> list[tuple[int, int]]:
    """Bipartite soft matching: each A channel proposes its nearest B channel and the
    ``budget`` cheapest proposals are kept (ties go to the lower index)."""
    if budget == 0:
        return []
    x = _stack(acts)
    n = x.shape[1]
    if w.shape[0] != n:
        raise ValueError(f"weight has {w.shape[0]} rows for {n} channels")
    a_idx, b_idx = bipartite_sets(n, set(protected))
    if budget > len(b_idx) or budget < 0:
        raise InfeasiblePlanError(
            f"cannot merge {budget} channels with {len(a_idx) + len(b_idx)} unprotected"
        )
    dist = _pair_distances(x, w, a_idx, b_idx)
    nearest = dist.argmin(axis=1)
    edge = dist[np.arange(len(a_idx)), nearest]
    order = np.lexsort((a_idx, edge))[:budget]
    return [(int(a_idx[k]), int(b_idx[nearest[k]])) for k in order]


def _merge_groups(merge_pairs) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for src, dst in merge_pairs:
        groups.setdefault(dst, []).append(src)
    return groups


def assemble(x: np.ndarray, merge_pairs, protected=()) -> np.ndarray:
    """Average every destination with the sources merged into it, then drop the sources."""
    protected = set(protected)
    n = x.shape[-1]
    srcs = [s for s, _ in merge_pairs]
    for s, d in merge_pairs:
        if s in protected or d in protected:
            raise PlanError(f"merge pair ({s}, {d}) touches a protected channel")
        if not (0 <= s < n and 0 <= d < n):
            raise PlanError(f"merge pair ({s}, {d}) outside {n} channels")
    out = x.copy()
    for dst, members in _merge_groups(merge_pairs).items():
        acc = x[..., dst].copy()
        for s in members:
            acc = acc + x[..., s]
        out[..., dst] = acc / (1 + len(members))
    keep = np.setdiff1d(np.arange(n), srcs)
    return out[..., keep]


def apply_plan_runtime(x: np.ndarray, plan: ReassemblyPlan) -> np.ndarray:
    if x.shape[-1] != plan.n_channels:
        raise PlanError(f"input has {x.shape[-1]} channels, plan expects {plan.n_channels}")
    return assemble(disassemble(x, plan.splits), plan.merge_pairs, plan.protected)


def reassemble_weights(w: np.ndarray, plan: ReassemblyPlan) -> np.ndarray:
    """Rows replicated (unscaled) for disassembly, source rows summed into destinations."""
    if w.shape[0] != plan.n_channels:
        raise PlanError(f"weight has {w.shape[0]} rows, plan expects {plan.n_channels}")
    wd = replicate_rows(w, plan.splits)
    out = wd.copy()
    for dst, members in _merge_groups(plan.merge_pairs).items():
        acc = wd[dst].copy()
        for s in members:
            acc = acc + wd[s]
        out[dst] = acc
    keep = np.setdiff1d(np.arange(wd.shape[0]), [s for s, _ in plan.merge_pairs])
    return out[keep]


def fold_plan_into_previous_linear(w_prev: np.ndarray, plan: ReassemblyPlan) -> np.ndarray:
    """Fold the runtime plan into the output columns of a preceding linear layer.

    Columns of split channels are replicated and scaled by ``1/T``; merged
    columns are averaged.  Afterwards ``x @ folded == apply_plan_runtime(x @ w_prev)``.
    """
    if w_prev.shape[1] != plan.n_channels:
        raise PlanError(f"previous layer has {w_prev.shape[1]} outputs, plan expects {plan.n_channels}")
    return apply_plan_runtime(w_prev, plan)


def build_plan(acts, w: np.ndarray, theta: float, stats: ChannelStats | None = None) -> ReassemblyPlan:
    """Disassemble at ``theta`` and pick merge pairs on the calibration activations.

    ``w`` is the consuming weight (several consumers concatenated column-wise).
    """
    x = _stack(acts)
    stats = stats if stats is not None else channel_outlier_stats([x])
    splits = disassembly_counts(stats, theta)
    protected = protected_subchannels(splits)
    budget = int((splits - 1).sum())
    pairs = find_merge_pairs(disassemble(x, splits), replicate_rows(w, splits), budget, protected)
    return ReassemblyPlan(float(theta), splits, tuple(pairs), protected)


# --- reassembly error objectives ------------------------------------------


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int) -> np.ndarray:
    """Masked multi-head ``softmax(q k^T / sqrt(d_head)) v``.

    Inputs are ``L x M`` for one sequence or ``S x L x M`` for a batch.
    """
    *lead, L, M = q.shape
    dh = M // n_heads

    def heads(t):
        return t.reshape(*lead, L, n_heads, dh).swapaxes(-3, -2)

    s = heads(q) @ heads(k).swapaxes(-1, -2) / math.sqrt(dh)
    s = np.where(np.triu(np.ones((L, L), dtype=bool), k=1), -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return (p @ heads(v)).swapaxes(-3, -2).reshape(*lead, L, M)


def _batch(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return x[None]
    return np.stack([np.asarray(s, dtype=np.float64) for s in x])


def _quant_rows(cfg: QuantConfig, x3: np.ndarray) -> np.ndarray:
    s, L, m = x3.shape
    return cfg.quant_act(x3.reshape(s * L, m)).reshape(s, L, m)


def attention_reassembly_error(x, w_q, w_k, w_v, plan: ReassemblyPlan,
                               quant_cfg: QuantConfig | None, n_heads: int = 1) -> float:
    """Squared Frobenius gap between full-precision attention output and the one
    computed from the quantized reassembled input and weights (summed over samples)."""
    cfg = quant_cfg or QuantConfig(None, None)
    xs = _batch(x)
    wq_hat = [cfg.quant_weight(reassemble_weights(w, plan)) for w in (w_q, w_k, w_v)]
    ref = causal_attention(xs @ w_q, xs @ w_k, xs @ w_v, n_heads)
    xq = _quant_rows(cfg, apply_plan_runtime(xs, plan))
    got = causal_attention(xq @ wq_hat[0], xq @ wq_hat[1], xq @ wq_hat[2], n_heads)
    return float(((ref - got) ** 2).sum())


def linear_reassembly_error(x, w_list: Sequence[np.ndarray], plan: ReassemblyPlan,
                            quant_cfg: QuantConfig | None) -> float:
    cfg = quant_cfg or QuantConfig(None, None)
    xs = _stack(x)
    xq = cfg.quant_act(apply_plan_runtime(xs, plan))
    total = 0.0
    for w in w_list:
        wq = cfg.quant_weight(reassemble_weights(w, plan))
        total += float(((xs @ w - xq @ wq) ** 2).sum())
    return total


class SearchResult(NamedTuple):
    theta: float
    plan: ReassemblyPlan
    grid: np.ndarray
    losses: np.ndarray


def adaptive_search(stats: ChannelStats | None, acts, consuming_weights: Sequence[np.ndarray],
                    grid_points: int, quant_cfg: QuantConfig | None,
                    objective: str | Callable[[ReassemblyPlan], float] = "linear",
                    n_heads: int = 1) -> SearchResult:
    """Grid search over thresholds minimising the reassembly error.

    ``objective`` is ``"attention"`` (weights are ``W_Q, W_K, W_V``),
    ``"linear"``, or a callable scoring a plan.  Infeasible grid points score
    ``inf``; ties keep the larger threshold.
    """
    samples = _batch(acts)
    stats = stats if stats is not None else channel_outlier_stats(samples)
    w_cat = np.concatenate(list(consuming_weights), axis=1)
    if objective == "attention":
        def score(plan):
            return attention_reassembly_error(samples, *consuming_weights, plan, quant_cfg, n_heads)
    elif objective == "linear":
        def score(plan):
            return linear_reassembly_error(samples, consuming_weights, plan, quant_cfg)
    elif callable(objective):
        score = objective
    else:
        raise ValueError(f"unknown objective {objective!r}")

    grid = theta_grid(stats, grid_points)
    if grid[-1] <= 0:
        plan = ReassemblyPlan.identity(stats.n_channels)
        return SearchResult(math.inf, plan, grid, np.zeros(grid_points))
    losses = np.full(grid_points, np.inf)
    best = (-1, math.inf, None)
    seen: dict[tuple, float] = {}
    for p, theta in enumerate(grid):
        try:
            plan = build_plan(samples, w_cat, theta, stats)
        except InfeasiblePlanError:
            continue
        key = (plan.splits.tobytes(), plan.merge_pairs)
        if key not in seen:
            seen[key] = score(plan)
        losses[p] = seen[key]
        if losses[p] <= best[1]:
            best = (p, losses[p], plan)
    p, _, plan = best
    return SearchResult(float(grid[p]), plan, grid, losses)
