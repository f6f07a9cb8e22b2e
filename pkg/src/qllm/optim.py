from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and an optional stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


class AdamW:
    """AdamW with decoupled weight decay and a linear learning-rate decay to zero.

    The learning rate used for update ``t`` (0-based) is ``lr * (1 - t / total_steps)``.
    Parameters are updated in place by swapping in a fresh read-only array.
    """

    def __init__(self, params: list[Tensor], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, total_steps: int = 1):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def lr_at(self, t: int) -> float:
        return self.lr * (1.0 - t / self.total_steps)

    def step(self, grads: list[np.ndarray]) -> None:
        if self.step_count >= self.total_steps:
            raise RuntimeError("optimizer schedule exhausted")
        if len(grads) != len(self.params):
            raise ShapeError("one gradient per parameter required")
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            w = p.data * (1.0 - lr * self.weight_decay)
            w = w - lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            w.setflags(write=False)
            p.data = w
