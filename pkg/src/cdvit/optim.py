"""Adam with decoupled weight decay, plus the training-rate schedules."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Decoupled weight decay is applied to matrices only (ndim >= 2);
    biases, gains, position encodings stored as vectors are exempt.
    Parameter traversal is name-sorted so updates are deterministic."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.names = sorted(self.params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(self.params[n].data) for n in self.names}
        self._v = {n: np.zeros_like(self.params[n].data) for n in self.names}

    def zero_grad(self) -> None:
        for n in self.names:
            self.params[n].zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad
            m = self._m[n]
            v = self._v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in sorted(params):
            params[name].grad *= scale
    return norm


def warmup_cosine_lr(step: int, total_steps: int, warmup_steps: int,
                     peak_lr: float, final_lr: float = 1e-6) -> float:
    """Linear warmup to peak_lr, then cosine decay to final_lr."""
    if total_steps <= 0:
        return peak_lr
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return final_lr + 0.5 * (peak_lr - final_lr) * (1.0 + math.cos(math.pi * frac))


def cosine_momentum(step: int, total_steps: int, base: float, final: float = 1.0) -> float:
    """EMA momentum ramped from base to final on a cosine; constant if equal."""
    if base == final or total_steps <= 0:
        return base
    frac = min(1.0, step / total_steps)
    return final - 0.5 * (final - base) * (1.0 + math.cos(math.pi * frac))
