"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .autodiff import Tensor


def cosine_lr(step: int, max_lr: float, total_steps: int, warmup_frac: float = 0.02,
              min_lr_ratio: float = 0.1) -> float:
    """Learning rate for a 0-based optimizer step: linear warmup, then cosine decay."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    min_lr = max_lr * min_lr_ratio
    if step < warmup:
        return max_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return min_lr + 0.5 * (max_lr - min_lr) * (1 + math.cos(math.pi * progress))


class AdamW:
    """AdamW over Tensors holding ``.grad``.

    Weight decay applies only to parameters listed in ``decay``; gains, gates
    and the SPD transform parameters are left undecayed by the caller.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.1, decay: Iterable[Tensor] = ()):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        decay_ids = {id(p) for p in decay}
        self._decay = [id(p) in decay_ids for p in self.params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return math.sqrt(total)

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if max_norm > 0 and norm > max_norm:
            factor = max_norm / (norm + 1e-12)
            for p in self.params:
                if p.grad is not None:
                    p.grad *= factor
        return norm

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self._decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if decay and self.weight_decay:
                p.data *= 1 - lr * self.weight_decay
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
