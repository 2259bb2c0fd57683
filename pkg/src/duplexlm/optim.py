"""AdamW with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .params import ParamStore
from .tensor import ContractError


class AdamW:
    """Standard AdamW with bias correction; weight_decay defaults to 0."""

    def __init__(
        self,
        params: ParamStore,
        lr: float = 5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {
            name: np.zeros_like(t.data) for name, t in params.items()
        }
        self.v = {
            name: np.zeros_like(t.data) for name, t in params.items()
        }

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adamw step with missing grad for {name}")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            update = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data -= update.astype(p.data.dtype)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.tensors():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.tensors():
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm
