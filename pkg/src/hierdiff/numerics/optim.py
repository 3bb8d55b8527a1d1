from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Adam with decoupled weight decay, stepping Tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.95, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-6):
        self.params = list(params)
        self.lr = lr
        self.base_lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim/t": np.array(float(self.t))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"optim/m/{i}"] = m
            out[f"optim/v/{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(np.asarray(arrays["optim/t"]).reshape(-1)[0])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"optim/m/{i}"]
            self.v[i][...] = arrays[f"optim/v/{i}"]


def cosine_lr(base_lr: float, step: int, total_steps: int, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
