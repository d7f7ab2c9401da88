"""Adam over the trainable entries of a :class:`ParamStore`."""
from __future__ import annotations

import torch

from .diffcore import ParamStore


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(t) for n, t in store.trainable()}
        self.v = {n: torch.zeros_like(t) for n, t in store.trainable()}

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        c1 = 1 - self.beta1 ** self.step_count
        c2 = 1 - self.beta2 ** self.step_count
        for name, p in self.store.trainable():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))

    def state(self):
        return {"m": self.m, "v": self.v}, self.step_count

    def load_state(self, moments, step: int) -> None:
        for kind, dst in (("m", self.m), ("v", self.v)):
            src = moments.get(kind, {})
            if set(src) != set(dst):
                raise ValueError(f"optimizer state names differ from the trainable parameters ({kind})")
            for name, arr in src.items():
                dst[name].copy_(torch.as_tensor(arr, dtype=dst[name].dtype))
        self.step_count = int(step)
