from __future__ import annotations

import numpy as np


class AdamW:
    """Adam with decoupled weight decay over a list of parameters."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4,
                 no_decay=(), lr_mult=None):
        self.params = list(params)
        self.lr_mult = dict(lr_mult or {})
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = {p.name for p in self.params if any(tag in p.name for tag in no_decay)}
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p in self.params:
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            plr = lr * self.lr_mult.get(p.name, 1.0)
            if self.weight_decay and p.name not in self.no_decay:
                p.data *= 1.0 - plr * self.weight_decay
            p.data -= plr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int):
        for name in self.m:
            self.m[name] = arrays[f"adam.m.{name}"].copy()
            self.v[name] = arrays[f"adam.v.{name}"].copy()
        self.step_count = int(step_count)


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total
