"""Adam with bias correction over a list of diffcore parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Node
from .model import set_value


class NonFiniteGradient(FloatingPointError):
    def __init__(self, batch_index):
        super().__init__(f"non-finite gradient at batch {batch_index}; step aborted")
        self.batch_index = batch_index


@dataclass
class AdamState:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Plain Adam (no weight decay). Moments are keyed by parameter identity,
    so registration order has no effect on any trajectory."""

    def __init__(self, params: list[Node], lr: float = 2e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps, clip_norm)
        for p in self.params:
            self.state.m[id(p)] = np.zeros_like(p.value)
            self.state.v[id(p)] = np.zeros_like(p.value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, batch_index=None) -> None:
        s = self.state
        grads = [p.grad for p in self.params]
        if not all(np.isfinite(g).all() for g in grads):
            raise NonFiniteGradient(batch_index)
        if s.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > s.clip_norm:
                grads = [g * (s.clip_norm / norm) for g in grads]
        s.step_count += 1
        t = s.step_count
        bc1 = 1.0 - s.beta1 ** t
        bc2 = 1.0 - s.beta2 ** t
        for p, g in zip(self.params, grads):
            m = s.m[id(p)] = s.beta1 * s.m[id(p)] + (1.0 - s.beta1) * g
            v = s.v[id(p)] = s.beta2 * s.v[id(p)] + (1.0 - s.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            set_value(p, p.value - s.lr * m_hat / (np.sqrt(v_hat) + s.eps))
