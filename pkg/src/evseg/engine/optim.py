from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SGD:
    """SGD with heavy-ball momentum; velocities are keyed by parameter name."""

    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float | None = None
    velocity: dict = field(default_factory=dict)

    def step(self, named_params):
        named_params = [(n, p) for n, p in named_params if p.grad is not None]
        scale = 1.0
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                               for _, p in named_params))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in named_params:
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = (p.data - self.lr * v).astype(p.dtype)
