"""Parameter containers and layers."""
from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from . import ops
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container (Tensors, sub-Modules, lists of Modules)."""

    def named_tensors(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield from v.named_tensors(f"{full}.{i}.")

    def named_parameters(self):
        return [(n, t) for n, t in self.named_tensors() if t.requires_grad]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state_dict(self):
        return {n: t.data.copy() for n, t in self.named_tensors()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_tensors())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise ValidationError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in own:
                continue
            t = own[name]
            if tuple(arr.shape) != t.shape:
                raise ValidationError(f"{name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = np.asarray(arr, dtype=t.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, dtype=np.float32, gain=1.0):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        w = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, np.float64) * gain
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype), requires_grad=True)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.weight = Tensor(kaiming_uniform(rng, (cout, cin), cin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype), requires_grad=True)

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class FrozenAffine(Module):
    """Per-channel ``x * scale + shift`` with untrained parameters.

    Stand-in for an inference-mode normalization layer; identity by default.
    """

    def __init__(self, channels, dtype=np.float32):
        self.scale = Tensor(np.ones((1, channels, 1, 1), dtype))
        self.shift = Tensor(np.zeros((1, channels, 1, 1), dtype))

    def forward(self, x):
        return ops.add(ops.mul(x, self.scale), self.shift)
