"""Central finite-difference verification of autodiff gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError
from .tensor import check_finite


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tol: float = 1e-4
    checked: dict = field(default_factory=dict)

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def ok(self):
        return self.worst < self.tol


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(fn, inputs, h=1e-6, tol=1e-4, max_coords=None, rng=None, floor=1e-6):
    """Compare ``backward`` of the scalar closure ``fn()`` against central differences.

    ``inputs`` maps names to leaf tensors that ``fn`` reads. When an input has more
    than ``max_coords`` elements a random subset of coordinates is checked.
    """
    if not isinstance(inputs, dict):
        inputs = {str(i): t for i, t in enumerate(inputs)}
    rng = rng or np.random.default_rng(0)
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise NumericError(f"grad_check needs float64 inputs ({name} is {t.dtype})")
        t.grad = None
    report = GradCheckReport(tol=tol)
    with check_finite(True):
        out = fn()
        if out.data.size != 1:
            raise ValueError("grad_check closure must return a scalar")
        out.backward()
        for name, t in inputs.items():
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
            numeric = np.empty(len(coords))
            base = t.data
            for j, i in enumerate(coords):
                pert = base.copy()
                pert.reshape(-1)[i] += h
                t.data = pert
                fp = fn().item()
                pert = base.copy()
                pert.reshape(-1)[i] -= h
                t.data = pert
                fm = fn().item()
                numeric[j] = (fp - fm) / (2 * h)
            t.data = base
            err = relative_error(analytic.reshape(-1)[coords], numeric, floor)
            report.max_rel_error[name] = float(err.max(initial=0.0))
            report.checked[name] = len(coords)
    return report
