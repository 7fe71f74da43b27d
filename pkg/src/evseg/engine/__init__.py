"""Minimal tensor engine with reverse-mode autodiff."""
from . import ops
from .gradcheck import GradCheckReport, grad_check
from .nn import Conv2d, FrozenAffine, Linear, Module
from .optim import SGD
from .tensor import Tensor, as_tensor, check_finite, make_node

__all__ = ["ops", "grad_check", "GradCheckReport", "Conv2d", "FrozenAffine", "Linear",
           "Module", "SGD", "Tensor", "as_tensor", "check_finite", "make_node"]
