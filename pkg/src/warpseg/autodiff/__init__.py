from .tensor import ActivationMeter, Tensor, as_tensor, is_grad_enabled, no_grad
from . import ops

__all__ = ["ActivationMeter", "Tensor", "as_tensor", "is_grad_enabled", "no_grad", "ops"]
