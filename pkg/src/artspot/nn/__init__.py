"""Small numpy autodiff kit: ops with explicit backward, losses, SGD, checkpoints."""

from .gradcheck import grad_check
from .tensor import ParamStore, Tensor, load_checkpoint, save_checkpoint

__all__ = ["ParamStore", "Tensor", "grad_check", "load_checkpoint", "save_checkpoint"]
