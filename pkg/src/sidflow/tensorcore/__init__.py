"""Differentiable numeric substrate: autodiff, networks, Adam, gradient checks."""

from .autodiff import Tensor, grad, no_grad, sg, stop_gradient
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .gradcheck import GradReport, gradient_check
from .nets import ArchSpec, NetParams, apply, init_params, net_forward, zero_params
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "ArchSpec", "GradReport", "NetParams", "Tensor", "adam_step", "apply",
    "config_hash", "grad", "gradient_check", "init_params", "load_checkpoint", "net_forward",
    "no_grad", "save_checkpoint", "sg", "stop_gradient", "zero_params",
]
