"""Uniform x-prediction interface over trained networks and analytic oracles.

Distillation and sampling only need ``f(x_t, t) ~ E[x_d | x_t]``.  Both
wrappers expose it differentiably in ``x_t`` (``x_pred_t``) and as plain numpy
(``x_pred`` / ``velocity``).
"""

from __future__ import annotations

import numpy as np

from . import flowmath as fm
from .tensorcore import autodiff as ad
from .tensorcore.autodiff import Tensor
from .tensorcore.nets import NetParams, apply, check_inputs
from .toydata import MixtureSpec


def _t_col(t, B: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.full(B, float(t)) if t.ndim == 0 else t


class NetDenoiser:
    """x-prediction ``x_t + (1 - t) v(x_t, t)`` of a velocity network."""

    analytic = False

    def __init__(self, params: NetParams, requires_grad: bool = False):
        self.params = params
        self.tensors = params.tensors(requires_grad=requires_grad)

    @property
    def arch(self):
        return self.params.arch

    def velocity_t(self, x: Tensor, t, mask, labels=None) -> Tensor:
        t = _t_col(t, x.shape[0])
        return apply(self.params.arch, self.tensors, x, t, mask, labels)

    def x_pred_t(self, x: Tensor, t, mask, labels=None) -> Tensor:
        t = _t_col(t, x.shape[0])
        return fm.x_pred_from_velocity(x, self.velocity_t(x, t, mask, labels), t)

    def velocity(self, x, t, mask=None, labels=None) -> np.ndarray:
        t, mask, labels = check_inputs(self.params.arch, x, t, mask, labels)
        with ad.no_grad():
            return self.velocity_t(Tensor(x), t, mask, labels).data

    def x_pred(self, x, t, mask=None, labels=None) -> np.ndarray:
        t, mask, labels = check_inputs(self.params.arch, x, t, mask, labels)
        with ad.no_grad():
            return self.x_pred_t(Tensor(x), t, mask, labels).data


class AnalyticTeacher:
    """Exact posterior mean of a Gaussian-mixture target, as a denoiser.

    Built from autodiff ops so generator gradients can flow through it.
    With labels the posterior is restricted to the labelled component.
    """

    analytic = True

    def __init__(self, spec: MixtureSpec):
        self.spec = spec

    def x_pred_t(self, x: Tensor, t, mask, labels=None) -> Tensor:
        spec = self.spec
        B, N, D = x.shape
        t = _t_col(t, B)
        tt = t[:, None, None]                                            # (B,1,1)
        var = tt ** 2 * spec.variances + (1.0 - tt) ** 2                 # (B,1,M)
        centred = ad.reshape(x, (B, N, 1, D)) - tt[..., None] * spec.means   # (B,N,M,D)
        sq = (centred * centred).sum(axis=-1)                           # (B,N,M)
        logp = (np.log(np.maximum(spec.weights, 1e-300)) - 0.5 * D * np.log(2 * np.pi * var)) \
            - sq / (2.0 * var)
        if labels is not None:
            sel = np.arange(spec.n_components)[None, None, :] == np.asarray(labels)[:, None, None]
            logp = logp + np.where(sel, 0.0, -1e300)
        resp = ad.softmax(logp, axis=-1)                                 # (B,N,M)
        gain = (tt * spec.variances / var)[..., None]                    # (B,1,M,1)
        post = spec.means + centred * gain                               # (B,N,M,D)
        f = (ad.reshape(resp, (B, N, spec.n_components, 1)) * post).sum(axis=2)
        return f * np.asarray(mask, dtype=np.float64)[..., None]

    def velocity_t(self, x: Tensor, t, mask, labels=None) -> Tensor:
        t = _t_col(t, x.shape[0])
        return fm.velocity_from_x_pred(x, self.x_pred_t(x, t, mask, labels), t)

    def x_pred(self, x, t, mask=None, labels=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mask = np.ones(x.shape[:2], dtype=bool) if mask is None else mask
        with ad.no_grad():
            return self.x_pred_t(Tensor(x), t, mask, labels).data

    def velocity(self, x, t, mask=None, labels=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mask = np.ones(x.shape[:2], dtype=bool) if mask is None else mask
        with ad.no_grad():
            return self.velocity_t(Tensor(x), t, mask, labels).data
