"""Central finite-difference verification of network gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import ArchSpec, NetParams, apply, init_params


@dataclass(frozen=True)
class GradReport:
    max_rel_err: float
    worst: str
    analytic: float
    numeric: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:.0e}) "
                f"worst={self.worst} analytic={self.analytic:.6e} numeric={self.numeric:.6e} "
                f"checked={self.n_checked}")


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _probe(arch: ArchSpec, seed: int):
    rng = np.random.default_rng(seed + 1)
    B = 3
    N = 6 if (arch.window or arch.n_pos) else 2
    x = rng.normal(size=(B, N, arch.dim))
    mask = np.ones((B, N), dtype=bool)
    mask[1, N - 1:] = False
    x *= mask[..., None]
    t = rng.uniform(0.05, 0.95, size=B)
    labels = rng.integers(0, arch.num_labels, size=B) if arch.num_labels else None
    weight = rng.normal(size=(B, N, arch.dim))
    return x, mask, t, labels, weight


def _loss(arch, tensors, x, mask, t, labels, weight):
    v = apply(arch, tensors, x, t, mask, labels)
    return (v * weight).sum() + 0.5 * (v * v).sum()


def gradient_check(arch: ArchSpec, tolerance: float = 1e-4, *, seed: int = 0,
                   h: float = 1e-4, params: NetParams | None = None,
                   max_coords: int | None = None, check_input: bool = True,
                   perturb: float = 0.0) -> GradReport:
    """Compare reverse-mode gradients against central differences.

    Every parameter coordinate is checked unless ``max_coords`` caps the
    number per array (a seeded subset is then drawn).  The loss is
    ``sum(w * v) + 0.5 * sum(v**2)`` with a fixed random ``w``.  With
    ``check_input`` the gradient with respect to the input coordinates is
    verified too, since distillation differentiates through network inputs.
    ``perturb`` scales the analytic gradients by ``1 + perturb`` and exists
    only to show that a wrong gradient is caught.
    """
    params = params if params is not None else init_params(arch, seed)
    x, mask, t, labels, weight = _probe(arch, seed)
    rng = np.random.default_rng(seed + 2)

    tens = params.tensors(requires_grad=True)
    xt = Tensor(x, requires_grad=True)
    loss = _loss(arch, tens, xt, mask, t, labels, weight)
    names = params.trainable
    grads = ad.grad(loss, [tens[k] for k in names] + [xt])
    analytic = {k: g * (1.0 + perturb) for k, g in zip(names, grads[:-1])}
    analytic["<input>"] = grads[-1] * (1.0 + perturb)

    def f(arrays, xin):
        with ad.no_grad():
            tt = {k: Tensor(v) for k, v in arrays.items()}
            return _loss(arch, tt, Tensor(xin), mask, t, labels, weight).item()

    worst = (0.0, "", 0.0, 0.0)
    n_checked = 0
    targets = list(names) + (["<input>"] if check_input else [])
    for name in targets:
        base = x if name == "<input>" else params.arrays[name]
        flat_idx = np.arange(base.size)
        if name == "<input>":
            flat_idx = flat_idx[np.repeat(mask.ravel(), arch.dim)]
        if max_coords is not None and flat_idx.size > max_coords:
            flat_idx = np.sort(rng.choice(flat_idx, size=max_coords, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, base.shape)
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sign * h
                if name == "<input>":
                    vals.append(f(params.arrays, pert))
                else:
                    vals.append(f({**params.arrays, name: pert}, x))
            num = (vals[0] - vals[1]) / (2.0 * h)
            ana = float(analytic[name][idx])
            err = rel_err(ana, num)
            n_checked += 1
            if err > worst[0] or not worst[1]:
                worst = (err, f"{name}{list(map(int, idx))}", ana, num)
    return GradReport(worst[0], worst[1], worst[2], worst[3], n_checked, tolerance)
