"""Flow-matching teacher training and validation against analytic oracles."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import flowmath as fm
from .denoisers import AnalyticTeacher, NetDenoiser
from .errors import DomainError, NumericError
from .tensorcore import autodiff as ad
from .tensorcore.autodiff import Tensor
from .tensorcore.checkpoint import save_checkpoint
from .tensorcore.nets import ArchSpec, NetParams, apply, init_params
from .tensorcore.optim import AdamState, adam_step
from .toydata import MixtureSpec, MixtureTarget

log = logging.getLogger(__name__)


@dataclass
class TeacherConfig:
    arch: ArchSpec
    target: object
    lr: float = 1e-3
    lr_final: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 256
    steps: int = 2000
    schedule: fm.TimeSchedule = field(default_factory=fm.TimeSchedule)
    seed: int = 0
    conditional: bool = False

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(), "target": self.target.to_dict(), "lr": self.lr,
                "lr_final": self.lr_final, "beta1": self.beta1, "beta2": self.beta2,
                "batch_size": self.batch_size, "steps": self.steps,
                "schedule": asdict(self.schedule), "seed": self.seed, "conditional": self.conditional}


def fm_loss(v_pred, x_d, eps, mask):
    """Batch mean of ``(1/N) ||v - (x_d - eps)||^2`` over each structure's N points."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2 or np.any(m.sum(axis=1) == 0):
        raise DomainError("every structure needs at least one unmasked point")
    per = fm.fm_residual_norm(v_pred, x_d - eps, m)
    return per.mean() if isinstance(per, Tensor) else float(per.mean())


def _lr_at(cfg: TeacherConfig, step: int) -> float:
    if cfg.lr_final is None or cfg.steps <= 1:
        return cfg.lr
    frac = step / (cfg.steps - 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


def training_batch(target, B: int, rng: np.random.Generator, sched: fm.TimeSchedule):
    batch = target.sample(B, rng)
    eps = rng.standard_normal(batch.coords.shape) * batch.mask[..., None]
    t = fm.sample_train_time(rng, sched, size=B)
    return batch, eps, t, fm.interpolate(batch.coords, eps, t)


def train_teacher(cfg: TeacherConfig, *, out_dir=None, callback: Callable | None = None,
                  callback_every: int = 0, init: NetParams | None = None):
    """Fit ``v(x_t, t)`` to ``x_d - eps`` with times from the clamped log schedule.

    Returns ``(params, history)`` where ``history`` holds the per-step loss.
    ``callback(step, params)`` runs every ``callback_every`` steps and after
    the final step.  A non-finite loss writes a diagnostic checkpoint to
    ``out_dir`` (if given) and raises ``NumericError``.
    """
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(cfg.arch, cfg.seed)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    history: list[float] = []
    names = params.trainable
    for step in range(cfg.steps):
        batch, eps, t, x_t = training_batch(cfg.target, cfg.batch_size, rng, cfg.schedule)
        labels = batch.labels if cfg.conditional else None
        tens = params.tensors(requires_grad=True)
        v = apply(cfg.arch, tens, Tensor(x_t), t, batch.mask, labels)
        loss = fm_loss(v, batch.coords, eps, batch.mask)
        if not np.isfinite(loss.data):
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "diverged.ckpt", {"phi": params}, seed=cfg.seed,
                                step=step, config=cfg.to_dict())
            raise NumericError(f"teacher loss became non-finite at step {step}")
        grads = ad.grad(loss, [tens[k] for k in names])
        state.lr = _lr_at(cfg, step)
        state, params = adam_step(state, params, dict(zip(names, grads)))
        history.append(loss.item())
        if callback is not None and callback_every and (step + 1) % callback_every == 0:
            callback(step + 1, params)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "teacher.ckpt", {"phi": params}, seed=cfg.seed,
                        step=cfg.steps, config=cfg.to_dict())
    return params, history


def initial_loss(cfg: TeacherConfig) -> float:
    """Loss of the freshly initialised network on the first training batch."""
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.arch, cfg.seed)
    batch, eps, t, x_t = training_batch(cfg.target, cfg.batch_size, rng, cfg.schedule)
    labels = batch.labels if cfg.conditional else None
    with ad.no_grad():
        v = apply(cfg.arch, params.tensors(), Tensor(x_t), t, batch.mask, labels)
    return fm_loss(v.data, batch.coords, eps, batch.mask)


@dataclass
class ValidationReport:
    t_grid: np.ndarray
    velocity_mse: np.ndarray
    score_mse: np.ndarray
    score_mse_via_x_pred: np.ndarray

    @property
    def mean_velocity_mse(self) -> float:
        return float(self.velocity_mse.mean())

    def rows(self):
        for t, v, s, s2 in zip(self.t_grid, self.velocity_mse, self.score_mse,
                               self.score_mse_via_x_pred):
            yield {"t": float(t), "velocity_mse": float(v), "score_mse": float(s),
                   "score_mse_via_x_pred": float(s2)}


def teacher_validate(phi, oracle: MixtureSpec, grid=None, n_points: int = 2048,
                     seed: int = 12345) -> ValidationReport:
    """Velocity and score errors of ``phi`` against the mixture oracle.

    Probe points are drawn from the time-t marginal, so the errors are
    density-weighted.  MSE is the mean over coordinates.  The score error is
    reported twice: from the velocity directly, and through the x-prediction.
    """
    if isinstance(phi, NetParams):
        phi = NetDenoiser(phi)
    grid = np.round(np.arange(1, 10) / 10.0, 10) if grid is None else np.asarray(grid)
    rng = np.random.default_rng(seed)
    target = MixtureTarget(oracle)
    oracle_teacher = AnalyticTeacher(oracle)
    vm, sm, sm2 = [], [], []
    for t in grid:
        batch = target.sample(n_points, rng)
        eps = rng.standard_normal(batch.coords.shape)
        x_t = fm.interpolate(batch.coords, eps, t)
        v_true = oracle_teacher.velocity(x_t, t, batch.mask)
        v = phi.velocity(x_t, t, batch.mask)
        s_true = fm.score_from_velocity(x_t, v_true, t)
        s = fm.score_from_velocity(x_t, v, t)
        s_via = fm.score_from_x_pred(x_t, fm.x_pred_from_velocity(x_t, v, t), t)
        s_true_via = fm.score_from_x_pred(x_t, fm.x_pred_from_velocity(x_t, v_true, t), t)
        vm.append(np.mean((v - v_true) ** 2))
        sm.append(np.mean((s - s_true) ** 2))
        sm2.append(np.mean((s_via - s_true_via) ** 2))
    return ValidationReport(grid, np.array(vm), np.array(sm), np.array(sm2))
