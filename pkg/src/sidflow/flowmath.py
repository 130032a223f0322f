"""Rectified-flow relations, the log time schedule and generator step grids.

Conventions: ``t = 0`` is pure noise and ``t = 1`` is data, so
``x_t = t x_d + (1 - t) eps`` and the target velocity is ``x_d - eps``.
All functions accept numpy arrays or autodiff tensors; ``t`` may be a scalar
or a per-structure vector which is broadcast over the trailing axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, SingularityError

SINGULAR_GAP = 1e-9


@dataclass(frozen=True)
class TimeSchedule:
    p: float = 2.0
    n_steps: int = 400
    t_min: float = 0.02
    t_max: float = 0.98

    def __post_init__(self):
        if not self.p > 0 or self.n_steps < 1:
            raise ConfigError(f"invalid schedule p={self.p}, n_steps={self.n_steps}")
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise ConfigError(f"need 0 < t_min < t_max < 1, got {self.t_min}, {self.t_max}")

    def clamp(self, t):
        return np.clip(t, self.t_min, self.t_max)


@dataclass(frozen=True)
class StepGrid:
    s_values: np.ndarray
    t_values: np.ndarray

    @property
    def K(self) -> int:
        return len(self.t_values)


def _bcast(t, like):
    """Reshape a per-structure time vector so it broadcasts against ``like``."""
    t = np.asarray(t, dtype=np.float64)
    ndim = like.ndim if hasattr(like, "ndim") else np.ndim(like)
    if t.ndim == 1 and ndim > 1:
        return t.reshape((-1,) + (1,) * (ndim - 1))
    return t


def _check_gap(t):
    if np.any(1.0 - np.asarray(t) < SINGULAR_GAP):
        raise SingularityError(f"1 - t below {SINGULAR_GAP}: t={np.max(t)!r}")


def time_from_step(s, sched: TimeSchedule = TimeSchedule()):
    """Log schedule ``t = 1 - 10 ** (-(s / n_steps) * p)``."""
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0) or np.any(s_arr > sched.n_steps):
        raise DomainError(f"step outside [0, {sched.n_steps}]: {s!r}")
    out = 1.0 - 10.0 ** (-(s_arr / sched.n_steps) * sched.p)
    return float(out) if out.ndim == 0 else out


def step_from_time(t, sched: TimeSchedule = TimeSchedule()):
    """Inverse of :func:`time_from_step` on ``[0, 1 - 10**-p]``."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1.0 - 10.0 ** (-sched.p)):
        raise DomainError(f"time outside the schedule's range: {t!r}")
    out = -np.log10(1.0 - t_arr) * sched.n_steps / sched.p
    return float(out) if out.ndim == 0 else out


def sample_train_time(rng: np.random.Generator, sched: TimeSchedule = TimeSchedule(),
                      size=None):
    """Draw ``s ~ U[0, n_steps]``, map through the log schedule, clamp."""
    s = rng.uniform(0.0, sched.n_steps, size=size)
    return sched.clamp(time_from_step(s, sched))


def interpolate(x_d, eps, t):
    t = _bcast(t, x_d)
    return t * x_d + (1.0 - t) * eps


def x_pred_from_velocity(x_t, v, t):
    t = _bcast(t, x_t)
    return x_t + (1.0 - t) * v


def velocity_from_x_pred(x_t, f, t):
    _check_gap(t)
    t = _bcast(t, x_t)
    return (f - x_t) / (1.0 - t)


def score_from_x_pred(x_t, f, t):
    """Score of the time-t marginal, ``(t f - x_t) / (1 - t)**2``."""
    _check_gap(t)
    t = _bcast(t, x_t)
    return (t * f - x_t) / (1.0 - t) ** 2


def score_from_velocity(x_t, v, t):
    _check_gap(t)
    t = _bcast(t, x_t)
    return (t * v - x_t) / (1.0 - t)


def make_step_grid(K: int, sched: TimeSchedule = TimeSchedule(), s_lo: float = 30.0,
                   s_hi: float | None = None) -> StepGrid:
    """``K`` equally spaced schedule steps from ``s_lo`` up to ``s_hi``.

    The top endpoint is clamped in step space to the step whose time is
    ``t_max``, so every grid time lies in ``[t_min, t_max]``, equals
    ``time_from_step`` of its step, and the times stay strictly increasing.
    ``K = 1`` yields the single (clamped) top step.
    """
    if int(K) != K or K < 1:
        raise DomainError(f"K must be a positive integer, got {K!r}")
    s_hi = float(sched.n_steps if s_hi is None else s_hi)
    if not 0 <= s_lo < s_hi <= sched.n_steps:
        raise DomainError(f"need 0 <= s_lo < s_hi <= n_steps, got {s_lo}, {s_hi}")
    s_top = min(s_hi, step_from_time(sched.t_max, sched))
    if s_top <= s_lo:
        raise DomainError(f"s_lo={s_lo} is above the step of t_max")
    s = np.array([s_top]) if K == 1 else np.linspace(s_lo, s_top, int(K))
    t = sched.clamp(time_from_step(s, sched))
    return StepGrid(s, np.atleast_1d(t))


def fm_residual_norm(v, target, mask):
    """Per-structure ``(1/N) ||v - target||^2`` with ``N`` the mask count."""
    m = np.asarray(mask, dtype=np.float64)
    n = m.sum(axis=1)
    diff = (v - target) * m[..., None]
    return (diff * diff).sum(axis=2).sum(axis=1) / n
