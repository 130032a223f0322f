"""Adam with bias correction, operating on named numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError
from .nets import NetParams


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.0
    beta2: float = 0.999
    eps_stab: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps_stab, self.step_count,
                         {k: v.copy() for k, v in self.first_moment.items()},
                         {k: v.copy() for k, v in self.second_moment.items()})


def adam_step(state: AdamState, params: NetParams,
              grads: dict[str, np.ndarray]) -> tuple[AdamState, NetParams]:
    """One Adam update; returns new state and new parameters (inputs untouched).

    Raises ``NumericError`` naming the offending arrays when any gradient is
    non-finite; nothing is updated in that case.
    """
    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NumericError(f"non-finite gradient in {bad}; step {state.step_count + 1} aborted")
    for k, g in grads.items():
        if g.shape != params.arrays[k].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter {k} {params.arrays[k].shape}")

    new = state.copy()
    new.step_count += 1
    bc1 = 1.0 - new.beta1 ** new.step_count
    bc2 = 1.0 - new.beta2 ** new.step_count
    out = params.copy()
    for k, g in grads.items():
        m = new.first_moment.get(k)
        v = new.second_moment.get(k)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = new.beta1 * m + (1.0 - new.beta1) * g
        v = new.beta2 * v + (1.0 - new.beta2) * (g * g)
        new.first_moment[k] = m
        new.second_moment[k] = v
        out.arrays[k] = out.arrays[k] - new.lr * (m / bc1) / (np.sqrt(v / bc2) + new.eps_stab)
    return new, out
