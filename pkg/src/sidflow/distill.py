"""Score-identity distillation for rectified-flow teachers.

Three networks share one architecture: the frozen teacher ``f_phi``, the
fake-score network ``f_psi`` fitted to generator samples, and the generator
``G_theta``.  Each iteration updates ``psi`` on fresh generator samples and
then ``theta`` on an independent fresh draw, both generated with
uniform-step matching (only the last of ``k`` generator calls is
differentiated).
"""

from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import flowmath as fm
from .denoisers import AnalyticTeacher, NetDenoiser
from .errors import ConfigError, DomainError, InvariantError, NumericError, UsageError
from .tensorcore import autodiff as ad
from .tensorcore.autodiff import Tensor
from .tensorcore.checkpoint import load_checkpoint, save_checkpoint
from .tensorcore.nets import NetParams
from .tensorcore.optim import AdamState, adam_step

log = logging.getLogger(__name__)

L1_FLOOR = 1e-12


@dataclass
class DistillConfig:
    K: int = 16
    alpha: float = 1.0
    t_init: float = 0.37
    schedule: fm.TimeSchedule = field(default_factory=fm.TimeSchedule)
    s_lo: float = 30.0
    s_hi: float = 400.0
    lr_psi: float = 5e-5
    lr_theta: float = 5e-5
    beta1_psi: float = 0.0
    beta1_theta: float = 0.0
    beta2: float = 0.999
    batch_size: int = 64
    iterations: int = 1000
    psi_per_theta: int = 1
    omega_at: str = "x_t"
    conditional: bool = False
    seed: int = 0
    eval_every: int = 0
    plateau_patience: int = 5
    plateau_delta: float = 0.01
    checkpoint_every: int = 0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError(f"K must be a positive integer, got {self.K}")
        if not 0.0 <= self.alpha <= 2.0:
            raise ConfigError(f"alpha must lie in [0, 2], got {self.alpha}")
        if not (self.lr_psi > 0 and self.lr_theta > 0):
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.t_init < 1.0:
            raise ConfigError("t_init must lie in (0, 1)")
        if self.omega_at not in ("x_t", "x_g"):
            raise ConfigError("omega_at must be 'x_t' or 'x_g'")
        if self.batch_size < 1 or self.iterations < 0 or self.psi_per_theta < 1:
            raise ConfigError("batch_size, iterations and psi_per_theta must be positive")

    def grid(self) -> fm.StepGrid:
        return fm.make_step_grid(self.K, self.schedule, self.s_lo, self.s_hi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = asdict(self.schedule)
        return d


# -- losses ----------------------------------------------------------------
def _t_shape(t, like):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape((-1,) + (1,) * (like.ndim - 1)) if t.ndim == 1 else t


def fake_score_loss(f_psi_out, x_g_stopped, t, mask):
    """Batch mean of ``||f_psi - sg(x_g)||^2 / (N (1 - t)^2)``."""
    if not (isinstance(x_g_stopped, Tensor) and x_g_stopped.stopped):
        raise UsageError("fake_score_loss needs x_g wrapped in stop_gradient()")
    fm._check_gap(t)
    m = np.asarray(mask, dtype=np.float64)
    n = m.sum(axis=1)
    if np.any(n == 0):
        raise DomainError("empty structure in batch")
    diff = (f_psi_out - x_g_stopped) * m[..., None]
    per = (diff * diff).sum(axis=2).sum(axis=1) / (n * (1.0 - np.asarray(t)) ** 2)
    return per.mean()


def fake_score_loss_velocity(v_psi, x_g, eps, mask):
    """The same objective written in velocity space: ``(1/N)||v - (x_g - eps)||^2``."""
    per = fm.fm_residual_norm(v_psi, x_g - eps, mask)
    return per.mean()


def omega_weight(x_g, f_phi_out, t, N):
    """Per-structure ``(1-t)^4 / (N t^2 ||x_g - f_phi||_1)``; the norm is stop-gradiented."""
    xg = x_g.data if isinstance(x_g, Tensor) else np.asarray(x_g)
    fp = f_phi_out.data if isinstance(f_phi_out, Tensor) else np.asarray(f_phi_out)
    t = np.asarray(t, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    axes = tuple(range(1, xg.ndim)) if xg.ndim > 1 else None
    l1 = np.abs(xg - fp).sum(axis=axes)
    if np.any(l1 <= L1_FLOOR):
        warnings.warn("||x_g - f_phi||_1 is (near) zero; flooring at 1e-12", RuntimeWarning)
        l1 = np.maximum(l1, L1_FLOOR)
    return (1.0 - t) ** 4 / (N * t ** 2 * l1)


def generator_loss(f_phi_out, f_psi_out, x_g, t, alpha, omega):
    """Batch mean of ``w t^2/(1-t)^4 [(1-a)||f_phi - f_psi||^2 + (f_phi - f_psi).(f_psi - x_g)]``."""
    if f_phi_out.shape != f_psi_out.shape or f_phi_out.shape != x_g.shape:
        raise UsageError(f"shape mismatch {f_phi_out.shape}, {f_psi_out.shape}, {x_g.shape}")
    t = np.asarray(t, dtype=np.float64)
    pref = np.asarray(omega) * t ** 2 / (1.0 - t) ** 4
    delta = f_phi_out - f_psi_out
    sq = (delta * delta).sum(axis=2).sum(axis=1)
    cross = (delta * (f_psi_out - x_g)).sum(axis=2).sum(axis=1)
    per = ((1.0 - alpha) * sq + cross) * pref
    return per.mean() if isinstance(per, Tensor) else float(np.mean(per))


# -- generation ------------------------------------------------------------
def sample_step_index(rng: np.random.Generator, K: int) -> int:
    return int(rng.integers(1, K + 1))


def _noise(rng, shape, mask):
    return rng.standard_normal(shape) * mask[..., None]


def unroll(G, times, n_calls: int, rng, mask, labels=None, gamma: float = 1.0,
           x0: np.ndarray | None = None, track_last: bool = False):
    """Run ``x <- G(t_j x + gamma (1 - t_j) eps_j, t_j)`` for ``j = 1..n_calls``.

    Only the final call is recorded for differentiation when ``track_last``;
    earlier outputs are plain arrays, i.e. stop-gradiented.
    """
    x = np.zeros(mask.shape + (G.arch.dim,)) if x0 is None else x0
    B = mask.shape[0]
    for j in range(n_calls):
        tj = float(times[j])
        eps = _noise(rng, x.shape, mask)
        y = tj * x + (gamma * (1.0 - tj)) * eps
        tvec = np.full(B, tj)
        if track_last and j == n_calls - 1:
            return G.x_pred_t(Tensor(y), tvec, mask, labels)
        with ad.no_grad():
            x = G.x_pred_t(Tensor(y), tvec, mask, labels).data
    return Tensor(x)


def one_step(G, t_init: float, rng, mask, labels=None, scale: float | None = None,
             track: bool = False):
    """``x_g = G(t_init z)``; the generator is conditioned on time ``t_init``."""
    dim = G.arch.dim
    z = _noise(rng, mask.shape + (dim,), mask)
    y = (t_init if scale is None else scale) * z
    tvec = np.full(mask.shape[0], t_init)
    if track:
        return G.x_pred_t(Tensor(y), tvec, mask, labels)
    with ad.no_grad():
        return G.x_pred_t(Tensor(y), tvec, mask, labels)


def multi_step_generate(G, grid: fm.StepGrid, k: int, rng, mask, labels=None,
                        t_init: float = 0.37, track: bool = True) -> Tensor:
    """Training-time generation of ``x_g^(k)`` with zero initial state.

    ``K = 1`` grids use the one-step path ``G(t_init z)``.
    """
    if grid.K == 1:
        if k != 1:
            raise DomainError("k must be 1 for a one-step grid")
        return one_step(G, t_init, rng, mask, labels, track=track)
    if not 1 <= k <= grid.K:
        raise DomainError(f"k={k} outside 1..{grid.K}")
    return unroll(G, grid.t_values, k, rng, mask, labels, gamma=1.0, track_last=track)


# -- trace -----------------------------------------------------------------
TRACE_COLUMNS = ["iteration", "loss_psi", "loss_theta", "omega", "k_psi", "k_theta", "t_psi",
                 "t_theta", "grad_norm_psi", "grad_norm_theta", "proxy"]


@dataclass
class DistillTrace:
    rows: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, row: dict) -> None:
        for key in ("loss_psi", "loss_theta", "omega", "grad_norm_psi", "grad_norm_theta"):
            if not np.isfinite(row[key]):
                raise NumericError(f"non-finite {key} at iteration {row['iteration']}")
        self.rows.append(row)
        if self.path is not None:
            new = not self.path.exists()
            with open(self.path, "a", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
                if new:
                    w.writeheader()
                w.writerow({k: _fmt(row.get(k)) for k in TRACE_COLUMNS})

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r.get(key) is not None], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class DistillResult:
    theta: NetParams
    psi: NetParams
    trace: DistillTrace
    stopped_early: bool = False
    best_proxy: float | None = None
    iterations: int = 0             # total completed, resumed iterations included


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def _template(target, B, rng, conditional):
    tpl = target.noise_batch(B, rng)
    labels = None
    if conditional:
        if not target.num_labels:
            raise ConfigError("conditional distillation needs a labelled target")
        labels = rng.integers(0, target.num_labels, size=B)
    return tpl.mask, tpl.lengths, labels


def _generate(G, cfg: DistillConfig, grid, rng, mask, labels, track):
    k = 1 if cfg.K == 1 else sample_step_index(rng, cfg.K)
    x_g = multi_step_generate(G, grid, k, rng, mask, labels, t_init=cfg.t_init, track=track)
    return k, x_g


def _psi_step(cfg, grid, theta, psi, psi_state, rng, mask, lengths, labels):
    G = NetDenoiser(theta)
    k, x_g = _generate(G, cfg, grid, rng, mask, labels, track=False)
    t = fm.sample_train_time(rng, cfg.schedule, size=mask.shape[0])
    eps = _noise(rng, x_g.shape, mask)
    x_g_sg = ad.stop_gradient(x_g)
    x_t = fm.interpolate(x_g_sg.data, eps, t)
    fpsi = NetDenoiser(psi, requires_grad=True)
    loss = fake_score_loss(fpsi.x_pred_t(Tensor(x_t), t, mask, labels), x_g_sg, t, mask)
    names = psi.trainable
    grads = ad.grad(loss, [fpsi.tensors[n] for n in names])
    psi_state, psi = adam_step(psi_state, psi, dict(zip(names, grads)))
    return psi, psi_state, {"loss_psi": loss.item(), "k_psi": k, "t_psi": float(t.mean()),
                            "grad_norm_psi": _grad_norm(grads)}


def _theta_step(cfg, grid, teacher, theta, psi, theta_state, rng, mask, lengths, labels):
    G = NetDenoiser(theta, requires_grad=True)
    k, x_g = _generate(G, cfg, grid, rng, mask, labels, track=True)
    t = fm.sample_train_time(rng, cfg.schedule, size=mask.shape[0])
    eps = _noise(rng, x_g.shape, mask)
    tt = _t_shape(t, x_g)
    x_t = x_g * tt + (1.0 - tt) * eps
    f_phi = teacher.x_pred_t(x_t, t, mask, labels)
    f_psi = NetDenoiser(psi).x_pred_t(x_t, t, mask, labels)
    if cfg.omega_at == "x_t":
        f_w = f_phi
    else:
        with ad.no_grad():
            f_w = teacher.x_pred_t(Tensor(x_g.data), t, mask, labels)
    omega = omega_weight(x_g, f_w, t, lengths)
    loss = generator_loss(f_phi, f_psi, x_g, t, cfg.alpha, omega)
    names = theta.trainable
    grads = ad.grad(loss, [G.tensors[n] for n in names])
    theta_state, theta = adam_step(theta_state, theta, dict(zip(names, grads)))
    return theta, theta_state, {"loss_theta": loss.item(), "k_theta": k, "t_theta": float(t.mean()),
                                "omega": float(np.mean(omega)), "grad_norm_theta": _grad_norm(grads)}


def _check_same_arch(*nets):
    archs = {n.arch for n in nets}
    if len(archs) != 1:
        raise ConfigError("teacher, fake-score and generator architectures must match")


def distill_run(cfg: DistillConfig, teacher, target, *, init: NetParams | None = None,
                probe: Callable[[NetParams], float] | None = None, out_dir=None,
                resume=None, test_mode: bool = False) -> DistillResult:
    """Alternating fake-score / generator optimisation.

    ``teacher`` is a :class:`NetParams` (then ``theta`` and ``psi`` start as
    copies of it) or an :class:`AnalyticTeacher`, which needs ``init`` for
    the two trainable networks.  ``probe(theta)`` returns a lower-is-better
    quality value; when ``cfg.eval_every`` is set, the run stops once the
    best probe value fails to improve by ``plateau_delta`` (relative) over
    ``plateau_patience`` consecutive evaluations.
    """
    if isinstance(teacher, NetParams):
        init = teacher if init is None else init
        teacher_d = NetDenoiser(teacher)
        _check_same_arch(teacher, init)
    elif isinstance(teacher, AnalyticTeacher):
        if init is None:
            raise ConfigError("an analytic teacher needs explicit init parameters")
        teacher_d = teacher
    else:
        teacher_d = teacher
        if init is None:
            raise ConfigError("unknown teacher type needs explicit init parameters")
    if not init.all_finite():
        raise NumericError("non-finite initial parameters")

    grid = cfg.grid()
    rng = np.random.default_rng(cfg.seed)
    theta, psi = init.copy(), init.copy()
    theta_state = AdamState(lr=cfg.lr_theta, beta1=cfg.beta1_theta, beta2=cfg.beta2)
    psi_state = AdamState(lr=cfg.lr_psi, beta1=cfg.beta1_psi, beta2=cfg.beta2)
    start = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    trace = DistillTrace(path=(out_dir / "trace.csv") if out_dir is not None else None)
    best, stale = None, 0

    if resume is not None:
        nets, header, extra = load_checkpoint(resume)
        if header["config"] != cfg.to_dict():
            raise ConfigError(f"{resume}: checkpoint config differs from run config")
        theta, psi = nets["theta"], nets["psi"]
        theta_state = _state_from(extra, "theta", cfg.lr_theta, cfg.beta1_theta, cfg.beta2,
                                  header["extra"]["theta_steps"])
        psi_state = _state_from(extra, "psi", cfg.lr_psi, cfg.beta1_psi, cfg.beta2,
                                header["extra"]["psi_steps"])
        rng.bit_generator.state = header["extra"]["rng"]
        start = header["step"]
        best, stale = header["extra"].get("best"), header["extra"].get("stale", 0)
        if trace.path is not None and trace.path.exists():
            _truncate_trace(trace.path, start)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume is None and trace.path.exists():
            trace.path.unlink()

    stopped_early = False
    done = start
    for it in range(start, cfg.iterations):
        mask, lengths, labels = _template(target, cfg.batch_size, rng, cfg.conditional)
        row: dict = {"iteration": it + 1, "proxy": None}
        theta_hash = theta.digest() if test_mode else None
        try:
            for _ in range(cfg.psi_per_theta):
                psi, psi_state, info = _psi_step(cfg, grid, theta, psi, psi_state, rng, mask,
                                                 lengths, labels)
            row.update(info)
            if test_mode and theta.digest() != theta_hash:
                raise InvariantError("psi update modified theta")
            psi_hash = psi.digest() if test_mode else None
            theta, theta_state, info = _theta_step(cfg, grid, teacher_d, theta, psi, theta_state,
                                                   rng, mask, lengths, labels)
            row.update(info)
            if test_mode and psi.digest() != psi_hash:
                raise InvariantError("theta update modified psi")
            if not (theta.all_finite() and psi.all_finite()):
                raise NumericError(f"non-finite parameters after iteration {it + 1}")
        except NumericError:
            if out_dir is not None:
                save_checkpoint(out_dir / "diverged.ckpt", {"theta": theta, "psi": psi},
                                seed=cfg.seed, step=it, config=cfg.to_dict())
            raise
        if probe is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            val = float(probe(theta))
            row["proxy"] = val
            if best is None or val < best * (1.0 - cfg.plateau_delta):
                best, stale = val, 0
            else:
                stale += 1
        trace.append(row)
        done = it + 1
        if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            _save_run(out_dir / f"ckpt_{it + 1:06d}.ckpt", cfg, theta, psi, theta_state,
                      psi_state, rng, it + 1, best, stale)
        if stale >= cfg.plateau_patience:
            stopped_early = True
            log.info("proxy plateaued at iteration %d (best %.4g)", it + 1, best)
            break
    if out_dir is not None:
        _save_run(out_dir / "final.ckpt", cfg, theta, psi, theta_state, psi_state, rng, done,
                  best, stale)
    return DistillResult(theta, psi, trace, stopped_early, best, done)


def _save_run(path, cfg, theta, psi, theta_state, psi_state, rng, step, best, stale):
    extra_arrays = {}
    for tag, st in (("theta", theta_state), ("psi", psi_state)):
        for k, v in st.first_moment.items():
            extra_arrays[f"{tag}/m/{k}"] = v
        for k, v in st.second_moment.items():
            extra_arrays[f"{tag}/v/{k}"] = v
    save_checkpoint(path, {"theta": theta, "psi": psi}, seed=cfg.seed, step=step,
                    config=cfg.to_dict(), extra_arrays=extra_arrays,
                    extra={"rng": rng.bit_generator.state, "theta_steps": theta_state.step_count,
                           "psi_steps": psi_state.step_count, "best": best, "stale": stale})


def _state_from(extra, tag, lr, beta1, beta2, steps) -> AdamState:
    st = AdamState(lr=lr, beta1=beta1, beta2=beta2, step_count=steps)
    for k, v in extra.items():
        if k.startswith(f"{tag}/m/"):
            st.first_moment[k[len(tag) + 3:]] = v
        elif k.startswith(f"{tag}/v/"):
            st.second_moment[k[len(tag) + 3:]] = v
    return st


def _truncate_trace(path: Path, n_rows: int) -> None:
    lines = path.read_bytes().splitlines(keepends=True)
    path.write_bytes(b"".join(lines[: n_rows + 1]))


def params_hash(p: NetParams) -> str:
    return hashlib.sha256(p.digest().encode()).hexdigest()[:16]
