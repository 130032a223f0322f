"""Stage runners shared by the command line and the acceptance harness.

Each runner takes a :class:`RunConfig`, does one pipeline stage and returns
in-memory results; writing artifacts is optional so tests can chain stages
without touching disk.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .denoisers import AnalyticTeacher
from .distill import DistillResult, distill_run
from .errors import ConfigError
from .evalmetrics import EvalReport, evaluate_chains, evaluate_points, sliced_wasserstein
from .sampler import SampleResult, generate
from .teacher import TeacherConfig, teacher_validate, train_teacher
from .tensorcore.checkpoint import load_checkpoint
from .tensorcore.nets import NetParams
from .toydata import MixtureTarget, StructureBatch

log = logging.getLogger(__name__)


def teacher_config(cfg: RunConfig, target=None) -> TeacherConfig:
    target = cfg.build_target() if target is None else target
    t = cfg.teacher
    return TeacherConfig(arch=cfg.arch(target), target=target, lr=t.lr, lr_final=t.lr_final,
                         beta1=t.beta1, beta2=t.beta2, batch_size=t.batch_size, steps=t.steps,
                         schedule=cfg.time_schedule(), seed=cfg.seed, conditional=t.conditional)


def run_teacher(cfg: RunConfig, out_dir=None):
    """Train the flow-matching teacher; returns ``(params, loss_history, validation)``."""
    target = cfg.build_target()
    params, hist = train_teacher(teacher_config(cfg, target), out_dir=out_dir)
    report = None
    if isinstance(target, MixtureTarget):
        report = teacher_validate(params, target.spec)
    return params, hist, report


def load_net(path, role: str | None = None) -> NetParams:
    nets, _, _ = load_checkpoint(path)
    if role is not None and role in nets:
        return nets[role]
    for key in ("theta", "phi"):
        if key in nets:
            return nets[key]
    raise ConfigError(f"{path}: no usable network (found {sorted(nets)})")


def resolve_teacher(cfg: RunConfig, target):
    """Return ``(teacher, init)`` for distillation."""
    init = None
    if cfg.distill.init_checkpoint:
        init = load_net(cfg.distill.init_checkpoint)
    if cfg.teacher.analytic:
        if not isinstance(target, MixtureTarget):
            raise ConfigError("an analytic teacher needs a mixture target")
        if init is None and cfg.teacher_checkpoint:
            init = load_net(cfg.teacher_checkpoint, "phi")
        if init is None:
            raise ConfigError("analytic teacher: set distill.init_checkpoint or "
                              "teacher_checkpoint for the trainable networks")
        return AnalyticTeacher(target.spec), init
    if not cfg.teacher_checkpoint:
        raise ConfigError("teacher_checkpoint is required for distillation")
    return load_net(cfg.teacher_checkpoint, "phi"), init


def chain_probe(cfg: RunConfig, target, n: int | None = None):
    """Lower-is-better probe: ``1 - designability`` of fixed-seed student samples."""
    n = cfg.distill.probe_samples if n is None else n
    length = int(target.length_range[1])
    scfg = cfg.sample_config(K=cfg.distill.K, n_samples=n, batch_size=n, lengths=[length],
                             seed=cfg.seed + 7919, mode="student")

    def probe(theta: NetParams) -> float:
        res = generate(theta, scfg, target)
        rep = evaluate_chains("probe", [target.to_physical(s) for s in res.batch.structures()])
        return 1.0 - rep.designability

    return probe


def point_probe(cfg: RunConfig, target, n: int | None = None):
    """Lower-is-better probe: sliced Wasserstein of fixed-seed samples to fixed data."""
    n = cfg.distill.probe_samples if n is None else n
    ref = target.sample(n, np.random.default_rng(cfg.eval.reference_seed)).coords[:, 0]
    scfg = cfg.sample_config(K=cfg.distill.K, n_samples=n, batch_size=n, seed=cfg.seed + 7919,
                             mode="student", gamma=1.0, init="zero")

    def probe(theta: NetParams) -> float:
        x = generate(theta, scfg, target).batch.coords[:, 0]
        return sliced_wasserstein(x, ref, 16, np.random.default_rng(0))

    return probe


def run_distill(cfg: RunConfig, out_dir=None, resume=None, test_mode: bool = False,
                teacher=None, init=None) -> DistillResult:
    target = cfg.build_target()
    if teacher is None:
        teacher, init_ck = resolve_teacher(cfg, target)
        init = init if init is not None else init_ck
    probe = None
    if cfg.distill.eval_every:
        probe = point_probe(cfg, target) if isinstance(target, MixtureTarget) \
            else chain_probe(cfg, target)
    return distill_run(cfg.distill_config(), teacher, target, init=init, probe=probe,
                       out_dir=out_dir, resume=resume, test_mode=test_mode)


def run_sample(cfg: RunConfig, model, **overrides) -> SampleResult:
    return generate(model, cfg.sample_config(**overrides), cfg.build_target())


@dataclass
class Evaluation:
    report: EvalReport
    physical: list


def evaluate_batch(cfg: RunConfig, batch: StructureBatch, run_id: str, total_seconds=None,
                   target=None, **keys) -> EvalReport:
    """Metrics appropriate to the target kind (point fit or chain proxy)."""
    target = cfg.build_target() if target is None else target
    if isinstance(target, MixtureTarget):
        ref = target.sample(cfg.eval.n_reference,
                            np.random.default_rng(cfg.eval.reference_seed)).coords[:, 0]
        rep = evaluate_points(run_id, batch.coords[:, 0], ref, **keys)
        rep.total_seconds = total_seconds
        return rep
    structs = [target.to_physical(s) for s in batch.structures()]
    return evaluate_chains(run_id, structs, total_seconds, **keys)


def affine_fit(x, y):
    """Least-squares ``y ~ a + b x``; returns ``(a, b, |y - fit| / |y|)``.

    The residual is normalised by the data rather than pointwise by the fit,
    which would blow up wherever the fitted line passes near zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.stack([np.ones_like(x), x], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = a + b * x
    return float(a), float(b), float(np.linalg.norm(y - pred) / np.linalg.norm(y))


def finite_or_none(v):
    return None if v is None or not math.isfinite(v) else v


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
