"""YAML run configuration with strict keys, line-aware errors and a semantic hash.

A run file has optional top-level sections ``target``, ``schedule``,
``teacher``, ``distill``, ``sample``, ``eval`` and ``sweep`` plus a few
scalar keys.  Every section maps onto a dataclass; unknown keys are
rejected with the offending line number.  The hash covers everything that
can change a result (paths of input checkpoints included) and excludes the
output directory and cosmetic formatting.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import flowmath as fm
from .distill import DistillConfig
from .errors import ConfigError
from .sampler import SampleConfig
from .tensorcore.checkpoint import config_hash
from .tensorcore.nets import ArchSpec
from .toydata import (ChainMotifSpec, ChainTarget, MixtureSpec, MixtureTarget, ring_mixture,
                      standard_gaussian)

SWEEP_DEFAULTS = {
    "gamma": [round(0.1 * i, 1) for i in range(1, 11)],
    "alpha": [0.0, 0.5, 0.8, 1.0, 1.2, 1.5],
    "K": [1, 5, 8, 10, 12, 16, 20],
}

# chains need neighbour and pairwise features to produce valid bond geometry
CHAIN_ARCH_DEFAULTS = {"window": 2, "n_pos": 4, "n_attn": 2}


@dataclass
class TargetSection:
    kind: str = "chain"
    preset: str | None = None          # mixtures: "ring" or "gaussian"
    dim: int = 2
    n_components: int = 8
    radius: float = 2.0
    std: float = 0.2
    weights: list | None = None
    means: list | None = None
    variances: list | None = None
    length_range: list = field(default_factory=lambda: [8, 64])
    scale: float = 0.1
    motif: dict = field(default_factory=dict)


@dataclass
class TeacherSection:
    arch: dict = field(default_factory=dict)
    lr: float = 1e-3
    lr_final: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 256
    steps: int = 2000
    conditional: bool = False
    analytic: bool = False


@dataclass
class DistillSection:
    K: int = 16
    alpha: float = 1.0
    t_init: float = 0.37
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
    eval_every: int = 0
    plateau_patience: int = 5
    plateau_delta: float = 0.01
    checkpoint_every: int = 0
    probe_samples: int = 64
    init_checkpoint: str | None = None


@dataclass
class SampleSection:
    K: int = 16
    gamma: float = 0.45
    t_init: float = 0.37
    n_samples: int = 256
    batch_size: int = 256
    lengths: list | None = None
    labels: list | None = None
    mode: str = "student"
    init: str = "gaussian"
    n_teacher_steps: int = 400


@dataclass
class EvalSection:
    n_reference: int = 5000
    n_proj: int = 64
    reference_seed: int = 12345


@dataclass
class SweepSection:
    axis: str = "gamma"
    values: list | None = None
    repetitions: int = 1
    metrics: list = field(default_factory=lambda: ["designability", "diversity_rmsd",
                                                   "energy_distance", "effective_time"])


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    teacher_checkpoint: str | None = None
    student_checkpoint: str | None = None
    samples_dir: str | None = None
    target: TargetSection = field(default_factory=TargetSection)
    schedule: dict = field(default_factory=dict)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- derived objects ---------------------------------------------------
    def time_schedule(self) -> fm.TimeSchedule:
        return fm.TimeSchedule(**self.schedule)

    def build_target(self):
        tg = self.target
        if tg.kind == "mixture":
            if tg.preset == "ring":
                spec = ring_mixture(tg.n_components, tg.radius, tg.std)
            elif tg.preset == "gaussian":
                spec = standard_gaussian(tg.dim)
            elif tg.preset is None:
                if tg.weights is None or tg.means is None or tg.variances is None:
                    raise ConfigError("target: a custom mixture needs weights, means, variances")
                spec = MixtureSpec(tg.weights, tg.means, tg.variances)
            else:
                raise ConfigError(f"target.preset: unknown preset {tg.preset!r}")
            return MixtureTarget(spec)
        if tg.kind == "chain":
            motif = dict(tg.motif)
            for k in ("segment_range", "turn_range_deg"):
                if k in motif:
                    motif[k] = tuple(motif[k])
            try:
                m = ChainMotifSpec(**motif)
            except TypeError as exc:
                raise ConfigError(f"target.motif: {exc}") from None
            lo, hi = tg.length_range
            return ChainTarget(m, (int(lo), int(hi)), float(tg.scale))
        raise ConfigError(f"target.kind: expected 'mixture' or 'chain', got {tg.kind!r}")

    def arch(self, target) -> ArchSpec:
        a = dict(self.teacher.arch)
        a.setdefault("dim", target.dim)
        if isinstance(target, ChainTarget):
            for k, v in CHAIN_ARCH_DEFAULTS.items():
                a.setdefault(k, v)
        if a["dim"] != target.dim:
            raise ConfigError(f"teacher.arch.dim={a['dim']} but the target has dim {target.dim}")
        try:
            return ArchSpec(**a)
        except TypeError as exc:
            raise ConfigError(f"teacher.arch: {exc}") from None

    def distill_config(self) -> DistillConfig:
        d = asdict(self.distill)
        for k in ("probe_samples", "init_checkpoint"):
            d.pop(k)
        return DistillConfig(schedule=self.time_schedule(), seed=self.seed, **d)

    def sample_config(self, **overrides) -> SampleConfig:
        d = {**asdict(self.sample), **overrides}
        d.setdefault("seed", self.seed)
        return SampleConfig(schedule=self.time_schedule(), s_lo=self.distill.s_lo,
                            s_hi=self.distill.s_hi, **d)

    def semantic_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.semantic_dict())

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.semantic_dict()
        d["seed"] = int(seed)
        return from_dict(d, out=self.out)

    def dump(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


_SECTIONS = {"target": TargetSection, "teacher": TeacherSection, "distill": DistillSection,
             "sample": SampleSection, "eval": EvalSection, "sweep": SweepSection}


def _key_lines(text: str) -> dict[tuple, int]:
    """Map key paths to 1-based source lines using the YAML node tree."""
    lines: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                lines[p] = k.start_mark.line + 1
                walk(v, p)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, ())
    return lines


def _build(cls, data, path: tuple, lines: dict):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        where = f" (line {lines[path]})" if path in lines else ""
        raise ConfigError(f"{'.'.join(path)}: expected a mapping{where}")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            p = path + (key,)
            where = f" at line {lines[p]}" if p in lines else ""
            raise ConfigError(f"unknown key {'.'.join(p)!r}{where}")
    kwargs = {}
    for key, val in data.items():
        sub = _SECTIONS.get(key) if not path else None
        kwargs[key] = _build(sub, val, path + (key,), lines) if sub else val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{'.'.join(path) or 'config'}: {exc}") from None


def from_dict(d: dict, out: str | None = None, lines: dict | None = None) -> RunConfig:
    cfg = _build(RunConfig, d, (), lines or {})
    if out is not None:
        cfg.out = out
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: "
                          f"{getattr(exc, 'problem', exc)}") from None
    return from_dict(data or {}, lines=_key_lines(text))


def validate(cfg: RunConfig) -> None:
    """Build every derived object once so bad values fail before any work starts."""
    target = cfg.build_target()
    cfg.arch(target)
    cfg.distill_config()
    cfg.sample_config()
    if cfg.sweep.axis not in SWEEP_DEFAULTS:
        raise ConfigError(f"sweep.axis must be one of {sorted(SWEEP_DEFAULTS)}")
    if cfg.sweep.values is not None and len(cfg.sweep.values) == 0:
        raise ConfigError("sweep.values must be non-empty")
    if cfg.sweep.repetitions < 1:
        raise ConfigError("sweep.repetitions must be positive")


def sweep_values(cfg: RunConfig) -> list:
    return list(cfg.sweep.values) if cfg.sweep.values is not None \
        else list(SWEEP_DEFAULTS[cfg.sweep.axis])
