"""Toy targets with known ground truth.

* Isotropic Gaussian mixtures, whose time-t marginals under the rectified
  interpolation are again mixtures, giving closed-form posterior means,
  velocities and scores.
* Procedural C-alpha chains built from helix and straight-strand segments
  with 3.8 A virtual bonds.

Structures are padded into :class:`StructureBatch` objects with a boolean
mask.  Chain coordinates are produced in Angstrom; :class:`ChainTarget`
rescales them to model units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.spatial.transform import Rotation

from .errors import ConfigError, DomainError


@dataclass
class StructureBatch:
    coords: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def n_max(self) -> int:
        return self.coords.shape[1]

    @property
    def dim(self) -> int:
        return self.coords.shape[2]

    def structures(self) -> list[np.ndarray]:
        return [self.coords[b, : self.lengths[b]] for b in range(self.size)]

    def with_coords(self, coords: np.ndarray) -> "StructureBatch":
        return StructureBatch(coords * self.mask[..., None], self.mask, self.lengths, self.labels)

    def validate(self, centered: bool = False) -> None:
        if np.any(self.coords[~self.mask] != 0):
            raise ConfigError("padded coordinates must be zero")
        if not np.array_equal(self.mask.sum(axis=1), self.lengths):
            raise ConfigError("lengths disagree with mask")
        if centered:
            cent = self.coords.sum(axis=1) / self.lengths[:, None]
            if np.abs(cent).max() > 1e-9:
                raise ConfigError("structures are not centred")


# -- Gaussian mixtures -------------------------------------------------------
@dataclass
class MixtureSpec:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        M = len(self.weights)
        if self.means.shape[0] != M or self.variances.shape != (M,):
            raise ConfigError("weights, means and variances disagree on component count")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ConfigError(f"weights must be a probability vector, sum={self.weights.sum()!r}")
        if np.any(self.variances <= 0):
            raise ConfigError("component variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        return cls(d["weights"], d["means"], d["variances"])


def standard_gaussian(dim: int = 2) -> MixtureSpec:
    return MixtureSpec([1.0], np.zeros((1, dim)), [1.0])


def ring_mixture(n_components: int = 8, radius: float = 2.0, std: float = 0.2) -> MixtureSpec:
    ang = 2.0 * np.pi * np.arange(n_components) / n_components
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return MixtureSpec(np.full(n_components, 1.0 / n_components), means,
                       np.full(n_components, std ** 2))


def sample_mixture(spec: MixtureSpec, n: int, rng: np.random.Generator) -> StructureBatch:
    """``n`` single-point structures; labels are the component ids."""
    if n < 1:
        raise DomainError("n must be >= 1")
    counts = rng.multinomial(n, spec.weights)
    labels = np.repeat(np.arange(spec.n_components), counts)
    rng.shuffle(labels)
    z = rng.standard_normal((n, spec.dim))
    x = spec.means[labels] + np.sqrt(spec.variances[labels])[:, None] * z
    return StructureBatch(x[:, None, :], np.ones((n, 1), dtype=bool), np.ones(n, dtype=np.int64),
                          labels)


def _marginal_terms(spec: MixtureSpec, x: np.ndarray, t, labels=None):
    """Log responsibilities, per-component posterior means and variances at time t."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0) or np.any(t >= 1):
        raise DomainError("mixture oracles need t in (0, 1)")
    tt = t[..., None] if t.ndim else t
    var = tt ** 2 * spec.variances + (1.0 - tt) ** 2                     # (..., M)
    centred = x[..., None, :] - (tt[..., None] if t.ndim else t) * spec.means  # (..., M, D)
    sq = (centred ** 2).sum(axis=-1)
    D = spec.dim
    logp = np.log(np.maximum(spec.weights, 1e-300)) - 0.5 * D * np.log(2 * np.pi * var) - 0.5 * sq / var
    if labels is not None:
        sel = np.arange(spec.n_components) == np.asarray(labels)[..., None]
        logp = np.where(sel, logp, -np.inf)
    log_r = logp - logsumexp(logp, axis=-1, keepdims=True)
    gain = tt * spec.variances / var                                     # (..., M)
    post_means = spec.means + gain[..., None] * centred
    return logp, log_r, post_means, centred, var


def analytic_mixture_x_pred(spec: MixtureSpec, x_t, t, labels=None) -> np.ndarray:
    """Posterior mean ``E[x_d | x_t]``; ``x_t`` has shape (..., D)."""
    _, log_r, pm, _, _ = _marginal_terms(spec, np.asarray(x_t, dtype=np.float64), t, labels)
    return (np.exp(log_r)[..., None] * pm).sum(axis=-2)


def analytic_mixture_velocity(spec: MixtureSpec, x_t, t, labels=None) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    f = analytic_mixture_x_pred(spec, x_t, t, labels)
    tt = np.asarray(t, dtype=np.float64)
    tt = tt[..., None] if tt.ndim else tt
    return (f - x_t) / (1.0 - tt)


def analytic_mixture_score(spec: MixtureSpec, x_t, t, labels=None) -> np.ndarray:
    """Gradient of the log marginal density, from the component scores."""
    _, log_r, _, centred, var = _marginal_terms(spec, np.asarray(x_t, dtype=np.float64), t, labels)
    return (np.exp(log_r)[..., None] * (-centred / var[..., None])).sum(axis=-2)


def mixture_log_density(spec: MixtureSpec, x_t, t) -> np.ndarray:
    logp, _, _, _, _ = _marginal_terms(spec, np.asarray(x_t, dtype=np.float64), t)
    return logsumexp(logp, axis=-1)


# -- C-alpha chains ----------------------------------------------------------
@dataclass(frozen=True)
class ChainMotifSpec:
    helix_fraction: float = 0.5
    helix_radius: float = 2.3
    rise: float = 1.5
    twist_deg: float = 100.0
    strand_step: float = 3.8
    noise: float = 0.0
    segment_range: tuple[int, int] = (5, 12)
    turn_range_deg: tuple[float, float] = (30.0, 90.0)
    min_separation: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.helix_fraction <= 1.0:
            raise ConfigError("helix_fraction must lie in [0, 1]")
        if not 3.6 <= self.helix_bond <= 4.0 or not 3.6 <= self.strand_step <= 4.0:
            raise ConfigError(f"implied bond lengths {self.helix_bond:.3f}, {self.strand_step} "
                              "outside [3.6, 4.0] A")

    @property
    def helix_bond(self) -> float:
        chord = 2.0 * self.helix_radius * np.sin(np.deg2rad(self.twist_deg) / 2.0)
        return float(np.hypot(chord, self.rise))


def _helix_bonds(n: int, motif: ChainMotifSpec, phase: float) -> np.ndarray:
    w = np.deg2rad(motif.twist_deg)
    i = np.arange(n + 1)
    pts = np.stack([motif.helix_radius * np.cos(phase + i * w),
                    motif.helix_radius * np.sin(phase + i * w), motif.rise * i], axis=1)
    return np.diff(pts, axis=0)


def _backbone(length: int, motif: ChainMotifSpec, rng: np.random.Generator) -> np.ndarray:
    bonds: list[np.ndarray] = []
    frame = Rotation.random(random_state=rng)
    lo, hi = motif.segment_range
    while sum(len(b) for b in bonds) < length - 1:
        n = int(rng.integers(lo, hi + 1))
        if rng.random() < motif.helix_fraction:
            local = _helix_bonds(n, motif, rng.uniform(0.0, 2.0 * np.pi))
        else:
            local = np.tile([0.0, 0.0, motif.strand_step], (n, 1))
        bonds.append(frame.apply(local))
        angle = np.deg2rad(rng.uniform(*motif.turn_range_deg))
        axis = rng.standard_normal(3)
        axis[2] = 0.0
        axis /= np.linalg.norm(axis) + 1e-12
        frame = frame * Rotation.from_rotvec(angle * axis)
    b = np.concatenate(bonds)[: length - 1]
    return np.concatenate([np.zeros((1, 3)), np.cumsum(b, axis=0)])


def _min_nonadjacent(x: np.ndarray) -> float:
    d = np.linalg.norm(x[:, None] - x[None], axis=-1)
    iu = np.triu_indices(len(x), k=2)
    return float(d[iu].min()) if iu[0].size else np.inf


def sample_chain(length: int, motif: ChainMotifSpec, rng: np.random.Generator,
                 max_tries: int = 1000) -> np.ndarray:
    """One centred chain of ``length`` residues (Angstrom).

    Backbones whose non-adjacent residues come closer than
    ``motif.min_separation`` are redrawn before noise is added.
    """
    if length < 3:
        raise DomainError("chains need at least 3 residues")
    for _ in range(max_tries):
        x = _backbone(length, motif, rng)
        if _min_nonadjacent(x) >= motif.min_separation:
            break
    else:
        raise DomainError(f"could not draw a clash-free chain of length {length}")
    if motif.noise > 0:
        x = x + motif.noise * rng.standard_normal(x.shape)
    return x - x.mean(axis=0)


def sample_lengths(length_range: tuple[int, int], B: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise DomainError(f"invalid length range {length_range}")
    return rng.integers(lo, hi + 1, size=B)


def assemble_batch(structures, N_max: int, labels=None) -> StructureBatch:
    B = len(structures)
    D = structures[0].shape[1]
    coords = np.zeros((B, N_max, D))
    mask = np.zeros((B, N_max), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(structures):
        n = len(s)
        if n > N_max:
            raise DomainError(f"structure of length {n} exceeds N_max={N_max}")
        coords[b, :n] = s
        mask[b, :n] = True
        lengths[b] = n
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return StructureBatch(coords, mask, lengths, lab)


def pad_batch(batch: StructureBatch, N_max: int) -> StructureBatch:
    """Same structures with extra padding columns."""
    return assemble_batch(batch.structures(), N_max, batch.labels)


# -- targets in model units --------------------------------------------------
@dataclass
class MixtureTarget:
    spec: MixtureSpec
    kind: str = field(default="mixture", init=False)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def n_max(self) -> int:
        return 1

    @property
    def num_labels(self) -> int:
        return self.spec.n_components

    def sample(self, B: int, rng: np.random.Generator, lengths=None) -> StructureBatch:
        return sample_mixture(self.spec, B, rng)

    def noise_batch(self, B: int, rng: np.random.Generator, lengths=None) -> StructureBatch:
        return StructureBatch(np.zeros((B, 1, self.dim)), np.ones((B, 1), dtype=bool),
                              np.ones(B, dtype=np.int64))

    def to_physical(self, coords: np.ndarray) -> np.ndarray:
        return coords

    def to_dict(self) -> dict:
        return {"kind": "mixture", **self.spec.to_dict()}


@dataclass
class ChainTarget:
    motif: ChainMotifSpec = ChainMotifSpec()
    length_range: tuple[int, int] = (8, 64)
    scale: float = 0.1
    kind: str = field(default="chain", init=False)

    @property
    def dim(self) -> int:
        return 3

    @property
    def n_max(self) -> int:
        return self.length_range[1]

    @property
    def num_labels(self) -> int:
        return 0

    def sample_lengths(self, B: int, rng: np.random.Generator) -> np.ndarray:
        return sample_lengths(self.length_range, B, rng)

    def noise_batch(self, B: int, rng: np.random.Generator, lengths=None) -> StructureBatch:
        lengths = self.sample_lengths(B, rng) if lengths is None else np.asarray(lengths)
        mask = np.arange(self.n_max)[None, :] < lengths[:, None]
        return StructureBatch(np.zeros((len(lengths), self.n_max, 3)), mask, lengths)

    def sample(self, B: int, rng: np.random.Generator, lengths=None) -> StructureBatch:
        lengths = self.sample_lengths(B, rng) if lengths is None else np.asarray(lengths)
        chains = [sample_chain(int(n), self.motif, rng) * self.scale for n in lengths]
        return assemble_batch(chains, self.n_max)

    def to_physical(self, coords: np.ndarray) -> np.ndarray:
        return coords / self.scale

    def to_dict(self) -> dict:
        d = {k: getattr(self.motif, k) for k in self.motif.__dataclass_fields__}
        return {"kind": "chain", "motif": d, "length_range": list(self.length_range),
                "scale": self.scale}


def target_from_dict(d: dict):
    if d["kind"] == "mixture":
        return MixtureTarget(MixtureSpec.from_dict(d))
    if d["kind"] == "chain":
        m = dict(d.get("motif", {}))
        for k in ("segment_range", "turn_range_deg"):
            if k in m:
                m[k] = tuple(m[k])
        return ChainTarget(ChainMotifSpec(**m), tuple(d.get("length_range", (8, 64))),
                           float(d.get("scale", 0.1)))
    raise ConfigError(f"unknown target kind {d['kind']!r}")


# -- xyz text format ---------------------------------------------------------
def format_xyz(structure: np.ndarray) -> str:
    return "".join("CA " + " ".join(f"{c:.6f}" for c in row) + "\n" for row in structure)


def write_xyz(path, structure: np.ndarray) -> Path:
    path = Path(path)
    path.write_text(format_xyz(structure))
    return path


def read_xyz(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts and parts[0] == "CA":
            rows.append([float(v) for v in parts[1:]])
    return np.asarray(rows, dtype=np.float64)


def write_batch_xyz(directory, batch: StructureBatch, prefix: str = "sample") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [write_xyz(directory / f"{prefix}_{i:05d}.xyz", s)
            for i, s in enumerate(batch.structures())]


def read_batch_xyz(directory, N_max: int | None = None) -> StructureBatch:
    files = sorted(Path(directory).glob("*.xyz"))
    if not files:
        raise DomainError(f"no .xyz files in {directory}")
    structs = [read_xyz(f) for f in files]
    return assemble_batch(structs, N_max or max(len(s) for s in structs))
