"""Sample-quality metrics: distribution distances, a chain designability proxy,
aligned-RMSD diversity and effective sampling time."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DomainError

BOND_RANGE = (3.3, 4.3)
BOND_FRACTION = 0.95
CLASH_CUTOFF = 2.0


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(len(a), -1) if a.ndim != 2 else a


def _mean_dist(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    total = 0.0
    for lo in range(0, len(a), chunk):
        total += cdist(a[lo:lo + chunk], b).sum()
    return total / (len(a) * len(b))


def energy_distance(A, B) -> float:
    """V-statistic ``2 E|a - b| - E|a - a'| - E|b - b'|`` (non-negative).

    Arguments are put in a canonical order first, so swapping them gives a
    bitwise-identical value.
    """
    a, b = _as_points(A), _as_points(B)
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise DomainError("energy distance needs at least two points per set")
    if (len(a), a.tobytes()) > (len(b), b.tobytes()):
        a, b = b, a
    val = 2.0 * _mean_dist(a, b) - _mean_dist(a, a) - _mean_dist(b, b)
    return float(max(val, 0.0))


def _pca_frame(pooled: np.ndarray) -> np.ndarray:
    centred = pooled - pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    proj = centred @ vt.T
    signs = np.where(np.sum(proj ** 3, axis=0) < 0, -1.0, 1.0)
    return vt * signs[:, None]


def sliced_wasserstein(A, B, n_proj: int = 64, rng: np.random.Generator | None = None) -> float:
    """Mean 1D Wasserstein-1 over random directions.

    Directions are drawn in the principal-axis frame of the pooled sample,
    which makes the value invariant to a rotation applied to both sets.  In
    one dimension with ``n_proj = 1`` it is the exact W1 of sorted samples.
    Unequal set sizes are handled through quantile functions.
    """
    a, b = _as_points(A), _as_points(B)
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise DomainError("sliced Wasserstein needs at least two points per set")
    rng = np.random.default_rng(0) if rng is None else rng
    D = a.shape[1]
    if D == 1:
        dirs = np.ones((n_proj, 1))
    else:
        frame = _pca_frame(np.vstack([a, b]))
        dirs = rng.standard_normal((n_proj, D))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        dirs = dirs @ frame
    total = 0.0
    for d in dirs:
        total += _w1_1d(a @ d, b @ d)
    return total / n_proj


def _w1_1d(u: np.ndarray, v: np.ndarray) -> float:
    u, v = np.sort(u), np.sort(v)
    if len(u) == len(v):
        return float(np.mean(np.abs(u - v)))
    grid = np.unique(np.concatenate([np.arange(len(u) + 1) / len(u),
                                     np.arange(len(v) + 1) / len(v)]))
    mid = 0.5 * (grid[:-1] + grid[1:])
    qu = u[np.minimum((mid * len(u)).astype(int), len(u) - 1)]
    qv = v[np.minimum((mid * len(v)).astype(int), len(v) - 1)]
    return float(np.sum(np.abs(qu - qv) * np.diff(grid)))


# -- chains ------------------------------------------------------------------
@dataclass
class ProxyResult:
    passed: bool
    bond_violations: int
    clash_count: int
    radius_of_gyration: float


def chain_designable_proxy(structure) -> ProxyResult:
    """Geometric stand-in for designability on a C-alpha chain in Angstrom."""
    x = np.asarray(structure, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) < 3:
        raise DomainError(f"need an (N >= 3, 3) chain, got {x.shape}")
    bonds = np.linalg.norm(np.diff(x, axis=0), axis=1)
    ok = (bonds >= BOND_RANGE[0]) & (bonds <= BOND_RANGE[1])
    dist = cdist(x, x)
    i, j = np.triu_indices(len(x), k=2)
    clashes = int(np.sum(dist[i, j] < CLASH_CUTOFF))
    rg = float(np.sqrt(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1))))
    passed = bool(ok.mean() >= BOND_FRACTION and clashes == 0)
    return ProxyResult(passed, int(np.sum(~ok)), clashes, rg)


def designable_fraction(structures) -> float:
    structures = list(structures)
    if not structures:
        return 0.0
    return float(np.mean([chain_designable_proxy(s).passed for s in structures]))


def kabsch_rmsd(P, Q) -> float:
    """RMSD after centring and the best proper rotation of ``P`` onto ``Q``."""
    p = np.asarray(P, dtype=np.float64)
    q = np.asarray(Q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"shape mismatch {p.shape} vs {q.shape}")
    p = p - p.mean(axis=0)
    q = q - q.mean(axis=0)
    u, _, vt = np.linalg.svd(p.T @ q)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    rot = u @ fix @ vt
    # explicit residual avoids cancellation in the norm-expansion formula
    return float(math.sqrt(np.mean(np.sum((p @ rot - q) ** 2, axis=1))))


def diversity_rmsd(structures) -> float | None:
    """Mean pairwise aligned RMSD within equal-length groups; ``None`` if no pair exists."""
    groups: dict[int, list[np.ndarray]] = {}
    for s in structures:
        s = np.asarray(s, dtype=np.float64)
        groups.setdefault(len(s), []).append(s)
    vals = []
    for n in sorted(groups):
        g = groups[n]
        for a in range(len(g)):
            for b in range(a + 1, len(g)):
                vals.append(kabsch_rmsd(g[a], g[b]))
    if not vals:
        return None
    return float(np.mean(vals))


def effective_sampling_time(total_seconds: float, n_designable: int) -> float:
    """Seconds per designable sample; ``inf`` (with a warning) if none are designable."""
    if total_seconds < 0 or n_designable < 0:
        raise DomainError("times and counts must be non-negative")
    if n_designable == 0:
        warnings.warn("no designable samples: effective sampling time is infinite",
                      RuntimeWarning)
        return math.inf
    return total_seconds / n_designable


# -- reports -----------------------------------------------------------------
REPORT_COLUMNS = ["run_id", "K", "gamma", "alpha", "length", "n", "energy_distance",
                  "sliced_wasserstein", "designability", "diversity_rmsd",
                  "effective_time", "total_seconds"]


@dataclass
class EvalReport:
    run_id: str
    K: int | None = None
    gamma: float | None = None
    alpha: float | None = None
    n: int = 0
    energy_distance: float | None = None
    sliced_wasserstein: float | None = None
    designability: float | None = None
    diversity_rmsd: float | None = None
    effective_time: float | None = None
    total_seconds: float | None = None
    per_length: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("energy_distance", "sliced_wasserstein", "diversity_rmsd"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise DomainError(f"{name} must be finite, got {v}")
        if self.designability is not None and not 0.0 <= self.designability <= 1.0:
            raise DomainError("designability must lie in [0, 1]")

    def rows(self) -> list[dict]:
        base = {k: getattr(self, k) for k in REPORT_COLUMNS if k != "length"}
        out = [{**base, "length": "all"}]
        for row in self.per_length:
            out.append({**base, **row})
        return out


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_reports(path, reports, extra_columns: tuple[str, ...] = ()) -> Path:
    """Write report rows (aggregate row first, then per-length rows) as CSV."""
    path = Path(path)
    cols = REPORT_COLUMNS + [c for c in extra_columns if c not in REPORT_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for rep in reports:
            rows = rep.rows() if isinstance(rep, EvalReport) else [rep]
            for row in rows:
                w.writerow({c: _cell(row.get(c)) for c in cols})
    return path


def read_reports(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def evaluate_points(run_id: str, samples, reference, **keys) -> EvalReport:
    """Distribution-fit report for point-cloud samples against reference data."""
    return EvalReport(run_id, n=len(samples), energy_distance=energy_distance(samples, reference),
                      sliced_wasserstein=sliced_wasserstein(samples, reference), **keys)


def evaluate_chains(run_id: str, structures, total_seconds: float | None = None,
                    **keys) -> EvalReport:
    """Designability, diversity of the designable subset and effective time, per length too."""
    structures = [np.asarray(s, dtype=np.float64) for s in structures]
    passed = [chain_designable_proxy(s).passed for s in structures]
    good = [s for s, p in zip(structures, passed) if p]
    frac = float(np.mean(passed)) if structures else 0.0
    eff = None
    if total_seconds is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            eff = effective_sampling_time(total_seconds, len(good))
    per_length = []
    for n in sorted({len(s) for s in structures}):
        idx = [i for i, s in enumerate(structures) if len(s) == n]
        per_length.append({"length": n, "n": len(idx),
                           "designability": float(np.mean([passed[i] for i in idx])),
                           "diversity_rmsd": diversity_rmsd([structures[i] for i in idx
                                                             if passed[i]])})
    return EvalReport(run_id, n=len(structures), designability=frac,
                      diversity_rmsd=diversity_rmsd(good), effective_time=eff,
                      total_seconds=total_seconds, per_length=per_length, **keys)
