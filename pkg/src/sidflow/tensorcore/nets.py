"""Time/label-conditioned per-point velocity networks.

Each point of a structure is processed by a shared MLP.  Its input is the
point's own coordinates, the offsets and distances to its ``window``
neighbours on either side along the chain, optional relative-position features, Fourier features
of the time and an optional label embedding.  Masked means of the first two
hidden layers are fed back as global context, so points can interact.
Optionally the first ``n_attn`` hidden layers are followed by a residual
single-head self-attention block whose logits include a learned multiple of
the squared input distance between points.  The final layer has no bias;
its output, plus learned per-point multiples of the neighbour offsets,
is the velocity ``v(x_t, t)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from ..errors import ConfigError, DomainError, NumericError
from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ArchSpec:
    dim: int = 2
    width: int = 64
    depth: int = 3
    n_freq: int = 8
    window: int = 0
    n_pos: int = 0
    num_labels: int = 0
    label_dim: int = 0
    n_attn: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.width < 1 or self.depth < 0 or self.n_freq < 0:
            raise ConfigError(f"invalid architecture {self}")
        if self.window < 0 or self.n_pos < 0 or not 0 <= self.n_attn <= self.depth:
            raise ConfigError(f"invalid architecture {self}")
        if (self.num_labels > 0) != (self.label_dim > 0):
            raise ConfigError("num_labels and label_dim must both be zero or both positive")

    @property
    def in_dim(self) -> int:
        return (self.dim * (1 + 2 * self.window) + 2 * self.window + 2 * self.n_pos
                + 2 * self.n_freq + 1 + self.label_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NetParams:
    """Named parameter arrays plus the architecture they instantiate.

    ``time_freqs`` is a fixed feature table and is never trained.
    """

    arch: ArchSpec
    arrays: dict[str, np.ndarray]

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.arrays if k != "time_freqs"]

    def copy(self) -> "NetParams":
        return NetParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def n_params(self) -> int:
        return int(sum(self.arrays[k].size for k in self.trainable))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad and k != "time_freqs")
                for k, v in self.arrays.items()}

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in self.arrays.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


def _layer_in_dims(arch: ArchSpec) -> list[int]:
    dims = [arch.in_dim]
    for layer in range(1, arch.depth + 1):
        # hidden layers 1 and 2 contribute pooled context to the next layer
        dims.append(2 * arch.width if layer <= 2 else arch.width)
    return dims


def default_time_freqs(n_freq: int) -> np.ndarray:
    return 0.5 * 2.0 ** np.arange(n_freq, dtype=np.float64)


def init_params(arch: ArchSpec, seed: int) -> NetParams:
    """He-style uniform fan-in initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    in_dims = _layer_in_dims(arch)
    for i in range(arch.depth):
        bound = np.sqrt(6.0 / in_dims[i])
        arrays[f"W{i}"] = rng.uniform(-bound, bound, size=(in_dims[i], arch.width))
        arrays[f"b{i}"] = np.zeros(arch.width)
        if i < arch.n_attn:
            w = arch.width
            for name in ("Wq", "Wk", "Wv", "Wo"):
                arrays[f"{name}{i}"] = rng.uniform(-1.0, 1.0, size=(w, w)) * np.sqrt(3.0 / w)
            arrays[f"dist{i}"] = np.zeros(1)
    bound = np.sqrt(6.0 / in_dims[arch.depth])
    arrays["W_out"] = rng.uniform(-bound, bound, size=(in_dims[arch.depth], arch.dim))
    if arch.window:
        arrays["W_off"] = rng.uniform(-bound, bound, size=(in_dims[arch.depth], 2 * arch.window))
    if arch.num_labels:
        # extra trailing row is the "no label" embedding
        arrays["label_embed"] = rng.uniform(-1.0, 1.0, size=(arch.num_labels + 1, arch.label_dim))
    arrays["time_freqs"] = default_time_freqs(arch.n_freq)
    return NetParams(arch, arrays)


def zero_params(arch: ArchSpec) -> NetParams:
    p = init_params(arch, 0)
    for k in p.trainable:
        p.arrays[k][...] = 0.0
    return p


def _time_features(t: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    ang = 2.0 * np.pi * t[:, None] * freqs[None, :]
    logit = -np.log10(np.maximum(1.0 - t, 1e-6))[:, None] / 2.0
    return np.concatenate([np.sin(ang), np.cos(ang), logit], axis=1)


def _pos_features(mask: np.ndarray, n_pos: int) -> np.ndarray:
    B, N = mask.shape
    lengths = mask.sum(axis=1)
    r = np.arange(N)[None, :] / np.maximum(lengths - 1, 1)[:, None]
    f = np.arange(1, n_pos + 1)
    ang = np.pi * r[..., None] * f
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1) * mask[..., None]


def _shift_mask(mask: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros_like(mask)
    N = mask.shape[1]
    if k >= 0:
        out[:, : N - k] = mask[:, k:]
    else:
        out[:, -k:] = mask[:, : N + k]
    return out


def apply(arch: ArchSpec, p: Mapping[str, Tensor], x: Tensor, t: np.ndarray,
          mask: np.ndarray, labels: np.ndarray | None = None) -> Tensor:
    """Differentiable forward pass.  ``x`` is (B, N, D); returns velocity (B, N, D)."""
    B, N, D = x.shape
    m = mask.astype(np.float64)
    m3 = m[..., None]
    x = x * m3
    parts: list = [x]
    offsets, dists = [], []
    for j in range(1, arch.window + 1):
        for off in (j, -j):
            valid = (m * _shift_mask(m, off))[..., None]
            d = (ad.shift(x, off, axis=1) - x) * valid
            offsets.append(d)
            dists.append(ad.sqrt((d * d).sum(axis=-1, keepdims=True) + 1e-8) * valid)
    parts += offsets + dists
    if arch.n_pos:
        parts.append(_pos_features(m, arch.n_pos))
    tf = _time_features(t, p["time_freqs"].data)
    parts.append(np.broadcast_to(tf[:, None, :], (B, N, tf.shape[1])) * m3)
    if arch.num_labels:
        idx = np.full(B, arch.num_labels) if labels is None else labels
        emb = ad.reshape(ad.getitem(p["label_embed"], idx), (B, 1, arch.label_dim))
        parts.append(emb * m3)
    h = ad.concat(parts, axis=-1)
    count = np.maximum(m.sum(axis=1), 1.0)[:, None, None]
    ones = np.ones((1, N, 1))
    if arch.n_attn:
        key_bias = np.where(mask, 0.0, -1e30)[:, None, :]
        diff = ad.reshape(x, (B, N, 1, D)) - ad.reshape(x, (B, 1, N, D))
        sqdist = (diff * diff).sum(axis=-1)
    for i in range(arch.depth):
        h = ad.silu(h @ p[f"W{i}"] + p[f"b{i}"]) * m3
        if i < arch.n_attn:
            h = h + _attention(p, i, h, sqdist, key_bias, arch.width) * m3
        if i < 2:
            ctx = h.sum(axis=1, keepdims=True) / count
            h = ad.concat([h, ctx * ones], axis=-1)
    out = h @ p["W_out"]
    if arch.window:
        coef = h @ p["W_off"]
        for j, d in enumerate(offsets):
            out = out + coef[:, :, j:j + 1] * d
    return out * m3


def _attention(p, i, h, sqdist, key_bias, width):
    q, k, v = h @ p[f"Wq{i}"], h @ p[f"Wk{i}"], h @ p[f"Wv{i}"]
    logits = (q @ ad.swapaxes(k)) / np.sqrt(width) - sqdist * p[f"dist{i}"] + key_bias
    return (ad.softmax(logits, axis=-1) @ v) @ p[f"Wo{i}"]


def _as_time_vector(t, B: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(B, float(t))
    if t.shape != (B,):
        raise ConfigError(f"time must be scalar or shape ({B},), got {t.shape}")
    return t


def check_inputs(arch: ArchSpec, x: np.ndarray, t, mask, labels):
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim != 3 or x.shape[-1] != arch.dim:
        raise ConfigError(f"coords shape {x.shape} incompatible with dim={arch.dim}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite coordinates passed to network")
    B, N, _ = x.shape
    t = _as_time_vector(t, B)
    if not np.isfinite(t).all():
        raise NumericError("non-finite time passed to network")
    mask = np.ones((B, N), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (B, N):
        raise ConfigError(f"mask shape {mask.shape} does not match coords {x.shape}")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape == ():
            labels = np.full(B, int(labels))
        if not arch.num_labels:
            raise ConfigError("labels passed to an unconditional network")
        if labels.min() < 0 or labels.max() >= arch.num_labels:
            raise DomainError(f"label out of range [0, {arch.num_labels})")
    return t, mask, labels


def net_forward(params: NetParams, x, t, label=None, mask=None) -> np.ndarray:
    """Velocity field of a frozen network (no graph recorded)."""
    t, mask, labels = check_inputs(params.arch, x, t, mask, label)
    with ad.no_grad():
        out = apply(params.arch, params.tensors(), Tensor(x), t, mask, labels)
    return out.data
