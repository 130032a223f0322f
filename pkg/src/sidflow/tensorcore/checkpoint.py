"""Checkpoint files: a text header followed by raw little-endian float64 arrays.

Layout::

    SIDFLOW-CKPT 1\\n
    <one line of JSON: arch, seed, step, config, config_hash, arrays, extra>\\n
    <array 0 bytes><array 1 bytes>...

``arrays`` lists ``[name, shape]`` in the order the blobs are written.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import ConfigError
from .nets import ArchSpec, NetParams

MAGIC = b"SIDFLOW-CKPT 1\n"


def config_hash(config: Any) -> str:
    """Hash of the canonical JSON form (key order and whitespace do not matter)."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, nets: dict[str, NetParams], *, seed: int, step: int,
                    config: dict, extra_arrays: dict[str, np.ndarray] | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs: list[tuple[str, np.ndarray]] = []
    for net_name, p in nets.items():
        for k, v in p.arrays.items():
            blobs.append((f"{net_name}/{k}", v))
    for k, v in (extra_arrays or {}).items():
        blobs.append((f"extra/{k}", v))
    header = {
        "arch": {name: p.arch.to_dict() for name, p in nets.items()},
        "seed": int(seed),
        "step": int(step),
        "config": config,
        "config_hash": config_hash(config),
        "arrays": [[name, list(v.shape)] for name, v in blobs],
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, v in blobs:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_hash: str | None = None):
    """Return ``(nets, header, extra_arrays)``.

    Raises ``ConfigError`` if the stored hash does not match the stored
    config, if ``expected_hash`` differs, or if the file is truncated.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        payload = fh.read()
    if config_hash(header["config"]) != header["config_hash"]:
        raise ConfigError(f"{path}: config hash does not match stored config")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise ConfigError(f"{path}: config hash {header['config_hash']} != expected {expected_hash}")
    offset = 0
    raw: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(payload):
            raise ConfigError(f"{path}: truncated payload")
        raw[name] = np.frombuffer(payload[offset:offset + n], dtype="<f8").reshape(shape).copy()
        offset += n
    nets = {}
    for net_name, arch in header["arch"].items():
        prefix = net_name + "/"
        arrays = {k[len(prefix):]: v for k, v in raw.items() if k.startswith(prefix)}
        nets[net_name] = NetParams(ArchSpec(**arch), arrays)
    extra_arrays = {k[6:]: v for k, v in raw.items() if k.startswith("extra/")}
    return nets, header, extra_arrays
