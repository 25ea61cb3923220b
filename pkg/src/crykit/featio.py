"""Binary feature container: magic "CRYF", version, dims, float32 rows.

Each container carries a JSON sidecar with provenance (source path, rate,
duration, config hash, channel layout) so either file alone is enough to
interpret the other.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IoError, ParseError
from .features import CHANNEL_LAYOUT, N_CHANNELS, N_FRAMES

MAGIC = b"CRYF"
VERSION = 1


def config_hash(obj) -> str:
    """Short stable hash of any JSON-serializable config."""
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def cryf_sidecar_path(path: Path | str) -> Path:
    return Path(str(path) + ".json")


def write_cryf(path: Path | str, tensor: np.ndarray, meta: dict | None = None) -> None:
    """Write a (channels, frames) tensor plus its JSON sidecar."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 2:
        raise ParseError(f"feature tensor must be 2-D, got shape {tensor.shape}")
    n_channels, n_frames = tensor.shape
    path = Path(path)
    header = MAGIC + struct.pack("<III", VERSION, n_channels, n_frames)
    path.write_bytes(header + tensor.astype("<f4").tobytes())
    sidecar = dict(meta or {})
    sidecar.setdefault("channel_layout", {k: list(v) for k, v in CHANNEL_LAYOUT.items()})
    sidecar["n_channels"] = n_channels
    sidecar["n_frames"] = n_frames
    cryf_sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def read_cryf(path: Path | str) -> tuple[np.ndarray, dict]:
    """Read a container; returns (float32 tensor, sidecar dict or {})."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"missing feature file {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ParseError(f"{path}: not a CRYF container")
    version, n_channels, n_frames = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise ParseError(f"{path}: unsupported container version {version}")
    expect = 16 + 4 * n_channels * n_frames
    if len(raw) < expect:
        raise ParseError(f"{path}: truncated payload")
    tensor = np.frombuffer(raw, dtype="<f4", count=n_channels * n_frames, offset=16)
    tensor = tensor.reshape(n_channels, n_frames).copy()
    sidecar_path = cryf_sidecar_path(path)
    meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return tensor, meta


def default_meta(source: str, sample_rate: int, duration_s: float, cfg_hash: str) -> dict:
    return {
        "source": source,
        "sample_rate": sample_rate,
        "duration_s": round(duration_s, 6),
        "config_hash": cfg_hash,
        "n_channels": N_CHANNELS,
        "n_frames": N_FRAMES,
    }
