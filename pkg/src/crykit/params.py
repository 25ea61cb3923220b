"""Named parameter storage, Adam updates, and the binary weight format.

Weights serialize as a JSON index {name -> shape, dtype, byte offset} next
to a raw little-endian float32 blob.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Mutable set of named arrays plus Adam moment buffers.

    `buffers` hold non-learned state (batchnorm running stats); `no_decay`
    marks parameters excluded from weight decay (biases, batchnorm scales).
    """

    def __init__(self, seed: int = 0):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.no_decay: set[str] = set()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step = 0

    def add(self, name: str, value: np.ndarray, decay: bool = True) -> None:
        if name in self.params or name in self.buffers:
            raise ShapeError(f"duplicate parameter name {name!r}")
        self.params[name] = np.asarray(value, dtype=ad.default_dtype())
        if not decay:
            self.no_decay.add(name)

    def add_uniform(self, name: str, shape: tuple[int, ...], fan_in: int, decay: bool = True) -> None:
        """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        self.add(name, self.rng.uniform(-bound, bound, size=shape), decay=decay)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self.params or name in self.buffers:
            raise ShapeError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(value, dtype=ad.default_dtype())

    def leaves(self) -> dict[str, ad.Tensor]:
        """Fresh leaf tensors over the live arrays, one per training step."""
        return {name: ad.Tensor(arr, requires_grad=True) for name, arr in self.params.items()}

    def n_entries(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_state(self) -> dict[str, np.ndarray]:
        state = {name: arr.copy() for name, arr in self.params.items()}
        state.update({name: arr.copy() for name, arr in self.buffers.items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in self.params.items():
            np.copyto(arr, state[name])
        for name, arr in self.buffers.items():
            np.copyto(arr, state[name])


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS, weight_decay: float = 0.0) -> None:
    """One Adam update with bias correction; weight decay is added to the
    gradient before the moment updates (skipped for `no_decay` params)."""
    store._step += 1
    t = store._step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if weight_decay and name not in store.no_decay:
            g = g + weight_decay * p
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(p)
            store._v[name] = np.zeros_like(p)
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def save_weights(store: ParamStore, blob_path: Path | str, index_path: Path | str | None = None) -> dict:
    """Write params + buffers as one float32 blob and return the JSON index."""
    blob_path = Path(blob_path)
    index: dict[str, dict] = {}
    offset = 0
    chunks = []
    for name in sorted(list(store.params) + list(store.buffers)):
        arr = store.params.get(name)
        if arr is None:
            arr = store.buffers[name]
        raw = arr.astype("<f4").tobytes()
        index[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    blob_path.write_bytes(b"".join(chunks))
    if index_path is not None:
        Path(index_path).write_text(json.dumps(index, indent=1, sort_keys=True))
    return index


def load_weights(store: ParamStore, blob_path: Path | str, index: dict) -> None:
    """Restore params + buffers previously written by :func:`save_weights`."""
    raw = Path(blob_path).read_bytes()
    for name, meta in index.items():
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(shape)
        target = store.params.get(name)
        if target is None:
            target = store.buffers.get(name)
        if target is None:
            raise ShapeError(f"unknown parameter {name!r} in weight index")
        if target.shape != shape:
            raise ShapeError(f"shape mismatch for {name!r}: {target.shape} vs {shape}")
        np.copyto(target, arr.astype(target.dtype))
