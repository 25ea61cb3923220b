"""CNN encoder stem + recurrent cell + classification head.

The stem runs three conv-batchnorm-relu-pool blocks that pool only along
the feature axis, so the 233-frame timeline survives intact and each frame
flattens to one feature vector for the sequence cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cells import LmuCell, LmuConfig, LstmCell, count_recurrent_params
from .errors import ConfigError
from .features import MODALITIES, N_CHANNELS, modality_row_mask
from .params import ParamStore

ZSCORE_STD_FLOOR = 1e-6


@dataclass
class ModelConfig:
    feature_subset: tuple[str, ...] = MODALITIES
    filters: tuple[int, int, int] = (128, 64, 32)
    kernel: tuple[int, int] = (3, 3)
    kernel_overrides: tuple[tuple[int, int], ...] | None = None  # per block
    pool: tuple[int, int] = (2, 1)  # feature axis only; time length preserved
    cell: str = "lmu"
    r: int = 64
    d: int = 64
    q: int = 1
    theta: float = 1.0
    dt: float = 0.015
    learned_readout: bool = False
    dropout_p: float = 0.3
    l2: float = 1e-4
    bn_momentum: float = 0.9
    in_channels: int = N_CHANNELS

    def __post_init__(self):
        if self.cell not in ("lmu", "lstm", "none"):
            raise ConfigError(f"cell must be lmu, lstm or none, got {self.cell!r}")
        if len(self.filters) != 3:
            raise ConfigError("the stem uses exactly three blocks")
        if self.pool[1] != 1:
            raise ConfigError("pooling along time would break the frame grid")
        bad = set(self.feature_subset) - set(MODALITIES)
        if bad:
            raise ConfigError(f"unknown modalities {sorted(bad)}")
        if self.in_channels != N_CHANNELS and set(self.feature_subset) != set(MODALITIES):
            raise ConfigError("feature subsets only apply to the full 273-channel layout")

    def block_kernels(self) -> list[tuple[int, int]]:
        if self.kernel_overrides is not None:
            if len(self.kernel_overrides) != 3:
                raise ConfigError("kernel_overrides must list three kernels")
            return [tuple(k) for k in self.kernel_overrides]
        return [tuple(self.kernel)] * 3

    def feat_dim(self) -> int:
        h = self.in_channels
        for _ in range(3):
            h = -(-h // self.pool[0])
        return self.filters[-1] * h

    def to_dict(self) -> dict:
        out = {
            "feature_subset": sorted(self.feature_subset),
            "filters": list(self.filters),
            "kernel": list(self.kernel),
            "kernel_overrides": [list(k) for k in self.kernel_overrides] if self.kernel_overrides else None,
            "pool": list(self.pool),
            "cell": self.cell,
            "r": self.r, "d": self.d, "q": self.q,
            "theta": self.theta, "dt": self.dt,
            "learned_readout": self.learned_readout,
            "dropout_p": self.dropout_p, "l2": self.l2,
            "bn_momentum": self.bn_momentum,
            "in_channels": self.in_channels,
        }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["feature_subset"] = tuple(d["feature_subset"])
        d["filters"] = tuple(d["filters"])
        d["kernel"] = tuple(d["kernel"])
        if d.get("kernel_overrides"):
            d["kernel_overrides"] = tuple(tuple(k) for k in d["kernel_overrides"])
        d["pool"] = tuple(d["pool"])
        return cls(**d)


class CryClassifier:
    """Full model; parameters live in a single ParamStore."""

    def __init__(self, cfg: ModelConfig, n_classes: int, seed: int = 0):
        if n_classes < 2:
            raise ConfigError("need at least 2 classes")
        self.cfg = cfg
        self.n_classes = n_classes
        self.store = ParamStore(seed=seed)
        kernels = cfg.block_kernels()
        c_in = 1
        for i, (f, (kh, kw)) in enumerate(zip(cfg.filters, kernels)):
            self.store.add_uniform(f"conv{i}.w", (f, c_in, kh, kw), fan_in=c_in * kh * kw)
            self.store.add(f"conv{i}.b", np.zeros(f), decay=False)
            self.store.add(f"bn{i}.gamma", np.ones(f), decay=False)
            self.store.add(f"bn{i}.beta", np.zeros(f), decay=False)
            self.store.add_buffer(f"bn{i}.mean", np.zeros(f))
            self.store.add_buffer(f"bn{i}.var", np.ones(f))
            c_in = f
        feat = cfg.feat_dim()
        if cfg.cell == "lmu":
            self.cell = LmuCell(
                LmuConfig(p=feat, d=cfg.d, r=cfg.r, q=cfg.q, theta=cfg.theta, dt=cfg.dt,
                          learned_readout=cfg.learned_readout),
                self.store, prefix="cell",
            )
            head_in = cfg.r
        elif cfg.cell == "lstm":
            self.cell = LstmCell(p=feat, r=cfg.r, store=self.store, prefix="cell")
            head_in = cfg.r
        else:
            self.cell = None
            head_in = feat
        self.store.add_uniform("head.w", (head_in, n_classes), fan_in=head_in)
        self.store.add("head.b", np.zeros(n_classes), decay=False)
        self.store.add_buffer("znorm.mean", np.zeros(cfg.in_channels))
        self.store.add_buffer("znorm.std", np.ones(cfg.in_channels))
        self._mask = (
            modality_row_mask(cfg.feature_subset)
            if cfg.in_channels == N_CHANNELS
            else np.ones(cfg.in_channels, dtype=bool)
        )

    def recurrent_param_count(self) -> int:
        return 0 if self.cell is None else count_recurrent_params(self.cell)

    def set_zscore_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        np.copyto(self.store.buffers["znorm.mean"], mean)
        np.copyto(self.store.buffers["znorm.std"], np.maximum(std, ZSCORE_STD_FLOOR))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Mask excluded modality rows, then z-score with the stored stats."""
        x = np.asarray(x, dtype=ad.default_dtype())
        if x.ndim == 2:
            x = x[None]
        if x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        x = x * self._mask[None, :, None]
        mean = self.store.buffers["znorm.mean"][None, :, None]
        std = self.store.buffers["znorm.std"][None, :, None]
        return ((x - mean) / std).astype(ad.default_dtype())

    def fit_zscore(self, tensors: np.ndarray) -> None:
        """Per-channel stats over (N, C, T) training features, excluded rows masked."""
        x = np.asarray(tensors, dtype=np.float64) * self._mask[None, :, None]
        mean = x.mean(axis=(0, 2))
        std = x.std(axis=(0, 2))
        self.set_zscore_stats(mean, std)

    # -- forward -----------------------------------------------------------

    def encode(self, leaves, x: ad.Tensor, training: bool, rng=None) -> ad.Tensor:
        """(B, C, T) normalized input -> (B, T, feat) per-frame vectors."""
        B = x.shape[0]
        h = ad.reshape(x, (B, 1) + tuple(x.shape[1:]))
        for i in range(3):
            h = ad.conv2d(h, leaves[f"conv{i}.w"], leaves[f"conv{i}.b"], padding="same")
            h = ad.batchnorm(
                h, leaves[f"bn{i}.gamma"], leaves[f"bn{i}.beta"],
                self.store.buffers[f"bn{i}.mean"], self.store.buffers[f"bn{i}.var"],
                training=training, momentum=self.cfg.bn_momentum,
            )
            h = ad.relu(h)
            h = ad.maxpool2d(h, self.cfg.pool, ceil_mode=True)
            h = ad.dropout(h, self.cfg.dropout_p, rng, training)
        # (B, C3, H3, T) -> (B, T, C3 * H3): one flat vector per frame
        h = ad.transpose(h, (0, 3, 1, 2))
        return ad.reshape(h, (B, h.shape[1], h.shape[2] * h.shape[3]))

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> ad.Tensor:
        """Raw (B, C, T) features -> (B, n_classes) logits."""
        if training and rng is None:
            raise ConfigError("training forward needs a seeded Generator for dropout")
        leaves = self.store.leaves()
        normed = ad.Tensor(self.normalize(x))
        frames = self.encode(leaves, normed, training, rng)
        if self.cell is not None:
            h_last = self.cell.forward(leaves, frames)[-1]
        else:
            h_last = ad.reduce_mean(frames, axis=1)
        h_last = ad.dropout(h_last, self.cfg.dropout_p, rng, training)
        logits = ad.add(ad.matmul(h_last, leaves["head.w"]), leaves["head.b"])
        self._last_leaves = leaves
        return logits
