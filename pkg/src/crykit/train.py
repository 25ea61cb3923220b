"""Training loop with leakage checks, early stopping on validation macro-F1,
and checkpoint serialization."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import SampleRecord, verify_no_leakage
from .errors import ConfigError, DataError, IoError, LeakageError
from .featio import config_hash, read_cryf
from .metrics import ConfusionMatrix, macro_f1
from .model import CryClassifier, ModelConfig
from .params import adam_step, load_weights, save_weights


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 8
    seed: int = 0
    class_weighting: bool = True  # inverse-frequency weights in the loss

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 for batchnorm")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "patience": self.patience,
            "seed": self.seed, "class_weighting": self.class_weighting,
        }


@dataclass
class Checkpoint:
    model: CryClassifier
    labels: list[str]
    config_hash: str
    best_val_macro_f1: float
    seed: int

    def predict_proba(self, tensors: np.ndarray) -> np.ndarray:
        return ad.softmax_values(self.predict_logits(tensors))

    def predict_logits(self, tensors: np.ndarray, batch_size: int = 32) -> np.ndarray:
        tensors = np.asarray(tensors)
        if tensors.ndim == 2:
            tensors = tensors[None]
        outs = []
        for lo in range(0, len(tensors), batch_size):
            logits = self.model.forward(tensors[lo : lo + batch_size], training=False)
            outs.append(logits.value.astype(np.float64))
        return np.concatenate(outs, axis=0)


def load_features(records: list[SampleRecord]) -> np.ndarray:
    arrays = []
    for r in records:
        if not r.feature_path:
            raise IoError(f"record {r.path} has no extracted features")
        tensor, _ = read_cryf(r.feature_path)
        arrays.append(tensor)
    return np.stack(arrays)


def _check_splits(records: list[SampleRecord]) -> tuple[list, list]:
    violations = verify_no_leakage(records)
    if violations:
        raise LeakageError(f"groups in multiple splits: {violations[:5]}")
    train = [r for r in records if r.split == "train"]
    val = [r for r in records if r.split == "val"]
    if not train:
        raise DataError("empty training split")
    if not val:
        raise DataError("empty validation split (needed for early stopping)")
    return train, val


def train(records: list[SampleRecord], model_cfg: ModelConfig, train_cfg: TrainConfig,
          log=None) -> tuple[Checkpoint, list[dict]]:
    """Train on the manifest's train split, early-stop on val macro-F1.

    Returns the checkpoint (with the best-epoch weights restored) and the
    per-epoch report."""
    train_recs, val_recs = _check_splits(records)
    labels = sorted({r.label for r in train_recs})
    if len(labels) < 2:
        raise DataError("training needs at least 2 classes")
    extra = {r.label for r in val_recs} - set(labels)
    if extra:
        raise DataError(f"validation labels missing from training split: {sorted(extra)}")
    label_idx = {c: i for i, c in enumerate(labels)}
    counts = np.array([sum(r.label == c for r in train_recs) for c in labels], dtype=float)
    if np.any(counts == 0):
        raise DataError("every class needs at least one training sample")

    x_train = load_features(train_recs)
    y_train = np.array([label_idx[r.label] for r in train_recs])
    x_val = load_features(val_recs)
    y_val = [r.label for r in val_recs]

    model = CryClassifier(model_cfg, n_classes=len(labels), seed=train_cfg.seed)
    model.fit_zscore(x_train)
    class_weights = None
    if train_cfg.class_weighting:
        class_weights = (len(train_recs) / (len(labels) * counts)).astype(np.float64)

    ckpt = Checkpoint(
        model=model, labels=labels,
        config_hash=config_hash({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}),
        best_val_macro_f1=-1.0, seed=train_cfg.seed,
    )
    rng = np.random.default_rng(train_cfg.seed)
    best_state = None
    best_f1 = -np.inf
    bad_epochs = 0
    report: list[dict] = []

    for epoch in range(1, train_cfg.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_recs))
        losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            if len(idx) < 2:
                continue  # batchnorm needs company; the leftover joins next epoch's shuffle
            logits = model.forward(x_train[idx], training=True, rng=rng)
            loss = ad.softmax_cross_entropy(logits, y_train[idx], class_weights=class_weights)
            loss.backward()
            grads = {name: leaf.grad for name, leaf in model._last_leaves.items()
                     if leaf.grad is not None}
            adam_step(model.store, grads, lr=train_cfg.lr, weight_decay=model_cfg.l2)
            losses.append(loss.item())

        preds = ckpt.predict_logits(x_val)
        pred_labels = [labels[i] for i in preds.argmax(axis=1)]
        cm = ConfusionMatrix.from_predictions(y_val, pred_labels, labels)
        val_f1 = macro_f1(cm)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_macro_f1": val_f1,
            "seconds": round(time.perf_counter() - started, 3),
        }
        report.append(entry)
        if log:
            log(entry)
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_state = model.store.copy_state()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                break

    if best_state is not None:
        model.store.load_state(best_state)
    ckpt.best_val_macro_f1 = float(best_f1)
    return ckpt, report


# -- checkpoint serialization --------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, out_dir: Path | str, report: list[dict] | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = save_weights(ckpt.model.store, out_dir / "weights.bin")
    manifest = {
        "format": "crykit-checkpoint-v1",
        "model_config": ckpt.model.cfg.to_dict(),
        "n_classes": ckpt.model.n_classes,
        "labels": ckpt.labels,
        "config_hash": ckpt.config_hash,
        "best_val_macro_f1": ckpt.best_val_macro_f1,
        "seed": ckpt.seed,
        "zscore": {
            "mean": ckpt.model.store.buffers["znorm.mean"].astype(float).tolist(),
            "std": ckpt.model.store.buffers["znorm.std"].astype(float).tolist(),
        },
        "weights_index": index,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if report is not None:
        lines = [json.dumps(row) for row in report]
        (out_dir / "train_report.jsonl").write_text("\n".join(lines) + "\n")


def load_checkpoint(ckpt_dir: Path | str) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise IoError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = CryClassifier(cfg, n_classes=manifest["n_classes"], seed=manifest["seed"])
    load_weights(model.store, ckpt_dir / "weights.bin", manifest["weights_index"])
    return Checkpoint(
        model=model,
        labels=list(manifest["labels"]),
        config_hash=manifest["config_hash"],
        best_val_macro_f1=manifest["best_val_macro_f1"],
        seed=manifest["seed"],
    )


def predict_logit_rows(records: list[SampleRecord], ckpt: Checkpoint) -> list[dict]:
    """Order-stable per-sample logits for a manifest subset."""
    x = load_features(records)
    logits = ckpt.predict_logits(x)
    rows = []
    for r, z in zip(records, logits):
        rows.append({"sample_id": Path(r.path).name, "label": r.label,
                     **{c: float(v) for c, v in zip(ckpt.labels, z)}})
    return rows
