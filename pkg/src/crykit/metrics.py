"""Evaluation: confusion matrix, macro-F1, NLL, seed-sweep aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LabelError

NLL_FLOOR = 1e-12


@dataclass
class ConfusionMatrix:
    """Row = true class, column = predicted class."""

    counts: np.ndarray
    classes: list[str]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = len(self.classes)
        if self.counts.shape != (c, c):
            raise ConfigError(f"counts must be ({c}, {c}), got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ConfigError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes: list[str]) -> "ConfusionMatrix":
        index = {name: i for i, name in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for t, p in zip(y_true, y_pred):
            if t not in index or p not in index:
                raise LabelError(f"label outside class list: {t!r} / {p!r}")
            counts[index[t], index[p]] += 1
        return cls(counts=counts, classes=list(classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def per_class_prf(cm: ConfusionMatrix) -> dict[str, dict[str, float]]:
    """Precision/recall/F1 per class; zero denominators yield zero."""
    out = {}
    for i, name in enumerate(cm.classes):
        tp = float(cm.counts[i, i])
        pred = float(cm.counts[:, i].sum())
        true = float(cm.counts[i, :].sum())
        p = tp / pred if pred > 0 else 0.0
        r = tp / true if true > 0 else 0.0
        f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        out[name] = {"precision": p, "recall": r, "f1": f1, "support": int(true)}
    return out


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean F1; classes absent from both axes are skipped."""
    if len(cm.classes) < 2:
        raise ConfigError("macro-F1 needs at least 2 classes")
    prf = per_class_prf(cm)
    scores = []
    for i, name in enumerate(cm.classes):
        if cm.counts[i, :].sum() == 0 and cm.counts[:, i].sum() == 0:
            continue
        scores.append(prf[name]["f1"])
    return float(np.mean(scores)) if scores else 0.0


def accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts) / cm.total) if cm.total else 0.0


def nll(probs: np.ndarray, labels) -> float:
    """Mean negative log probability of the true labels, floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(labels) != len(probs):
        raise ConfigError(f"probs ({probs.shape}) and labels ({labels.shape}) disagree")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ConfigError("probability rows must sum to 1")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise LabelError("label index out of range")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, NLL_FLOOR)).mean())


def seed_sweep(eval_fn, seeds) -> dict:
    """Run eval_fn(seed) -> {metric: value} per seed; report mean +- sample std."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("seed sweep needs at least 2 seeds")
    per_seed = []
    for seed in seeds:
        metrics = eval_fn(seed)
        per_seed.append({"seed": seed, **metrics})
    names = [k for k in per_seed[0] if k != "seed"]
    mean = {k: float(np.mean([row[k] for row in per_seed])) for k in names}
    std = {k: float(np.std([row[k] for row in per_seed], ddof=1)) for k in names}
    return {"seeds": seeds, "per_seed": per_seed, "mean": mean, "std": std}


def evaluation_report(y_true, y_pred, classes, probs=None, labels_idx=None) -> dict:
    """Bundle the standard metrics into one JSON-serializable report."""
    cm = ConfusionMatrix.from_predictions(y_true, y_pred, classes)
    report = {
        "classes": list(classes),
        "confusion_matrix": cm.counts.tolist(),
        "per_class": per_class_prf(cm),
        "macro_f1": macro_f1(cm),
        "accuracy": accuracy(cm),
        "n_samples": cm.total,
    }
    if probs is not None and labels_idx is not None:
        report["nll"] = nll(probs, labels_idx)
    return report
