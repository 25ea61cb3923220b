"""Calibrated posterior fusion across two domain-specific classifiers.

Each model is temperature-calibrated on its own validation split. At
inference both posteriors are projected into the union label space:
classes unique to one domain are inserted directly as log-posteriors, the
shared class is mixed by entropy-gated weights via log-sum-exp (or a
product-of-experts variant), and a final softmax normalizes the union.

Union entries are per-model log-posteriors rather than raw pre-softmax
logits: raw logits from independently trained models carry arbitrary
per-model shifts, which would make a cross-model log-sum-exp ill-posed.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .autodiff import log_softmax_values, softmax_values
from .errors import CalibrationError, CaseStudyFailure, ConfigError, IoError

TEMPERATURE_BOUNDS = (0.05, 20.0)
LOG_T_TOL = 1e-4
_LOG_FLOOR = 1e-300  # keeps log(0) at a huge negative instead of -inf warnings


@dataclass
class LabelSpace:
    """Two domain label lists and their union.

    Union order: classes only in the first domain (in its order), then
    classes only in the second, then the shared classes (first domain's
    order)."""

    first: list[str]
    second: list[str]

    def __post_init__(self):
        if len(set(self.first)) != len(self.first) or len(set(self.second)) != len(self.second):
            raise ConfigError("domain label lists must not repeat labels")
        shared = [c for c in self.first if c in self.second]
        self.shared: list[str] = shared
        self.union: list[str] = (
            [c for c in self.first if c not in self.second]
            + [c for c in self.second if c not in self.first]
            + shared
        )
        self._union_idx = {c: i for i, c in enumerate(self.union)}
        self.first_to_union = [self._union_idx[c] for c in self.first]
        self.second_to_union = [self._union_idx[c] for c in self.second]

    def union_index(self, label: str) -> int:
        if label not in self._union_idx:
            raise ConfigError(f"label {label!r} not in the union space")
        return self._union_idx[label]


@dataclass
class FusionConfig:
    tau: float = 1.0  # entropy-gate sharpness, nats
    mode: str = "lse"  # or "poe"

    def __post_init__(self):
        if not math.isfinite(self.tau) or self.tau < 0:
            raise ConfigError("tau must be finite and non-negative")
        if self.mode not in ("lse", "poe"):
            raise ConfigError(f"mode must be lse or poe, got {self.mode!r}")


# -- temperature calibration ----------------------------------------------------


def nll_at_temperature(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    logp = log_softmax_values(np.asarray(logits, dtype=np.float64) / temperature)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _golden_section(fn, lo: float, hi: float, tol: float) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return (a + b) / 2.0


def fit_temperature(logits: np.ndarray, labels) -> tuple[float, dict]:
    """Golden-section search of the NLL over log-temperature.

    Returns (temperature, info) with the before/after NLL. Widens the
    bracket once (with a warning) if the minimizer lands on an edge."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(labels) != len(logits):
        raise ConfigError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if n < 10:
        raise CalibrationError(f"need at least 10 validation samples, got {n}")
    present = set(labels.tolist())
    if present != set(range(c)):
        missing = sorted(set(range(c)) - present)
        raise CalibrationError(f"validation labels missing classes {missing}")
    spread = logits.max(axis=1) - logits.min(axis=1)
    if np.all(spread < 1e-12):
        raise CalibrationError("degenerate logits: every row is constant")

    def objective(log_t: float) -> float:
        return nll_at_temperature(logits, labels, math.exp(log_t))

    lo, hi = math.log(TEMPERATURE_BOUNDS[0]), math.log(TEMPERATURE_BOUNDS[1])
    log_t = _golden_section(objective, lo, hi, LOG_T_TOL)
    if min(log_t - lo, hi - log_t) < 3 * LOG_T_TOL:
        widened_lo, widened_hi = lo - math.log(4.0), hi + math.log(4.0)
        warnings.warn(
            f"temperature minimizer at bracket edge (T={math.exp(log_t):.3g}); widening once",
        )
        log_t = _golden_section(objective, widened_lo, widened_hi, LOG_T_TOL)
    temperature = math.exp(log_t)
    nll_before = nll_at_temperature(logits, labels, 1.0)
    nll_after = nll_at_temperature(logits, labels, temperature)
    if nll_before < nll_after:  # unimodality violated; 1.0 is inside the bracket
        temperature, nll_after = 1.0, nll_before
    return temperature, {"nll_before": nll_before, "nll_after": nll_after}


def calibrate_posterior(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / T), max-shifted for stability."""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    return softmax_values(np.asarray(logits, dtype=np.float64) / temperature)


# -- entropy gating ---------------------------------------------------------------


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats with 0 * ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-6:
        raise ConfigError("entropy needs a probability vector")
    masked = np.where(p > 0, p, 1.0)
    return float(-(p * np.log(masked)).sum())


def entropy_weights(p_first: np.ndarray, p_second: np.ndarray, tau: float) -> tuple[float, float]:
    """w_m proportional to exp(-tau * H(p_m)), normalized to sum to 1."""
    h1, h2 = entropy(p_first), entropy(p_second)
    # stable two-way softmax over (-tau * H)
    a = -tau * h1
    b = -tau * h2
    m = max(a, b)
    e1, e2 = math.exp(a - m), math.exp(b - m)
    return e1 / (e1 + e2), e2 / (e1 + e2)


# -- fusion -----------------------------------------------------------------------


def posterior_to_logits(posterior: np.ndarray) -> np.ndarray:
    """Canonical logits of a posterior (its log); zeros become huge negatives."""
    p = np.asarray(posterior, dtype=np.float64)
    return np.log(np.maximum(p, _LOG_FLOOR))


def fuse_union(logits_first: np.ndarray | None, logits_second: np.ndarray | None,
               temperatures: tuple[float, float], space: LabelSpace,
               cfg: FusionConfig | None = None) -> np.ndarray:
    """Fused posterior over the union label space for one sample.

    Either model may be absent (None); the ensemble then reduces to the
    other model's calibrated posterior over the union."""
    cfg = cfg or FusionConfig()
    if logits_first is None and logits_second is None:
        raise ConfigError("at least one model's logits are required")

    z = np.full(len(space.union), -np.inf)
    posteriors = []
    logps = []
    for logits, labels, mapping, temp in (
        (logits_first, space.first, space.first_to_union, temperatures[0]),
        (logits_second, space.second, space.second_to_union, temperatures[1]),
    ):
        if logits is None:
            posteriors.append(None)
            logps.append(None)
            continue
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (len(labels),):
            raise ConfigError(f"expected {len(labels)} logits, got {logits.shape}")
        if temp <= 0:
            raise ConfigError("temperature must be positive")
        scaled = logits / temp
        logp = log_softmax_values(scaled)
        posteriors.append(np.exp(logp))
        logps.append(logp)

    shared = set(space.shared)
    for m, (labels, mapping) in enumerate(((space.first, space.first_to_union),
                                           (space.second, space.second_to_union))):
        if logps[m] is None:
            continue
        for i, label in enumerate(labels):
            if label in shared and posteriors[0] is not None and posteriors[1] is not None:
                continue  # handled by the fusion rule below
            z[mapping[i]] = logps[m][i]

    if posteriors[0] is not None and posteriors[1] is not None and shared:
        w1, w2 = entropy_weights(posteriors[0], posteriors[1], cfg.tau)
        for label in space.shared:
            i1 = space.first.index(label)
            i2 = space.second.index(label)
            if cfg.mode == "lse":
                z[space.union_index(label)] = np.logaddexp(
                    math.log(max(w1, _LOG_FLOOR)) + logps[0][i1],
                    math.log(max(w2, _LOG_FLOOR)) + logps[1][i2],
                )
            else:  # product of experts: sum of log-posteriors
                z[space.union_index(label)] = logps[0][i1] + logps[1][i2]

    if np.all(np.isinf(z)):
        raise ConfigError("no class received any mass")
    finite_max = z[np.isfinite(z)].max()
    expz = np.exp(np.where(np.isfinite(z), z - finite_max, -np.inf))
    return expz / expz.sum()


def fuse_tables(logits_first: np.ndarray | None, logits_second: np.ndarray | None,
                temperatures: tuple[float, float], space: LabelSpace,
                cfg: FusionConfig | None = None) -> np.ndarray:
    """Row-wise fusion of aligned (N, C1) / (N, C2) logit tables."""
    n = len(logits_first) if logits_first is not None else len(logits_second)
    out = np.zeros((n, len(space.union)))
    for i in range(n):
        out[i] = fuse_union(
            None if logits_first is None else logits_first[i],
            None if logits_second is None else logits_second[i],
            temperatures, space, cfg,
        )
    return out


# -- logit tables -----------------------------------------------------------------


def write_logit_table(path: Path | str, rows: list[dict], classes: list[str]) -> None:
    """CSV with header sample_id,label,<class logits...>."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label"] + list(classes))
        for row in rows:
            writer.writerow([row["sample_id"], row["label"]] + [f"{row[c]:.8g}" for c in classes])


def read_logit_table(path: Path | str) -> tuple[list[str], list[str], list[str], np.ndarray]:
    """Returns (sample_ids, labels, classes, logits)."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"logit table {path} not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["sample_id", "label"]:
            raise ConfigError(f"{path}: expected header sample_id,label,<classes>")
        classes = header[2:]
        ids, labels, rows = [], [], []
        for row in reader:
            ids.append(row[0])
            labels.append(row[1])
            rows.append([float(v) for v in row[2:]])
    return ids, labels, classes, np.asarray(rows, dtype=np.float64)


# -- bundled case studies -----------------------------------------------------------


def load_case_fixture(path: Path | str | None = None) -> dict:
    if path is not None:
        return json.loads(Path(path).read_text())
    return json.loads(resources.files("crykit.fixtures").joinpath("case_studies.json").read_text())


def _vector_from(posterior: dict, labels: list[str]) -> np.ndarray:
    extra = set(posterior) - set(labels)
    if extra:
        raise ConfigError(f"case posterior names unknown labels {sorted(extra)}")
    return np.array([posterior.get(c, 0.0) for c in labels], dtype=np.float64)


def run_case_studies(tau: float = 1.0, mode: str = "lse",
                     fixture_path: Path | str | None = None) -> list[dict]:
    """Replay the bundled fusion scenarios; raises CaseStudyFailure on any
    argmax mismatch (including the documented failure case's outcome)."""
    fixture = load_case_fixture(fixture_path)
    space = LabelSpace(first=fixture["label_space"]["first"],
                       second=fixture["label_space"]["second"])
    cfg = FusionConfig(tau=tau, mode=mode)
    results = []
    mismatches = []
    for case in fixture["cases"]:
        p1 = _vector_from(case["first_posterior"], space.first)
        p2 = _vector_from(case["second_posterior"], space.second)
        z1, z2 = posterior_to_logits(p1), posterior_to_logits(p2)
        t1, t2 = case.get("temperatures", [1.0, 1.0])
        fused = fuse_union(z1, z2, (t1, t2), space, cfg)
        uncal = fuse_union(z1, z2, (1.0, 1.0), space, cfg)
        got = space.union[int(np.argmax(fused))]
        got_uncal = space.union[int(np.argmax(uncal))]
        ok = got == case["expected"]
        if "expected_uncalibrated" in case:
            ok = ok and got_uncal == case["expected_uncalibrated"]
        result = {
            "name": case["name"],
            "expected": case["expected"],
            "fused_argmax": got,
            "uncalibrated_argmax": got_uncal,
            "fused_posterior": {c: round(float(v), 4) for c, v in zip(space.union, fused)},
            "is_failure_case": bool(case.get("is_failure", False)),
            "true_label": case.get("true_label", case["expected"]),
            "ok": ok,
        }
        results.append(result)
        if not ok:
            mismatches.append(case["name"])
    if mismatches:
        raise CaseStudyFailure(f"case studies diverged: {mismatches}")
    return results


# -- ensemble descriptor --------------------------------------------------------------


@dataclass
class EnsembleMember:
    labels: list[str]
    temperature: float = 1.0
    checkpoint: str | None = None
    logit_table: str | None = None
    nll_before: float | None = None
    nll_after: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class EnsembleDescriptor:
    members: list[EnsembleMember]
    tau: float = 1.0
    mode: str = "lse"
    config_hash: str | None = None

    def __post_init__(self):
        if not 1 <= len(self.members) <= 2:
            raise ConfigError("an ensemble holds one or two members")

    def label_space(self) -> LabelSpace:
        if len(self.members) == 1:
            return LabelSpace(first=self.members[0].labels, second=[])
        return LabelSpace(first=self.members[0].labels, second=self.members[1].labels)

    def save(self, path: Path | str) -> None:
        payload = {
            "format": "crykit-ensemble-v1",
            "tau": self.tau,
            "mode": self.mode,
            "config_hash": self.config_hash,
            "members": [m.to_dict() for m in self.members],
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: Path | str) -> "EnsembleDescriptor":
        path = Path(path)
        if not path.exists():
            raise IoError(f"ensemble descriptor {path} not found")
        payload = json.loads(path.read_text())
        members = [EnsembleMember(
            labels=list(m["labels"]),
            temperature=m.get("temperature", 1.0),
            checkpoint=m.get("checkpoint"),
            logit_table=m.get("logit_table"),
            nll_before=m.get("nll_before"),
            nll_after=m.get("nll_after"),
        ) for m in payload["members"]]
        return cls(members=members, tau=payload.get("tau", 1.0),
                   mode=payload.get("mode", "lse"), config_hash=payload.get("config_hash"))
