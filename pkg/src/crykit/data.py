"""Manifests, filename parsing, leakage-safe group splits, synthetic corpus.

Splits are assigned to whole groups (baby or session identities), never to
individual clips, so no group can straddle train/val/test.
"""

from __future__ import annotations

import csv
import json
import re
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .audio import TARGET_SR, load_wav, save_wav_pcm16
from .errors import ConfigError, DataError, IoError, NamingError, SplitError, StratifyWarning

SPLITS = ("train", "val", "test")

_BABY2020_NAME = re.compile(r"^[A-Za-z]+[A-Za-z0-9]*_[0-9]+_[0-9]+\.wav$")


@dataclass
class SampleRecord:
    path: str
    label: str
    group: str
    split: str = "unassigned"
    duration_s: float = 0.0
    feature_path: str | None = None

    def to_json(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None}
        return out


@dataclass
class SplitSpec:
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError("fractions must be three positive numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-6:
            raise ConfigError(f"fractions must sum to 1, got {sum(self.fractions)}")


# -- manifest I/O -------------------------------------------------------------


def read_manifest(path: Path | str) -> list[SampleRecord]:
    path = Path(path)
    if not path.exists():
        raise IoError(f"manifest {path} not found")
    records = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        row = json.loads(line)
        records.append(SampleRecord(
            path=row["path"], label=row["label"], group=row["group"],
            split=row.get("split", "unassigned"),
            duration_s=row.get("duration_s", 0.0),
            feature_path=row.get("feature_path"),
        ))
    return records


def write_manifest(path: Path | str, records: list[SampleRecord]) -> None:
    lines = [json.dumps(r.to_json(), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# -- naming -------------------------------------------------------------------


def parse_baby2020_name(filename: str) -> tuple[str, str]:
    """Label and group key from names like `Hungry04MB00011_2_002.wav`.

    The label is the leading alphabetic run; the group key is the rest of
    the first underscore-delimited token, which identifies the recording.
    Segment indices are dropped so every segment of a recording shares a
    group.
    """
    base = Path(filename).name
    if not _BABY2020_NAME.match(base):
        raise NamingError(f"{base!r} does not match the expected naming convention")
    token = base.split("_", 1)[0]
    m = re.match(r"^[A-Za-z]+", token)
    label = m.group(0)
    group = token[len(label):]
    if not group:
        raise NamingError(f"{base!r} has no recording identity after the label")
    return label, group


# -- splitting ----------------------------------------------------------------


def group_split(records: list[SampleRecord], spec: SplitSpec) -> list[SampleRecord]:
    """Assign whole groups to train/val/test, greedily chasing the target
    sample fractions (per class when stratifying). Mutates and returns the
    records."""
    groups: dict[str, list[SampleRecord]] = {}
    for r in records:
        if not r.group:
            raise DataError(f"record {r.path} has an empty group key")
        groups.setdefault(r.group, []).append(r)
    if len(groups) < 3:
        raise SplitError(f"need at least 3 distinct groups, found {len(groups)}")

    names = sorted(groups)
    rng = np.random.default_rng(spec.seed)
    order = [names[i] for i in rng.permutation(len(names))]
    classes = sorted({r.label for r in records})
    class_idx = {c: i for i, c in enumerate(classes)}
    fractions = np.asarray(spec.fractions)

    if spec.stratify:
        class_totals = np.zeros(len(classes))
        for r in records:
            class_totals[class_idx[r.label]] += 1
        targets = fractions[:, None] * class_totals[None, :]  # (split, class)
        assigned = np.zeros_like(targets)
        for name in order:
            hist = np.zeros(len(classes))
            for r in groups[name]:
                hist[class_idx[r.label]] += 1
            scores = ((targets - assigned) * hist[None, :]).sum(axis=1)
            dest = int(np.argmax(scores))
            assigned[dest] += hist
            for r in groups[name]:
                r.split = SPLITS[dest]
        for s, split in enumerate(SPLITS):
            for c, cls in enumerate(classes):
                if class_totals[c] > 0 and assigned[s, c] == 0:
                    warnings.warn(f"class {cls!r} absent from split {split!r}", StratifyWarning)
    else:
        total = float(len(records))
        targets = fractions * total
        assigned = np.zeros(3)
        for name in order:
            dest = int(np.argmax(targets - assigned))
            assigned[dest] += len(groups[name])
            for r in groups[name]:
                r.split = SPLITS[dest]
    return records


def verify_no_leakage(records: list[SampleRecord]) -> list[str]:
    """Group keys that appear in more than one assigned split (empty = pass)."""
    seen: dict[str, set[str]] = {}
    for r in records:
        if r.split in SPLITS:
            seen.setdefault(r.group, set()).add(r.split)
    return sorted(g for g, splits in seen.items() if len(splits) > 1)


# -- synthetic corpus ----------------------------------------------------------


@dataclass
class ClassContour:
    base_hz: float
    slope_hz_per_s: float = 0.0
    vibrato_hz: float = 10.0


@dataclass
class SynthSpec:
    """Cry-like harmonic sources with class-specific pitch contours."""

    labels: tuple[str, ...] = ("low", "mid", "high")
    contours: tuple[ClassContour, ...] = (
        ClassContour(250.0, 10.0), ClassContour(350.0, 0.0), ClassContour(450.0, -10.0),
    )
    clips_per_class: int = 40
    babies_per_class: int = 10
    clip_seconds: tuple[float, float] = (1.5, 4.0)
    harmonics: int = 6
    am_rate_hz: float = 3.0
    vibrato_rate_hz: float = 5.0
    snr_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if len(self.labels) != len(self.contours):
            raise ConfigError("labels and contours must pair up")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("labels must be distinct")
        bases = [c.base_hz for c in self.contours]
        if len(set(bases)) != len(bases):
            raise ConfigError("class contours must be distinct")
        lo, hi = self.clip_seconds
        if not (1.0 <= lo <= hi <= 30.0):
            raise ConfigError("clip_seconds must lie within [1, 30]")
        if self.babies_per_class < 1 or self.clips_per_class < 1:
            raise ConfigError("need at least one baby and one clip per class")


def _synth_clip(rng: np.random.Generator, contour: ClassContour, spec: SynthSpec,
                seconds: float, baby_offset_hz: float) -> np.ndarray:
    n = int(seconds * TARGET_SR)
    t = np.arange(n) / TARGET_SR
    f0 = (
        contour.base_hz
        + baby_offset_hz
        + contour.slope_hz_per_s * (t - seconds / 2.0)
        + contour.vibrato_hz * np.sin(2 * np.pi * spec.vibrato_rate_hz * t + rng.uniform(0, 2 * np.pi))
    )
    phase = 2 * np.pi * np.cumsum(f0) / TARGET_SR
    sig = np.zeros(n)
    for k in range(1, spec.harmonics + 1):
        sig += np.sin(k * phase) / k
    am = 0.2 + 0.8 * (0.5 + 0.5 * np.sin(2 * np.pi * spec.am_rate_hz * t + rng.uniform(0, 2 * np.pi)))
    sig *= am
    sig *= 0.5 / np.abs(sig).max()
    noise_rms = np.sqrt(np.mean(sig**2)) * 10.0 ** (-spec.snr_db / 20.0)
    sig += rng.normal(0.0, noise_rms, n)
    return sig


def synth_corpus(spec: SynthSpec, out_dir: Path | str) -> list[SampleRecord]:
    """Generate WAVs + `labels.csv` + manifest rows under `out_dir`.

    Each synthetic baby contributes several clips so group splitting has
    real work to do."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    records: list[SampleRecord] = []
    idx = 0
    for label, contour in zip(spec.labels, spec.contours):
        baby_offsets = rng.normal(0.0, 5.0, spec.babies_per_class)
        for k in range(spec.clips_per_class):
            baby = k % spec.babies_per_class
            seconds = rng.uniform(*spec.clip_seconds)
            sig = _synth_clip(rng, contour, spec, seconds, baby_offsets[baby])
            name = f"clip{idx:04d}.wav"
            save_wav_pcm16(out_dir / name, sig, TARGET_SR)
            records.append(SampleRecord(
                path=str(out_dir / name), label=label,
                group=f"{label}-baby{baby:02d}",
                duration_s=round(seconds, 3),
            ))
            idx += 1
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label", "group"])
        for r in records:
            writer.writerow([Path(r.path).name, r.label, r.group])
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


# -- manifest building ----------------------------------------------------------


def build_manifest(root: Path | str, dataset: str = "baby2020") -> tuple[list[SampleRecord], list[str]]:
    """Scan a directory of WAVs into manifest records.

    baby2020 mode parses the naming convention (non-matching names land in
    the returned quarantine list); generic mode requires a `labels.csv`
    sidecar with filename,label,group columns.
    """
    root = Path(root)
    wavs = sorted(root.rglob("*.wav"))
    names = [p.name for p in wavs]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise DataError(f"duplicate filenames in corpus: {sorted(dupes)[:5]}")

    records: list[SampleRecord] = []
    quarantine: list[str] = []
    if dataset == "baby2020":
        for p in wavs:
            try:
                label, group = parse_baby2020_name(p.name)
            except NamingError:
                quarantine.append(str(p))
                continue
            records.append(SampleRecord(
                path=str(p), label=label, group=group,
                duration_s=round(load_wav(p).duration_s(), 3),
            ))
    elif dataset == "generic":
        sidecar = root / "labels.csv"
        if not sidecar.exists():
            raise IoError(f"generic mode needs {sidecar}")
        by_name = {p.name: p for p in wavs}
        with open(sidecar, newline="") as fh:
            for row in csv.DictReader(fh):
                p = by_name.get(row["filename"])
                if p is None:
                    quarantine.append(row["filename"])
                    continue
                records.append(SampleRecord(
                    path=str(p), label=row["label"], group=row["group"],
                    duration_s=round(load_wav(p).duration_s(), 3),
                ))
    else:
        raise ConfigError(f"unknown dataset mode {dataset!r}")
    return records, quarantine
