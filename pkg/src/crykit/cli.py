"""Command-line entry point wiring the pipeline together.

Exit codes: 0 ok, 2 partial extraction failure, 3 split/leakage, 4
calibration or fusion config, 5 evaluation input, 6 case-study mismatch.
"""

from __future__ import annotations

import csv
import json
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import click
import numpy as np

from . import __version__
from .audio import TARGET_SR, load_wav, resample_to_16k
from .data import (
    SampleRecord,
    SplitSpec,
    SynthSpec,
    build_manifest,
    group_split,
    read_manifest,
    synth_corpus,
    verify_no_leakage,
    write_manifest,
)
from .errors import (
    CalibrationError,
    CaseStudyFailure,
    ConfigError,
    CrykitError,
    DataError,
    IoError,
    LeakageError,
    SplitError,
)
from .featio import config_hash, cryf_sidecar_path, default_meta, read_cryf, write_cryf
from .features import (
    FeatureConfig,
    MODALITIES,
    fuse_features,
    median_frame_count,
    pitch_sidecar_path,
    read_pitch_sidecar,
)
from .fusion import (
    EnsembleDescriptor,
    EnsembleMember,
    FusionConfig,
    LabelSpace,
    fit_temperature,
    fuse_union,
    read_logit_table,
    run_case_studies,
    write_logit_table,
)
from .metrics import evaluation_report, seed_sweep
from .model import ModelConfig
from .train import (
    TrainConfig,
    load_checkpoint,
    load_features,
    predict_logit_rows,
    save_checkpoint,
    train,
)

EXIT_PARTIAL = 2
EXIT_SPLIT = 3
EXIT_FUSION = 4
EXIT_EVAL = 5
EXIT_CASES = 6

CONFIG_SECTIONS = {
    "features": FeatureConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "split": SplitSpec,
    "fusion": FusionConfig,
    "synth": SynthSpec,
}


def load_run_config(path: str | None) -> dict:
    """Parse the JSON run config; unknown sections or keys are rejected."""
    if path is None:
        return {}
    raw = json.loads(Path(path).read_text())
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    for section, cls in CONFIG_SECTIONS.items():
        if section not in raw:
            continue
        allowed = {f.name for f in fields(cls)}
        bad = set(raw[section]) - allowed
        if bad:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
    return raw


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.version_option(__version__)
def main():
    """Infant-cry classification pipeline: features, training, fusion."""


# -- synth ----------------------------------------------------------------------


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--clips-per-class", default=40, show_default=True)
@click.option("--babies-per-class", default=10, show_default=True)
@click.option("--snr-db", default=20.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def synth(out_dir, clips_per_class, babies_per_class, snr_db, seed, config_path):
    """Generate a synthetic cry-like corpus with a manifest."""
    overrides = load_run_config(config_path).get("synth", {})
    if "contours" in overrides:
        from .data import ClassContour

        overrides["contours"] = tuple(ClassContour(**c) for c in overrides["contours"])
    if "labels" in overrides:
        overrides["labels"] = tuple(overrides["labels"])
    if "clip_seconds" in overrides:
        overrides["clip_seconds"] = tuple(overrides["clip_seconds"])
    spec = SynthSpec(
        clips_per_class=clips_per_class, babies_per_class=babies_per_class,
        snr_db=snr_db, seed=seed, **overrides,
    )
    records = synth_corpus(spec, out_dir)
    click.echo(f"wrote {len(records)} clips to {out_dir} (manifest.jsonl, labels.csv)")


# -- extract --------------------------------------------------------------------


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--features", "subset", default=None,
              help="comma list from mfcc,stft,f0,wave; others zeroed")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--recompute-frames", is_flag=True,
              help="use the manifest's median frame count instead of 233")
def extract(manifest_path, out_dir, subset, config_path, recompute_frames):
    """Extract fused feature tensors for every manifest record."""
    cfg_kwargs = dict(load_run_config(config_path).get("features", {}))
    if subset:
        cfg_kwargs["subset"] = tuple(s.strip() for s in subset.split(",") if s.strip())
    elif "subset" in cfg_kwargs:
        cfg_kwargs["subset"] = tuple(cfg_kwargs["subset"])
    records = read_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if recompute_frames:
        lengths = []
        for r in records:
            clip = load_wav(r.path)
            if clip.sample_rate != TARGET_SR:
                clip = resample_to_16k(clip)
            lengths.append(len(clip.samples))
        t = median_frame_count(lengths)
        if t != 233:
            warnings.warn(f"manifest median frame count {t} differs from the fixed default 233")
        cfg_kwargs["n_frames"] = t
    cfg = FeatureConfig(**cfg_kwargs)
    cfg_hash = config_hash({"features": cfg.to_dict(), "tool": __version__})

    failures = []
    for r in records:
        target = out_dir / (Path(r.path).stem + ".cryf")
        sidecar = cryf_sidecar_path(target)
        if target.exists() and sidecar.exists():
            meta = json.loads(sidecar.read_text())
            if meta.get("config_hash") == cfg_hash:
                r.feature_path = str(target)
                continue  # already extracted with this exact config
        try:
            clip = load_wav(r.path)
            if clip.sample_rate != TARGET_SR:
                clip = resample_to_16k(clip)
            pitch = None
            side = pitch_sidecar_path(r.path)
            if side.exists():
                pitch = read_pitch_sidecar(side)
            tensor = fuse_features(clip, cfg, pitch_track=pitch)
            meta = default_meta(r.path, TARGET_SR, clip.duration_s(), cfg_hash)
            meta["tool_version"] = __version__
            write_cryf(target, tensor, meta)
            r.feature_path = str(target)
        except CrykitError as exc:
            failures.append((r.path, str(exc)))
    write_manifest(out_dir / "manifest.jsonl", records)
    done = sum(1 for r in records if r.feature_path)
    click.echo(f"extracted {done}/{len(records)} -> {out_dir} (manifest.jsonl updated)")
    if failures:
        for path, msg in failures:
            click.echo(f"failed: {path}: {msg}", err=True)
        sys.exit(EXIT_PARTIAL)


# -- split ----------------------------------------------------------------------


@main.command()
@click.option("--manifest", "manifest_path", default=None, type=click.Path())
@click.option("--in", "in_dir", default=None, type=click.Path(exists=True),
              help="build the manifest from this audio directory first")
@click.option("--dataset", default="baby2020", type=click.Choice(["baby2020", "generic"]))
@click.option("--fractions", default="0.7,0.1,0.2", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--no-stratify", is_flag=True)
def split(manifest_path, in_dir, dataset, fractions, seed, no_stratify):
    """Assign leakage-safe train/val/test splits to whole groups."""
    if manifest_path is None:
        _fail(EXIT_SPLIT, "--manifest is required (it is created when --in is given)")
    try:
        if in_dir is not None:
            records, quarantine = build_manifest(in_dir, dataset=dataset)
            if quarantine:
                click.echo(f"quarantined {len(quarantine)} files with unparseable names", err=True)
        else:
            records = read_manifest(manifest_path)
        fracs = tuple(float(v) for v in fractions.split(","))
        spec = SplitSpec(fractions=fracs, seed=seed, stratify=not no_stratify)
        group_split(records, spec)
        violations = verify_no_leakage(records)
        if violations:
            _fail(EXIT_SPLIT, f"leakage after split (bug): {violations[:5]}")
        write_manifest(manifest_path, records)
    except (SplitError, DataError, ConfigError, IoError) as exc:
        _fail(EXIT_SPLIT, str(exc))
    counts = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    click.echo(f"split {len(records)} samples: {counts} (seed {seed})")


# -- train ----------------------------------------------------------------------


@main.command(name="train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--cell", default=None, type=click.Choice(["lmu", "lstm", "none"]))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--seed", default=None, type=int)
@click.option("--lr", default=None, type=float)
@click.option("--batch-size", default=None, type=int)
@click.option("--max-epochs", default=None, type=int)
@click.option("--patience", default=None, type=int)
def train_cmd(manifest_path, out_dir, cell, config_path, seed, lr, batch_size,
              max_epochs, patience):
    """Train an encoder + cell classifier on the manifest's train split."""
    run_cfg = load_run_config(config_path)
    model_kwargs = dict(run_cfg.get("model", {}))
    for key in ("feature_subset", "filters", "kernel", "pool"):
        if key in model_kwargs:
            model_kwargs[key] = tuple(model_kwargs[key])
    if cell is not None:
        model_kwargs["cell"] = cell
    train_kwargs = dict(run_cfg.get("train", {}))
    for name, value in (("seed", seed), ("lr", lr), ("batch_size", batch_size),
                        ("max_epochs", max_epochs), ("patience", patience)):
        if value is not None:
            train_kwargs[name] = value
    try:
        records = read_manifest(manifest_path)
        model_cfg = ModelConfig(**model_kwargs)
        train_cfg = TrainConfig(**train_kwargs)
        ckpt, report = train(records, model_cfg, train_cfg,
                             log=lambda e: click.echo(
                                 f"epoch {e['epoch']}: loss={e['train_loss']:.4f} "
                                 f"val_macro_f1={e['val_macro_f1']:.4f}"))
        save_checkpoint(ckpt, out_dir, report)
    except LeakageError as exc:
        _fail(EXIT_SPLIT, str(exc))
    except (DataError, ConfigError, IoError) as exc:
        _fail(EXIT_SPLIT, str(exc))
    click.echo(f"best val macro-F1: {ckpt.best_val_macro_f1:.4f} -> {out_dir}")


# -- calibrate -------------------------------------------------------------------


@main.command()
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--split", "split_name", default="val", show_default=True)
@click.option("--tau", default=1.0, show_default=True)
@click.option("--mode", default="lse", type=click.Choice(["lse", "poe"]))
def calibrate(ckpt_dir, manifest_path, out_path, split_name, tau, mode):
    """Fit a temperature on validation logits and add the model to an
    ensemble descriptor (run once per model with the same --out)."""
    try:
        ckpt = load_checkpoint(ckpt_dir)
        records = [r for r in read_manifest(manifest_path) if r.split == split_name]
        if not records:
            raise CalibrationError(f"no records in split {split_name!r}")
        logits = ckpt.predict_logits(load_features(records))
        label_idx = {c: i for i, c in enumerate(ckpt.labels)}
        unknown = [r.label for r in records if r.label not in label_idx]
        if unknown:
            raise CalibrationError(f"validation labels outside the model space: {unknown[:3]}")
        labels = np.array([label_idx[r.label] for r in records])
        temperature, info = fit_temperature(logits, labels)

        member = EnsembleMember(
            labels=ckpt.labels, temperature=float(temperature),
            checkpoint=str(Path(ckpt_dir).resolve()),
            nll_before=info["nll_before"], nll_after=info["nll_after"],
        )
        out = Path(out_path)
        if out.exists():
            desc = EnsembleDescriptor.load(out)
            desc.members = [m for m in desc.members if m.checkpoint != member.checkpoint]
            if len(desc.members) >= 2:
                raise ConfigError("ensemble already holds two other models")
            desc.members.append(member)
            desc.tau, desc.mode = tau, mode
        else:
            desc = EnsembleDescriptor(members=[member], tau=tau, mode=mode)
        desc.config_hash = config_hash({
            "members": [m.to_dict() for m in desc.members],
            "tau": desc.tau, "mode": desc.mode, "tool": __version__,
        })
        desc.save(out)
    except CalibrationError as exc:
        _fail(EXIT_FUSION, str(exc))
    except (ConfigError, IoError, DataError) as exc:
        _fail(EXIT_FUSION, str(exc))
    click.echo(
        f"T={temperature:.4f} nll {info['nll_before']:.4f} -> {info['nll_after']:.4f}; "
        f"ensemble now has {len(desc.members)} member(s) at {out_path}"
    )


# -- fuse ------------------------------------------------------------------------


def _member_logits(member: EnsembleMember, records: list[SampleRecord]) -> np.ndarray:
    if member.checkpoint:
        ckpt = load_checkpoint(member.checkpoint)
        if ckpt.labels != member.labels:
            raise ConfigError(f"labels in {member.checkpoint} changed since calibration")
        return ckpt.predict_logits(load_features(records))
    if member.logit_table:
        ids, _, classes, logits = read_logit_table(member.logit_table)
        if classes != member.labels:
            raise ConfigError(f"logit table classes {classes} != member labels")
        by_id = {s: i for i, s in enumerate(ids)}
        rows = []
        for r in records:
            key = Path(r.path).name
            if key not in by_id:
                raise IoError(f"sample {key} missing from logit table")
            rows.append(logits[by_id[key]])
        return np.asarray(rows)
    raise ConfigError("ensemble member has neither checkpoint nor logit table")


@main.command()
@click.option("--ensemble", "ensemble_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--split", "split_name", default="test", show_default=True)
@click.option("--tau", default=None, type=float, help="override the descriptor's tau")
@click.option("--mode", default=None, type=click.Choice(["lse", "poe"]))
def fuse(ensemble_path, manifest_path, out_path, split_name, tau, mode):
    """Fuse calibrated posteriors over the union label space for a split."""
    try:
        desc = EnsembleDescriptor.load(ensemble_path)
        records = [r for r in read_manifest(manifest_path) if r.split == split_name]
        if not records:
            raise ConfigError(f"no records in split {split_name!r}")
        cfg = FusionConfig(tau=desc.tau if tau is None else tau,
                           mode=desc.mode if mode is None else mode)
        space = desc.label_space()
        member_logits = [_member_logits(m, records) for m in desc.members]
        temps = [m.temperature for m in desc.members]
        if len(desc.members) == 1:
            member_logits.append(None)
            temps.append(1.0)

        fused = np.zeros((len(records), len(space.union)))
        for i in range(len(records)):
            fused[i] = fuse_union(
                member_logits[0][i],
                None if member_logits[1] is None else member_logits[1][i],
                (temps[0], temps[1]), space, cfg,
            )
        header = ["sample_id", "label", "predicted"] + list(space.union)
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r, post in zip(records, fused):
                pred = space.union[int(np.argmax(post))]
                writer.writerow([Path(r.path).name, r.label, pred]
                                + [f"{v:.8g}" for v in post])
        # per-model calibrated posteriors for audit
        audit_path = str(out_path) + ".audit.csv"
        with open(audit_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            cols = ["sample_id"]
            for mi, m in enumerate(desc.members):
                cols += [f"m{mi}_{c}" for c in m.labels]
            writer.writerow(cols)
            from .fusion import calibrate_posterior

            for i, r in enumerate(records):
                row = [Path(r.path).name]
                for mi, m in enumerate(desc.members):
                    row += [f"{v:.8g}" for v in calibrate_posterior(member_logits[mi][i], temps[mi])]
                writer.writerow(row)
        Path(str(out_path) + ".meta.json").write_text(json.dumps({
            "config_hash": desc.config_hash, "tau": cfg.tau, "mode": cfg.mode,
            "tool_version": __version__, "union": space.union,
        }, indent=1))
    except (ConfigError, CalibrationError, IoError, DataError) as exc:
        _fail(EXIT_FUSION, str(exc))
    click.echo(f"fused {len(records)} samples over {space.union} -> {out_path}")


# -- eval ------------------------------------------------------------------------


def _eval_one(preds_path: str, manifest_labels: dict[str, str] | None) -> dict:
    with open(preds_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["sample_id", "label", "predicted"]:
            raise ConfigError(f"{preds_path}: expected header sample_id,label,predicted,<classes>")
        classes = header[3:]
        y_true, y_pred, probs = [], [], []
        for row in reader:
            sample_id, label, predicted = row[:3]
            if manifest_labels is not None:
                label = manifest_labels.get(sample_id, label)
            y_true.append(label)
            y_pred.append(predicted)
            probs.append([float(v) for v in row[3:]])
    if not y_true:
        raise DataError(f"{preds_path}: no prediction rows")
    probs = np.asarray(probs)
    idx = {c: i for i, c in enumerate(classes)}
    labels_idx = np.array([idx[t] for t in y_true])
    return evaluation_report(y_true, y_pred, classes, probs=probs, labels_idx=labels_idx)


@main.command(name="eval")
@click.option("--preds", "preds_path", required=True,
              help="predictions CSV; may contain {seed} when --seeds is given")
@click.option("--manifest", "manifest_path", default=None, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seeds", default=None, help="comma list; evaluates per-seed preds files")
def eval_cmd(preds_path, manifest_path, out_path, seeds):
    """Metrics report for fused or single-model predictions."""
    manifest_labels = None
    if manifest_path:
        manifest_labels = {Path(r.path).name: r.label for r in read_manifest(manifest_path)}
    try:
        if seeds:
            seed_list = [int(s) for s in seeds.split(",")]
            if "{seed}" not in preds_path:
                raise ConfigError("--seeds needs a {seed} placeholder in --preds")

            def eval_fn(seed):
                rep = _eval_one(preds_path.format(seed=seed), manifest_labels)
                return {"macro_f1": rep["macro_f1"], "accuracy": rep["accuracy"],
                        "nll": rep["nll"]}

            report = seed_sweep(eval_fn, seed_list)
        else:
            report = _eval_one(preds_path, manifest_labels)
        report["tool_version"] = __version__
        Path(out_path).write_text(json.dumps(report, indent=1, sort_keys=True))
    except (ConfigError, DataError, IoError, FileNotFoundError) as exc:
        _fail(EXIT_EVAL, str(exc))
    if seeds:
        mean, std = report["mean"]["macro_f1"], report["std"]["macro_f1"]
        click.echo(f"macro-F1 over seeds: {mean:.4f} +- {std:.4f} -> {out_path}")
    else:
        click.echo(f"macro-F1 {report['macro_f1']:.4f} accuracy {report['accuracy']:.4f} "
                   f"-> {out_path}")


# -- case studies -----------------------------------------------------------------


@main.command(name="case-studies")
@click.option("--tau", default=1.0, show_default=True)
@click.option("--mode", default="lse", type=click.Choice(["lse", "poe"]))
@click.option("--fixture", default=None, type=click.Path(exists=True))
def case_studies(tau, mode, fixture):
    """Replay the bundled fusion scenarios and check their outcomes."""
    try:
        results = run_case_studies(tau=tau, mode=mode, fixture_path=fixture)
    except CaseStudyFailure as exc:
        _fail(EXIT_CASES, str(exc))
    for r in results:
        flag = " (documented failure vs true label)" if r["is_failure_case"] else ""
        click.echo(f"[ok] {r['name']}: fused={r['fused_argmax']} "
                   f"uncalibrated={r['uncalibrated_argmax']}{flag}")
    click.echo(f"all {len(results)} case studies reproduced their outcomes")


# -- logits export (shared surface for calibration without checkpoints) -------------


@main.command(name="export-logits")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_name", default="test", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def export_logits(ckpt_dir, manifest_path, split_name, out_path):
    """Write a per-sample logit table CSV for one split."""
    try:
        ckpt = load_checkpoint(ckpt_dir)
        records = [r for r in read_manifest(manifest_path) if r.split == split_name]
        if not records:
            raise DataError(f"no records in split {split_name!r}")
        rows = predict_logit_rows(records, ckpt)
        write_logit_table(out_path, rows, ckpt.labels)
    except (ConfigError, DataError, IoError) as exc:
        _fail(EXIT_EVAL, str(exc))
    click.echo(f"wrote {len(rows)} logit rows -> {out_path}")


if __name__ == "__main__":
    main()
