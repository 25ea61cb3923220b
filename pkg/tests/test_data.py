"""Manifests, name parsing, leakage-safe splits, synthetic corpus."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crykit.audio import load_wav
from crykit.data import (
    SampleRecord,
    SplitSpec,
    SynthSpec,
    build_manifest,
    group_split,
    parse_baby2020_name,
    read_manifest,
    synth_corpus,
    verify_no_leakage,
    write_manifest,
)
from crykit.errors import ConfigError, DataError, IoError, NamingError, SplitError, StratifyWarning
from crykit.features import estimate_pitch


def make_records(n_groups, per_group=4, labels=("a", "b")):
    records = []
    for g in range(n_groups):
        for k in range(per_group):
            records.append(SampleRecord(
                path=f"g{g}_{k}.wav", label=labels[g % len(labels)], group=f"grp{g}",
            ))
    return records


# -- naming --------------------------------------------------------------------


def test_parse_reference_name():
    assert parse_baby2020_name("Hungry04MB00011_2_002.wav") == ("Hungry", "04MB00011")


def test_parse_constructed_name():
    assert parse_baby2020_name("Sleepy01FA00003_1_001.wav") == ("Sleepy", "01FA00003")


def test_parse_rejects_plain_name():
    with pytest.raises(NamingError):
        parse_baby2020_name("cry.wav")


def test_parse_rejects_label_only_token():
    with pytest.raises(NamingError):
        parse_baby2020_name("Hungry_2_002.wav")


# -- splitting ------------------------------------------------------------------


def test_equal_groups_exact_fractions():
    records = make_records(10, per_group=3)
    group_split(records, SplitSpec(fractions=(0.6, 0.2, 0.2), seed=1))
    counts = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    assert counts == {"train": 18, "val": 6, "test": 6}


def test_split_deterministic():
    a = make_records(12)
    b = make_records(12)
    group_split(a, SplitSpec(seed=42))
    group_split(b, SplitSpec(seed=42))
    assert [r.split for r in a] == [r.split for r in b]


def test_split_never_leaks():
    records = make_records(9, per_group=5)
    group_split(records, SplitSpec(seed=7))
    assert verify_no_leakage(records) == []


def test_split_needs_three_groups():
    with pytest.raises(SplitError):
        group_split(make_records(2), SplitSpec())


def test_split_all_assigned():
    records = make_records(8)
    group_split(records, SplitSpec(seed=3))
    assert all(r.split in ("train", "val", "test") for r in records)


def test_stratify_warning_on_missing_class():
    # one tiny class in a single group cannot reach all three splits
    records = make_records(6, per_group=2, labels=("common",))
    records.append(SampleRecord(path="rare.wav", label="rare", group="grp-rare"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        group_split(records, SplitSpec(seed=0))
    assert any(issubclass(w.category, StratifyWarning) for w in caught)


def test_bad_fractions_rejected():
    with pytest.raises(ConfigError):
        SplitSpec(fractions=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        SplitSpec(fractions=(1.0, 0.0, 0.0))


@given(
    n_groups=st.integers(3, 30),
    sizes_seed=st.integers(0, 10_000),
    split_seed=st.integers(0, 10_000),
    stratify=st.booleans(),
)
@settings(max_examples=80, deadline=None)
def test_split_properties_random_structures(n_groups, sizes_seed, split_seed, stratify):
    rng = np.random.default_rng(sizes_seed)
    labels = ["x", "y", "z"]
    records = []
    for g in range(n_groups):
        for k in range(rng.integers(1, 8)):
            records.append(SampleRecord(
                path=f"p{g}_{k}", label=labels[int(rng.integers(0, 3))], group=f"g{g}",
            ))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StratifyWarning)
        group_split(records, SplitSpec(seed=split_seed, stratify=stratify))
    # leakage-free and complete coverage
    assert verify_no_leakage(records) == []
    assert all(r.split in ("train", "val", "test") for r in records)
    # achieved counts within one group's worth of the targets
    biggest = max(sum(r.group == f"g{g}" for r in records) for g in range(n_groups))
    total = len(records)
    for split, frac in zip(("train", "val", "test"), (0.7, 0.1, 0.2)):
        achieved = sum(r.split == split for r in records)
        assert abs(achieved - frac * total) <= biggest + 1e-9


def test_verify_flags_straddling_group():
    records = make_records(4)
    group_split(records, SplitSpec(seed=0))
    records[0].split = "train"
    records[1].split = "test"
    assert records[0].group == records[1].group
    assert verify_no_leakage(records) == [records[0].group]


def test_verify_ignores_unassigned():
    records = make_records(4)
    assert verify_no_leakage(records) == []


# -- manifest round trip ----------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    records = make_records(3)
    records[0].feature_path = "feat/x.cryf"
    records[0].duration_s = 2.5
    path = tmp_path / "m.jsonl"
    write_manifest(path, records)
    back = read_manifest(path)
    assert back == records


def test_manifest_missing_file():
    with pytest.raises(IoError):
        read_manifest("/nonexistent/m.jsonl")


# -- synthetic corpus ----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(clips_per_class=6, babies_per_class=3, clip_seconds=(1.2, 2.0), seed=5)
    records = synth_corpus(spec, out)
    return spec, records, out


def test_synth_counts_and_files(small_corpus):
    spec, records, out = small_corpus
    assert len(records) == 18
    assert len(list(out.glob("*.wav"))) == 18
    assert (out / "labels.csv").exists()
    assert (out / "manifest.jsonl").exists()


def test_synth_clips_are_valid_16k(small_corpus):
    _, records, _ = small_corpus
    clip = load_wav(records[0].path)
    assert clip.sample_rate == 16000
    assert 1.0 <= clip.duration_s() <= 30.0


def test_synth_pitch_matches_spec(small_corpus):
    spec, records, _ = small_corpus
    base = {label: c.base_hz for label, c in zip(spec.labels, spec.contours)}
    for label in spec.labels:
        medians = []
        for r in records:
            if r.label != label:
                continue
            track = estimate_pitch(load_wav(r.path))
            voiced = track.f0 > 0
            if voiced.any():
                medians.append(np.median(track.f0[voiced]))
        assert abs(np.median(medians) - base[label]) <= 10.0


def test_synth_groups_have_multiple_clips(small_corpus):
    _, records, _ = small_corpus
    per_group = {}
    for r in records:
        per_group[r.group] = per_group.get(r.group, 0) + 1
    assert min(per_group.values()) >= 2


def test_synth_separable_by_median_f0(small_corpus):
    spec, records, _ = small_corpus
    bases = np.array([c.base_hz for c in spec.contours])
    correct = 0
    for r in records:
        track = estimate_pitch(load_wav(r.path))
        voiced = track.f0 > 0
        med = np.median(track.f0[voiced]) if voiced.any() else 0.0
        predicted = spec.labels[int(np.argmin(np.abs(bases - med)))]
        correct += predicted == r.label
    assert correct / len(records) >= 0.95


def test_synth_snr_affects_f0_classifier(tmp_path):
    # end-to-end oracle at desk scale: a median-F0 threshold classifier does
    # better on clean audio than at 0 dB SNR
    def accuracy(snr_db, out):
        spec = SynthSpec(clips_per_class=6, babies_per_class=3, snr_db=snr_db,
                         clip_seconds=(1.2, 1.8), seed=9)
        records = synth_corpus(spec, out)
        bases = np.array([c.base_hz for c in spec.contours])
        hits = 0
        for r in records:
            track = estimate_pitch(load_wav(r.path))
            voiced = track.f0 > 0
            med = np.median(track.f0[voiced]) if voiced.any() else 0.0
            hits += spec.labels[int(np.argmin(np.abs(bases - med)))] == r.label
        return hits / len(records)

    clean = accuracy(30.0, tmp_path / "clean")
    noisy = accuracy(0.0, tmp_path / "noisy")
    assert clean >= noisy


# -- build_manifest -----------------------------------------------------------------


def test_build_manifest_empty_dir(tmp_path):
    records, quarantine = build_manifest(tmp_path, dataset="baby2020")
    assert records == [] and quarantine == []


def test_build_manifest_baby2020_with_quarantine(tmp_path):
    from crykit.audio import save_wav_pcm16

    save_wav_pcm16(tmp_path / "Hungry04MB00011_2_002.wav", np.zeros(1600), 16000)
    save_wav_pcm16(tmp_path / "Sleepy01FA00003_1_001.wav", np.zeros(1600), 16000)
    save_wav_pcm16(tmp_path / "notes.wav", np.zeros(1600), 16000)
    records, quarantine = build_manifest(tmp_path, dataset="baby2020")
    assert len(records) == 2
    assert len(quarantine) == 1 and quarantine[0].endswith("notes.wav")
    by_label = {r.label: r.group for r in records}
    assert by_label == {"Hungry": "04MB00011", "Sleepy": "01FA00003"}


def test_build_manifest_duplicates_rejected(tmp_path):
    from crykit.audio import save_wav_pcm16

    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    save_wav_pcm16(tmp_path / "a" / "Hungry04MB00011_2_002.wav", np.zeros(1600), 16000)
    save_wav_pcm16(tmp_path / "b" / "Hungry04MB00011_2_002.wav", np.zeros(1600), 16000)
    with pytest.raises(DataError):
        build_manifest(tmp_path, dataset="baby2020")


def test_build_manifest_generic_needs_sidecar(tmp_path):
    with pytest.raises(IoError):
        build_manifest(tmp_path, dataset="generic")


def test_build_manifest_generic_reads_csv(tmp_path):
    from crykit.audio import save_wav_pcm16

    save_wav_pcm16(tmp_path / "s1.wav", np.zeros(1600), 16000)
    save_wav_pcm16(tmp_path / "s2.wav", np.zeros(1600), 16000)
    (tmp_path / "labels.csv").write_text(
        "filename,label,group\ns1.wav,awake,sess1\ns2.wav,sleepy,sess2\nmissing.wav,x,s3\n"
    )
    records, quarantine = build_manifest(tmp_path, dataset="generic")
    assert [(r.label, r.group) for r in records] == [("awake", "sess1"), ("sleepy", "sess2")]
    assert quarantine == ["missing.wav"]
