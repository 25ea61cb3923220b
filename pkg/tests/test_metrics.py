"""Confusion-matrix metrics and seed aggregation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crykit.errors import ConfigError, LabelError
from crykit.metrics import ConfusionMatrix, accuracy, macro_f1, nll, seed_sweep


def cm_of(counts, classes=None):
    counts = np.asarray(counts)
    classes = classes or [f"c{i}" for i in range(counts.shape[0])]
    return ConfusionMatrix(counts=counts, classes=classes)


def test_perfect_diagonal():
    assert macro_f1(cm_of([[7, 0], [0, 4]])) == 1.0


def test_symmetric_half_wrong():
    # hand arithmetic: P = R = 0.5 per class, so F1 = 0.5 each
    assert macro_f1(cm_of([[5, 5], [5, 5]])) == pytest.approx(0.5)


def test_never_predicted_class_zeroes_f1():
    # class 2's trues all predicted as class 0:
    # c0: P=10/20, R=1 -> 2/3; c1: 1.0; c2: 0 -> macro = 5/9
    cm = cm_of([[10, 0, 0], [0, 10, 0], [10, 0, 0]])
    assert macro_f1(cm) == pytest.approx(5.0 / 9.0)
    assert macro_f1(cm) < 1.0


def test_absent_class_skipped():
    # class 2 has no trues and no predictions: skip it, not zero it
    cm = cm_of([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    assert macro_f1(cm) == 1.0


def test_macro_equals_accuracy_on_diagonal():
    cm = cm_of([[3, 0], [0, 9]])
    assert macro_f1(cm) == accuracy(cm) == 1.0


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 12, size=(4, 4))
    base = macro_f1(cm_of(counts))
    perm = rng.permutation(4)
    permuted = counts[np.ix_(perm, perm)]
    assert macro_f1(cm_of(permuted)) == pytest.approx(base)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_macro_f1_bounded(seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 20, size=(3, 3))
    if counts.sum() == 0:
        counts[0, 0] = 1
    score = macro_f1(cm_of(counts))
    assert 0.0 <= score <= 1.0


def test_from_predictions():
    cm = ConfusionMatrix.from_predictions(
        ["a", "a", "b"], ["a", "b", "b"], classes=["a", "b"]
    )
    np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 1]])
    with pytest.raises(LabelError):
        ConfusionMatrix.from_predictions(["z"], ["a"], classes=["a", "b"])


# -- nll -----------------------------------------------------------------------


def test_nll_one_hot_correct():
    probs = np.eye(3)[[0, 1, 2]]
    assert nll(probs, [0, 1, 2]) == pytest.approx(0.0, abs=1e-9)


def test_nll_uniform():
    for c in (2, 4, 7):
        probs = np.full((5, c), 1.0 / c)
        assert nll(probs, np.zeros(5, dtype=int)) == pytest.approx(np.log(c))


def test_nll_floor_engaged():
    probs = np.array([[0.0, 1.0]])
    assert nll(probs, [0]) <= -np.log(1e-12) + 1e-9
    assert nll(probs, [0]) == pytest.approx(-np.log(1e-12))


def test_nll_rejects_unnormalized():
    with pytest.raises(ConfigError):
        nll(np.array([[0.5, 0.2]]), [0])


# -- seed sweep -------------------------------------------------------------------


def test_seed_sweep_identical_values():
    out = seed_sweep(lambda seed: {"f1": 0.8}, seeds=[1, 2, 3])
    assert out["mean"]["f1"] == pytest.approx(0.8)
    assert out["std"]["f1"] == pytest.approx(0.0, abs=1e-12)


def test_seed_sweep_hand_arithmetic():
    vals = {1: 0.0, 2: 1.0}
    out = seed_sweep(lambda seed: {"f1": vals[seed]}, seeds=[1, 2])
    assert out["mean"]["f1"] == pytest.approx(0.5)
    assert out["std"]["f1"] == pytest.approx(np.sqrt(0.5), rel=1e-6)  # ~0.7071


def test_seed_sweep_keeps_rows():
    out = seed_sweep(lambda seed: {"f1": seed / 10}, seeds=[1, 2, 3, 4, 5])
    assert len(out["per_seed"]) == 5
    assert out["per_seed"][2] == {"seed": 3, "f1": 0.3}


def test_seed_sweep_needs_two():
    with pytest.raises(ConfigError):
        seed_sweep(lambda s: {"x": 1.0}, seeds=[1])
