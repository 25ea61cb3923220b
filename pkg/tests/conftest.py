"""Shared test helpers: central-difference gradient checking."""

import numpy as np
import pytest

from crykit import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued f() with respect to x in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build, arrays: dict[str, np.ndarray], tol: float = 1e-4, h: float = 1e-5):
    """Compare autodiff gradients of build(arrays)->scalar Tensor against
    central differences, in 64-bit mode. Returns worst relative error."""
    with ad.precision("float64"):
        out = build(arrays)
        out["loss"].backward()
        worst = 0.0
        for name, arr in arrays.items():
            leaf = out["leaves"][name]
            analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad

            def scalar():
                return build(arrays)["loss"].item()

            numeric = numeric_grad(scalar, arr, h=h)
            err = max_rel_err(analytic, numeric)
            assert err < tol, f"gradient mismatch for {name!r}: rel err {err:.3g} >= {tol}"
            worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
