"""Forward values and gradient checks for the autodiff primitives."""

import numpy as np
import pytest

from conftest import check_gradients, max_rel_err, numeric_grad
from crykit import autodiff as ad
from crykit.errors import ConfigError, LabelError, NumericalError, ShapeError
from crykit.params import ParamStore, adam_step


def leaf_graph(build_expr):
    """Adapter: build_expr(leaves) -> scalar Tensor, for check_gradients."""

    def build(arrays):
        leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return {"loss": build_expr(leaves), "leaves": leaves}

    return build


# -- basic ops ---------------------------------------------------------------


def test_matmul_identity():
    x = ad.tensor(np.arange(6, dtype=float).reshape(2, 3))
    eye = ad.tensor(np.eye(2))
    out = ad.matmul(eye, x)
    np.testing.assert_allclose(out.value, x.value)


def test_matmul_gradient_is_transpose_rule():
    with ad.precision("float64"):
        a = ad.tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        x = ad.tensor(np.array([[0.5], [-1.5]]), requires_grad=True)
        out = ad.matmul(a, x)
        out.backward(seed=np.ones((2, 1)))
        np.testing.assert_allclose(x.grad, a.value.T @ np.ones((2, 1)))
        np.testing.assert_allclose(a.grad, np.ones((2, 1)) @ x.value.T)


def test_add_fanin_accumulates():
    with ad.precision("float64"):
        a = ad.tensor([1.0, 2.0], requires_grad=True)
        out = ad.reduce_sum(ad.add(a, a))
        out.backward()
        np.testing.assert_allclose(a.grad, [2.0, 2.0])


def test_slice_concat_roundtrip(rng):
    with ad.precision("float64"):
        x = ad.tensor(rng.normal(size=(4, 6)), requires_grad=True)
        parts = [ad.narrow(x, 1, i * 2, 2) for i in range(3)]
        back = ad.concat(parts, axis=1)
        np.testing.assert_allclose(back.value, x.value)
        ad.reduce_sum(ad.mul(back, back)).backward()
        np.testing.assert_allclose(x.grad, 2.0 * x.value)


def test_shape_mismatch_raises():
    a = ad.tensor(np.zeros((2, 3)))
    b = ad.tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        ad.matmul(a, b)
    with pytest.raises(ShapeError):
        ad.add(a, ad.tensor(np.zeros(7)))


def test_nonfinite_trips_diagnostic():
    with ad.precision("float64"):
        big = ad.tensor([1e300])
        with pytest.raises(NumericalError):
            ad.mul(big, big)


# -- nonlinearities ----------------------------------------------------------


def test_sigmoid_values_and_gradient():
    s = ad.sigmoid(ad.tensor([0.0]))
    assert s.item() == pytest.approx(0.5)
    assert ad.sigmoid(ad.tensor([-50.0])).item() > 0.0
    with ad.precision("float64"):
        x = ad.tensor([0.0], requires_grad=True)
        ad.sigmoid(x).backward(seed=[1.0])
        assert x.grad[0] == pytest.approx(0.25)


def test_tanh_values_and_gradient():
    assert ad.tanh(ad.tensor([0.0])).item() == 0.0
    x = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(ad.tanh(ad.tensor(-x)).value, -ad.tanh(ad.tensor(x)).value)
    with ad.precision("float64"):
        t = ad.tensor([0.0], requires_grad=True)
        ad.tanh(t).backward(seed=[1.0])
        assert t.grad[0] == pytest.approx(1.0)


def test_elementwise_gradients(rng):
    arrays = {
        "a": rng.uniform(-2, 2, size=(3, 4)),
        "b": rng.uniform(-2, 2, size=(3, 4)),
    }
    check_gradients(
        leaf_graph(lambda L: ad.reduce_sum(ad.mul(ad.tanh(L["a"]), ad.sigmoid(L["b"])))),
        arrays,
    )


def test_broadcast_add_gradient(rng):
    arrays = {"x": rng.uniform(-2, 2, size=(5, 3)), "b": rng.uniform(-1, 1, size=(3,))}
    check_gradients(
        leaf_graph(lambda L: ad.reduce_sum(ad.tanh(ad.add(L["x"], L["b"])))),
        arrays,
    )


# -- conv / pool / norm ------------------------------------------------------


def test_conv2d_1x1_identity():
    x = ad.tensor(np.arange(12, dtype=float).reshape(1, 1, 3, 4))
    k = ad.tensor(np.ones((1, 1, 1, 1)))
    out = ad.conv2d(x, k)
    np.testing.assert_allclose(out.value, x.value)


def test_conv2d_ones_kernel_sums_window():
    c = 0.7
    x = ad.tensor(np.full((1, 1, 6, 6), c))
    k = ad.tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, k, padding="same")
    # interior of same-padded constant input sums the full window
    np.testing.assert_allclose(out.value[0, 0, 1:-1, 1:-1], 9 * c, rtol=1e-6)


def test_conv2d_gradient(rng):
    arrays = {
        "x": rng.uniform(-2, 2, size=(2, 2, 5, 6)),
        "w": rng.uniform(-1, 1, size=(3, 2, 3, 3)),
        "b": rng.uniform(-1, 1, size=(3,)),
    }
    check_gradients(
        leaf_graph(lambda L: ad.reduce_sum(ad.tanh(ad.conv2d(L["x"], L["w"], L["b"])))),
        arrays,
    )


def test_conv2d_strided_gradient(rng):
    arrays = {
        "x": rng.uniform(-2, 2, size=(1, 1, 7, 7)),
        "w": rng.uniform(-1, 1, size=(2, 1, 3, 3)),
    }
    check_gradients(
        leaf_graph(
            lambda L: ad.reduce_sum(ad.tanh(ad.conv2d(L["x"], L["w"], stride=2, padding="same")))
        ),
        arrays,
    )


def test_maxpool_constant_and_global():
    x = ad.tensor(np.full((1, 1, 4, 4), 3.25))
    out = ad.maxpool2d(x, (2, 2))
    np.testing.assert_allclose(out.value, 3.25)
    y = ad.tensor(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
    assert ad.maxpool2d(y, (4, 4)).item() == 15.0


def test_maxpool_gradient_one_hot():
    with ad.precision("float64"):
        x = ad.tensor(np.array([[[[1.0, 4.0], [2.0, 3.0]]]]), requires_grad=True)
        ad.maxpool2d(x, (2, 2)).backward(seed=np.ones((1, 1, 1, 1)))
        np.testing.assert_allclose(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_maxpool_ceil_mode_partial_window():
    x = ad.tensor(np.arange(15, dtype=float).reshape(1, 1, 5, 3))
    out = ad.maxpool2d(x, (2, 1), ceil_mode=True)
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_allclose(out.value[0, 0, 2], [12.0, 13.0, 14.0])


def test_maxpool_gradient_check(rng):
    # distinct values avoid argmax ties, which finite differences cannot see
    base = rng.permutation(6 * 8).reshape(1, 1, 6, 8) * 0.2
    arrays = {"x": base.astype(float)}
    check_gradients(
        leaf_graph(lambda L: ad.reduce_sum(ad.tanh(ad.maxpool2d(L["x"], (2, 2))))),
        arrays,
        h=1e-6,
    )


def test_batchnorm_train_normalizes(rng):
    x = ad.tensor(rng.normal(3.0, 2.0, size=(8, 4, 5, 5)))
    gamma, beta = ad.tensor(np.ones(4)), ad.tensor(np.zeros(4))
    rm, rv = np.zeros(4, np.float32), np.ones(4, np.float32)
    out = ad.batchnorm(x, gamma, beta, rm, rv, training=True)
    got_mean = out.value.mean(axis=(0, 2, 3))
    got_var = out.value.var(axis=(0, 2, 3))
    np.testing.assert_allclose(got_mean, 0.0, atol=1e-5)
    np.testing.assert_allclose(got_var, 1.0, atol=1e-3)


def test_batchnorm_eval_is_affine(rng):
    mu = np.array([1.0, -2.0], np.float32)
    var = np.array([4.0, 0.25], np.float32)
    x = ad.tensor(rng.normal(size=(3, 2, 2, 2)))
    gamma, beta = ad.tensor([2.0, 1.0]), ad.tensor([0.5, -0.5])
    out = ad.batchnorm(x, gamma, beta, mu, var, training=False)
    expect = (x.value - mu[None, :, None, None]) / np.sqrt(var + 1e-5)[None, :, None, None]
    expect = expect * np.array([2.0, 1.0])[None, :, None, None] + np.array([0.5, -0.5])[None, :, None, None]
    np.testing.assert_allclose(out.value, expect, rtol=1e-5)


def test_batchnorm_batch_of_one_rejected():
    x = ad.tensor(np.zeros((1, 2, 3, 3)))
    with pytest.raises(ConfigError):
        ad.batchnorm(x, ad.tensor(np.ones(2)), ad.tensor(np.zeros(2)),
                     np.zeros(2, np.float32), np.ones(2, np.float32), training=True)


def test_batchnorm_gradient(rng):
    arrays = {
        "x": rng.uniform(-2, 2, size=(4, 3, 2, 2)),
        "g": rng.uniform(0.5, 1.5, size=(3,)),
        "b": rng.uniform(-0.5, 0.5, size=(3,)),
    }

    def expr(L):
        rm, rv = np.zeros(3), np.ones(3)
        return ad.reduce_sum(
            ad.tanh(ad.batchnorm(L["x"], L["g"], L["b"], rm, rv, training=True))
        )

    check_gradients(leaf_graph(expr), arrays)


# -- dropout -----------------------------------------------------------------


def test_dropout_p0_and_eval_identity(rng):
    x = ad.tensor(rng.normal(size=(4, 4)))
    assert ad.dropout(x, 0.0, np.random.default_rng(0), training=True) is x
    assert ad.dropout(x, 0.5, None, training=False) is x


def test_dropout_mask_reproducible(rng):
    x = ad.tensor(np.ones((16, 16)))
    a = ad.dropout(x, 0.3, np.random.default_rng(7), training=True)
    b = ad.dropout(x, 0.3, np.random.default_rng(7), training=True)
    np.testing.assert_array_equal(a.value, b.value)


def test_dropout_preserves_mean_monte_carlo():
    # Monte-Carlo oracle: inverted scaling keeps the expectation within 1%
    x = ad.tensor(np.ones((50, 50)))
    total, n = 0.0, 200
    rng = np.random.default_rng(42)
    for _ in range(n):
        total += ad.dropout(x, 0.3, rng, training=True).value.mean()
    assert abs(total / n - 1.0) < 0.01


# -- softmax cross entropy ---------------------------------------------------


def test_ce_uniform_logits_ln_c():
    for c in (2, 3, 5):
        logits = ad.tensor(np.zeros((4, c)))
        loss = ad.softmax_cross_entropy(logits, np.zeros(4, dtype=int))
        assert loss.item() == pytest.approx(np.log(c), rel=1e-6)


def test_ce_shift_invariance(rng):
    with ad.precision("float64"):
        z = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        a = ad.tensor(z, requires_grad=True)
        la = ad.softmax_cross_entropy(a, labels)
        la.backward()
        b = ad.tensor(z + 13.7, requires_grad=True)
        lb = ad.softmax_cross_entropy(b, labels)
        lb.backward()
        assert la.item() == pytest.approx(lb.item(), rel=1e-9)
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-12)


def test_ce_label_out_of_range():
    logits = ad.tensor(np.zeros((2, 3)))
    with pytest.raises(LabelError):
        ad.softmax_cross_entropy(logits, np.array([0, 3]))


def test_ce_gradient(rng):
    labels = rng.integers(0, 4, size=5)
    arrays = {"z": rng.uniform(-2, 2, size=(5, 4))}
    check_gradients(
        leaf_graph(lambda L: ad.softmax_cross_entropy(L["z"], labels)),
        arrays,
    )


def test_ce_weighted_gradient(rng):
    labels = rng.integers(0, 3, size=6)
    weights = np.array([0.5, 2.0, 1.0])
    arrays = {"z": rng.uniform(-2, 2, size=(6, 3))}
    check_gradients(
        leaf_graph(lambda L: ad.softmax_cross_entropy(L["z"], labels, class_weights=weights)),
        arrays,
    )


# -- graph mechanics ---------------------------------------------------------


def test_deep_chain_no_recursion_limit():
    with ad.precision("float64"):
        x = ad.tensor([1.0], requires_grad=True)
        node = x
        for _ in range(3000):
            node = ad.mul(node, 1.0)
        node.backward(seed=[1.0])
        assert x.grad[0] == pytest.approx(1.0)


def test_determinism_same_seed_same_everything(rng):
    def run():
        r = np.random.default_rng(5)
        x = ad.tensor(r.normal(size=(3, 3)), requires_grad=True)
        y = ad.dropout(ad.tanh(x), 0.2, np.random.default_rng(9), training=True)
        loss = ad.reduce_sum(ad.mul(y, y))
        loss.backward()
        return loss.item(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


# -- Adam --------------------------------------------------------------------


def make_store():
    store = ParamStore(seed=0)
    store.add("w", np.array([1.0, -2.0, 3.0]))
    return store


def test_adam_zero_gradient_no_move():
    store = make_store()
    before = store.params["w"].copy()
    adam_step(store, {"w": np.zeros(3)}, lr=0.1)
    np.testing.assert_array_equal(store.params["w"], before)


def test_adam_lr_zero_identity():
    store = make_store()
    before = store.params["w"].copy()
    adam_step(store, {"w": np.ones(3)}, lr=0.0)
    np.testing.assert_array_equal(store.params["w"], before)


def test_adam_constant_gradient_approaches_lr_steps():
    # fixed point oracle: with constant g, m_hat->g, v_hat->g^2, step -> lr*sign(g)
    with ad.precision("float64"):
        store = ParamStore(seed=0)
        store.add("w", np.array([0.0]))
        g = np.array([0.37])
        lr = 1e-3
        prev = store.params["w"].copy()
        for _ in range(1000):
            prev = store.params["w"].copy()
            adam_step(store, {"w": g}, lr=lr)
        last_step = abs(float(store.params["w"][0] - prev[0]))
        assert last_step == pytest.approx(lr, rel=1e-4)


def test_adam_weight_decay_adds_l2_pull():
    with ad.precision("float64"):
        store = ParamStore(seed=0)
        store.add("w", np.array([2.0]))
        store.add("b", np.array([2.0]), decay=False)
        adam_step(store, {"w": np.zeros(1), "b": np.zeros(1)}, lr=0.1, weight_decay=1e-2)
        assert store.params["w"][0] < 2.0  # decay pulls toward zero
        assert store.params["b"][0] == 2.0  # no_decay params untouched


def test_weight_roundtrip(tmp_path, rng):
    from crykit.params import load_weights, save_weights

    store = ParamStore(seed=1)
    store.add_uniform("a", (3, 4), fan_in=4)
    store.add_uniform("b", (2,), fan_in=2)
    store.add_buffer("rm", np.array([1.0, 2.0]))
    index = save_weights(store, tmp_path / "w.bin")

    other = ParamStore(seed=2)
    other.add_uniform("a", (3, 4), fan_in=4)
    other.add_uniform("b", (2,), fan_in=2)
    other.add_buffer("rm", np.zeros(2))
    load_weights(other, tmp_path / "w.bin", index)
    for name in ("a", "b"):
        np.testing.assert_allclose(other.params[name], store.params[name], rtol=1e-6)
    np.testing.assert_allclose(other.buffers["rm"], [1.0, 2.0])
