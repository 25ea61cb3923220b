"""Reverse-mode automatic differentiation over dense numpy arrays.

A small eager tape: every operation returns a :class:`Tensor` carrying its
value, its parent tensors and a closure that routes the upstream gradient.
Gradients accumulate additively, so shared subexpressions are handled
correctly. Two global precision modes exist: 64-bit for gradient checking
and 32-bit for training.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, LabelError, NumericalError, ShapeError

_DTYPE = np.float32
_CHECK_FINITE = True


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dt.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    global _DTYPE
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = old


def set_finite_check(enabled: bool) -> None:
    """Toggle the NaN/Inf diagnostic performed after every op."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn
        self._op = op

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.value.shape}, grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    # -- autodiff ----------------------------------------------------------

    def backward(self, seed=None) -> None:
        """Run reverse-mode accumulation from this tensor.

        Without an explicit seed the tensor must be scalar (size 1).
        """
        if seed is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        else:
            seed = np.asarray(seed, dtype=self.value.dtype).reshape(self.value.shape)
        self.grad = seed
        for node in _toposort(self):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _toposort(root: Tensor):
    """Nodes in reverse topological order, iteratively (graphs get deep)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return reversed(order)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a leaf tensor in the current default dtype."""
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _make(value, parents, backward_fn, op) -> Tensor:
    if _CHECK_FINITE:
        # one-pass screen: a finite sum implies all entries finite; a
        # non-finite sum falls back to the exact check (large-magnitude
        # float32 sums can overflow while every entry is still finite)
        if not np.isfinite(value.sum()) and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite values produced by {op}")
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, tuple(parents), backward_fn, op)
    return Tensor(value, False, (), None, op)


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True)
        t.grad = t.grad.reshape(t.value.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} + {b.shape}") from exc

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(value, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} * {b.shape}") from exc

    def bw(g):
        _accum(a, _unbroadcast(g * b.value, a.shape))
        _accum(b, _unbroadcast(g * a.value, b.shape))

    return _make(value, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def bw(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _make(value, (a, b), bw, "matmul")


# -- shape manipulation ------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    value = x.value.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(value, (x,), bw, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    value = np.transpose(x.value, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _make(value, (x,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat along axis {axis}") from exc
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(value, ts, bw, "concat")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    x = _as_tensor(x)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) out of {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    value = x.value[idx]

    def bw(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        x.grad[idx] += g

    return _make(value, (x,), bw, "narrow")


def reduce_sum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    value = np.asarray(x.value.sum(axis=axis))

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(value, (x,), bw, "sum")


def reduce_mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / n)


# -- nonlinearities ----------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    value = expit(x.value)

    def bw(g):
        _accum(x, g * value * (1.0 - value))

    return _make(value, (x,), bw, "sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    value = np.tanh(x.value)

    def bw(g):
        _accum(x, g * (1.0 - value * value))

    return _make(value, (x,), bw, "tanh")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    value = np.maximum(x.value, 0.0)

    def bw(g):
        _accum(x, g * (x.value > 0))

    return _make(value, (x,), bw, "relu")


# -- structured ops ----------------------------------------------------------

def _same_pad(size: int, kernel: int, stride: int) -> tuple[int, int]:
    total = max((-(-size // stride) - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d(x, w, b=None, stride: int | tuple[int, int] = 1, padding="same") -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernels.

    `padding` is "same" or an explicit (pad_h, pad_w) pair.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW and OIHW, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, CI, KH, KW = w.shape
    if CI != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernels expect {CI}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pad(H, KH, sh), _same_pad(W, KW, sw)
    else:
        ph, pw = padding
        pt = pb = ph
        pl = pr = pw
    Hp, Wp = H + pt + pb, W + pl + pr
    if KH > Hp or KW > Wp:
        raise ShapeError(f"conv2d: kernel {KH}x{KW} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - KH) // sh + 1
    Wo = (Wp - KW) // sw + 1

    # Shift-and-matmul in channels-last layout: each kernel offset flattens
    # to a single (BHW, C) @ (C, O) GEMM; one transpose at the end returns
    # to NCHW.
    xp = np.pad(x.value.transpose(0, 2, 3, 1), ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    n_out = B * Ho * Wo

    def patch2d(i, j):
        view = xp[:, i : i + sh * Ho : sh, j : j + sw * Wo : sw, :]
        return np.ascontiguousarray(view).reshape(n_out, C)

    acc = np.zeros((n_out, O), dtype=x.value.dtype)
    for i in range(KH):
        for j in range(KW):
            acc += patch2d(i, j) @ w.value[:, :, i, j].T
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (O,):
            raise ShapeError(f"conv2d bias must be ({O},), got {b.shape}")
        acc += b.value
        parents = (x, w, b)
    else:
        parents = (x, w)
    out = np.ascontiguousarray(acc.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n_out, O)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        for i in range(KH):
            for j in range(KW):
                if w.requires_grad:
                    gw = patch2d(i, j).T @ gh
                    if w.grad is None:
                        w.grad = np.zeros_like(w.value)
                    w.grad[:, :, i, j] += gw.T
                if x.requires_grad:
                    part = (gh @ w.value[:, :, i, j]).reshape(B, Ho, Wo, C)
                    gxp[:, i : i + sh * Ho : sh, j : j + sw * Wo : sw, :] += part
        if x.requires_grad:
            _accum(x, gxp[:, pt : pt + H, pl : pl + W, :].transpose(0, 3, 1, 2))
        if b is not None:
            _accum(b, gh.sum(axis=0))

    return _make(out, parents, bw, "conv2d")


def maxpool2d(x, pool: tuple[int, int], ceil_mode: bool = True) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first argmax per window."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW, got {x.shape}")
    B, C, H, W = x.shape
    ph, pw = pool
    if ph > H or pw > W:
        if not ceil_mode:
            raise ShapeError(f"maxpool2d: pool {pool} larger than input {H}x{W}")
    if ceil_mode:
        Ho, Wo = -(-H // ph), -(-W // pw)
    else:
        Ho, Wo = H // ph, W // pw
        if Ho == 0 or Wo == 0:
            raise ShapeError(f"maxpool2d: pool {pool} larger than input {H}x{W}")
    Hp, Wp = Ho * ph, Wo * pw
    xp = x.value
    if (Hp, Wp) != (H, W):
        xp = np.pad(xp, ((0, 0), (0, 0), (0, Hp - H), (0, Wp - W)), constant_values=-np.inf)
    windows = xp.reshape(B, C, Ho, ph, Wo, pw)
    value = windows.max(axis=(3, 5))

    def bw(g):
        # gradient to the first argmax per window, scanning offsets in
        # row-major order and masking positions already claimed
        gxp = np.zeros((B, C, Hp, Wp), dtype=x.value.dtype)
        gxp_win = gxp.reshape(B, C, Ho, ph, Wo, pw)
        seen = np.zeros((B, C, Ho, Wo), dtype=bool)
        for i in range(ph):
            for j in range(pw):
                hit = (windows[:, :, :, i, :, j] == value) & ~seen
                seen |= hit
                gxp_win[:, :, :, i, :, j] = hit * g
        _accum(x, gxp[:, :, :H, :W])

    return _make(value, (x,), bw, "maxpool2d")


def batchnorm(x, gamma, beta, running_mean, running_var, training: bool,
              momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over axis 1; running stats are plain arrays
    updated in place during training."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim < 2:
        raise ShapeError(f"batchnorm expects at least 2-D input, got {x.shape}")
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, C) + (1,) * (x.ndim - 2)

    if training:
        if x.shape[0] < 2:
            raise ConfigError("batchnorm in train mode needs batch size >= 2")
        mean = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.value.dtype)
        var = running_var.astype(x.value.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.value - mean.reshape(shape)) * inv_std.reshape(shape)
    value = x_hat * gamma.value.reshape(shape) + beta.value.reshape(shape)
    n = x.size // C

    def bw(g):
        _accum(gamma, (g * x_hat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        gs = g * gamma.value.reshape(shape)
        if training:
            gx = (inv_std.reshape(shape) / n) * (
                n * gs
                - gs.sum(axis=axes).reshape(shape)
                - x_hat * (gs * x_hat).sum(axis=axes).reshape(shape)
            )
        else:
            gx = gs * inv_std.reshape(shape)
        _accum(x, gx)

    return _make(value, (x, gamma, beta), bw, "batchnorm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs a seeded Generator")
    mask = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.value.dtype) / (1.0 - p)
    value = x.value * mask

    def bw(g):
        _accum(x, g * mask)

    return _make(value, (x,), bw, "dropout")


def softmax_cross_entropy(logits, labels, class_weights=None) -> Tensor:
    """Mean negative log softmax probability of the true labels.

    `class_weights` (length C) turns the plain mean into a weighted mean,
    used for inverse-frequency balancing.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, C) logits, got {logits.shape}")
    B, C = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise ShapeError(f"labels must be ({B},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= C:
        raise LabelError(f"labels must lie in [0, {C})")

    z = logits.value
    shift = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - lse
    softmax = np.exp(logp)

    if class_weights is None:
        w = np.ones(B, dtype=z.dtype)
    else:
        cw = np.asarray(class_weights, dtype=z.dtype)
        if cw.shape != (C,):
            raise ShapeError(f"class_weights must be ({C},), got {cw.shape}")
        w = cw[labels]
    wsum = w.sum()
    value = np.asarray(-(w * logp[np.arange(B), labels]).sum() / wsum, dtype=z.dtype)

    def bw(g):
        grad = softmax.copy()
        grad[np.arange(B), labels] -= 1.0
        grad *= (w / wsum)[:, None]
        _accum(logits, g * grad)

    return _make(value, (logits,), bw, "softmax_cross_entropy")


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax on plain arrays (no graph)."""
    z = np.asarray(logits, dtype=np.float64)
    shift = z - z.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def softmax_values(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_values(logits))
