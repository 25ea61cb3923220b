"""Recurrent cells: the Legendre memory cell and an LSTM baseline.

The memory cell keeps a linear state that projects the recent input window
onto shifted Legendre polynomials. Its state matrices are fixed by
construction; only three small projection matrices are learned, which is
where the large parameter saving over gated RNNs comes from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg

from . import autodiff as ad
from .errors import ConfigError, NumericalError, StabilityError
from .params import ParamStore

SPECTRAL_RADIUS_TOL = 1e-9


# -- matrix exponential ------------------------------------------------------

def expm_pade6(m: np.ndarray) -> np.ndarray:
    """Matrix exponential via scaling-and-squaring with a (6,6) Pade approximant."""
    m = np.asarray(m, dtype=np.float64)
    order = 6
    b = np.array([
        math.factorial(2 * order - j) * math.factorial(order)
        / (math.factorial(2 * order) * math.factorial(j) * math.factorial(order - j))
        for j in range(order + 1)
    ])
    norm = np.linalg.norm(m, 1)
    s = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    a = m / (2.0 ** s)
    eye = np.eye(a.shape[0])
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    even = b[0] * eye + b[2] * a2 + b[4] * a4 + b[6] * a6
    odd = a @ (b[1] * eye + b[3] * a2 + b[5] * a4)
    result = np.linalg.solve(even - odd, even + odd)
    for _ in range(s):
        result = result @ result
    return result


# -- Legendre memory construction --------------------------------------------

def legendre_continuous_system(d: int) -> tuple[np.ndarray, np.ndarray]:
    """The (A, B) pair of the continuous-time Legendre delay system, unscaled.

    A[i, j] = (2i+1) * (-1 if i < j else (-1)^(i-j+1)), B[i] = (2i+1)(-1)^i.
    """
    i = np.arange(d)[:, None]
    j = np.arange(d)[None, :]
    coeff = (2 * i + 1).astype(np.float64)
    a = np.where(i < j, -1.0, (-1.0) ** (i - j + 1)) * coeff
    b = ((2 * np.arange(d) + 1) * (-1.0) ** np.arange(d)).reshape(d, 1)
    return a, b


def shifted_legendre_taps(d: int, r: int) -> np.ndarray:
    """Rows evaluate the shifted Legendre basis at r uniform points of [0, 1].

    Row j holds P~_i(r_j) for i = 0..d-1 with r_j = j/(r-1); a single row
    evaluates at 1 (the far end of the memory window).
    """
    taps = np.ones(1) if r == 1 else np.arange(r) / (r - 1)
    out = np.empty((r, d))
    for i in range(d):
        coeffs = np.zeros(i + 1)
        coeffs[i] = 1.0
        out[:, i] = npleg.legval(2.0 * taps - 1.0, coeffs)
    return out


@dataclass
class LmuConfig:
    """Dimensions and discretization of the Legendre memory cell.

    p: input size, d: memory order (number of basis functions), r: hidden
    size, q: projection size, theta: memory window in seconds, dt: frame
    period in seconds.
    """

    p: int
    d: int
    r: int
    q: int = 1
    theta: float = 1.0
    dt: float = 0.015
    discretization: str = "zoh"
    nonlinearity_on_u: bool = True
    learned_readout: bool = False

    def __post_init__(self):
        if min(self.p, self.d, self.r, self.q) < 1:
            raise ConfigError("p, d, r, q must all be >= 1")
        if not 0.0 < self.dt < self.theta:
            raise ConfigError(f"need 0 < dt < theta, got dt={self.dt}, theta={self.theta}")
        if self.discretization not in ("zoh", "euler"):
            raise ConfigError(f"unknown discretization {self.discretization!r}")


def lmu_build_matrices(cfg: LmuConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Fixed (A_bar, B_bar, C, D) for the memory cell.

    ZOH discretizes (A/theta, B/theta) exactly over one step dt via the
    augmented-matrix exponential; Euler is the first-order alternative kept
    for convergence checks. C evaluates the shifted Legendre basis at r
    uniform delays across the window; D is zero.
    """
    a, b = legendre_continuous_system(cfg.d)
    a_c = a / cfg.theta
    b_c = np.tile(b / cfg.theta, (1, cfg.q))
    if cfg.discretization == "zoh":
        block = np.zeros((cfg.d + cfg.q, cfg.d + cfg.q))
        block[: cfg.d, : cfg.d] = a_c * cfg.dt
        block[: cfg.d, cfg.d :] = b_c * cfg.dt
        big = expm_pade6(block)
        a_bar = big[: cfg.d, : cfg.d]
        b_bar = big[: cfg.d, cfg.d :]
    else:
        a_bar = np.eye(cfg.d) + cfg.dt * a_c
        b_bar = cfg.dt * b_c
    c = shifted_legendre_taps(cfg.d, cfg.r)
    d_mat = np.zeros((cfg.r, cfg.q))

    if not (np.all(np.isfinite(a_bar)) and np.all(np.isfinite(b_bar)) and np.all(np.isfinite(c))):
        raise NumericalError("non-finite entries in discretized memory matrices")
    radius = float(np.abs(np.linalg.eigvals(a_bar)).max())
    if radius >= 1.0 + SPECTRAL_RADIUS_TOL:
        raise StabilityError(f"spectral radius {radius:.6f} >= 1 for d={cfg.d}, dt/theta={cfg.dt / cfg.theta:.4f}")
    return a_bar, b_bar, c, d_mat


# -- cells -------------------------------------------------------------------

class LmuCell:
    """Legendre memory cell; learned parameters live in a ParamStore."""

    def __init__(self, cfg: LmuConfig, store: ParamStore, prefix: str = "lmu"):
        self.cfg = cfg
        self.prefix = prefix
        self.A_bar, self.B_bar, self.C, self.D = lmu_build_matrices(cfg)
        store.add_uniform(f"{prefix}.W_x", (cfg.q, cfg.p), fan_in=cfg.p)
        store.add_uniform(f"{prefix}.W_h", (cfg.q, cfg.r), fan_in=cfg.r)
        store.add_uniform(f"{prefix}.W_m", (cfg.q, cfg.d), fan_in=cfg.d)
        if cfg.learned_readout:
            store.add(f"{prefix}.C", self.C.copy())
            store.add(f"{prefix}.D", self.D.copy())

    @property
    def state_size(self) -> tuple[int, int]:
        return self.cfg.d, self.cfg.r

    def init_state(self, batch: int) -> tuple[ad.Tensor, ad.Tensor]:
        dtype = ad.default_dtype()
        return (ad.Tensor(np.zeros((batch, self.cfg.d), dtype)),
                ad.Tensor(np.zeros((batch, self.cfg.r), dtype)))

    def _constants(self, leaves):
        a_t = ad.tensor(self.A_bar.T)
        b_t = ad.tensor(self.B_bar.T)
        if self.cfg.learned_readout:
            c_t = ad.transpose(leaves[f"{self.prefix}.C"], (1, 0))
            d_t = ad.transpose(leaves[f"{self.prefix}.D"], (1, 0))
        else:
            c_t = ad.tensor(self.C.T)
            d_t = ad.tensor(self.D.T)
        return a_t, b_t, c_t, d_t

    def step(self, leaves, state, x_t: ad.Tensor):
        """One update: project (x_t, h, m) to u, advance the memory, read out h."""
        m, h = state
        wx = ad.transpose(leaves[f"{self.prefix}.W_x"], (1, 0))
        wh = ad.transpose(leaves[f"{self.prefix}.W_h"], (1, 0))
        wm = ad.transpose(leaves[f"{self.prefix}.W_m"], (1, 0))
        a_t, b_t, c_t, d_t = self._constants(leaves)
        u = ad.add(ad.add(ad.matmul(x_t, wx), ad.matmul(h, wh)), ad.matmul(m, wm))
        if self.cfg.nonlinearity_on_u:
            u = ad.tanh(u)
        m_new = ad.add(ad.matmul(m, a_t), ad.matmul(u, b_t))
        h_new = ad.add(ad.matmul(m_new, c_t), ad.matmul(u, d_t))
        return (m_new, h_new), h_new

    def forward(self, leaves, xs: ad.Tensor, return_memory: bool = False):
        """Scan over (B, T, p) input from zero state; returns the list of h_t
        (and optionally m_t) without stacking so callers pick what they need."""
        B, T, p = xs.shape
        wx = ad.transpose(leaves[f"{self.prefix}.W_x"], (1, 0))
        wh = ad.transpose(leaves[f"{self.prefix}.W_h"], (1, 0))
        wm = ad.transpose(leaves[f"{self.prefix}.W_m"], (1, 0))
        a_t, b_t, c_t, d_t = self._constants(leaves)
        # input projection for every frame in one matmul
        flat = ad.reshape(xs, (B * T, p))
        xproj = ad.reshape(ad.matmul(flat, wx), (B, T, self.cfg.q))
        m, h = self.init_state(B)
        hs, ms = [], []
        for t in range(T):
            xp_t = ad.reshape(ad.narrow(xproj, 1, t, 1), (B, self.cfg.q))
            u = ad.add(ad.add(xp_t, ad.matmul(h, wh)), ad.matmul(m, wm))
            if self.cfg.nonlinearity_on_u:
                u = ad.tanh(u)
            m = ad.add(ad.matmul(m, a_t), ad.matmul(u, b_t))
            h = ad.add(ad.matmul(m, c_t), ad.matmul(u, d_t))
            hs.append(h)
            if return_memory:
                ms.append(m)
        return (hs, ms) if return_memory else hs


class LstmCell:
    """Standard LSTM with input, forget, and output gates."""

    def __init__(self, p: int, r: int, store: ParamStore, prefix: str = "lstm"):
        self.p, self.r = p, r
        self.prefix = prefix
        for gate in ("i", "f", "o", "c"):
            store.add_uniform(f"{prefix}.W_{gate}", (r, p), fan_in=p)
            store.add_uniform(f"{prefix}.U_{gate}", (r, r), fan_in=r)
            init = np.ones(r) if gate == "f" else np.zeros(r)
            store.add(f"{prefix}.b_{gate}", init, decay=False)

    @property
    def state_size(self) -> tuple[int, int]:
        return self.r, self.r

    def init_state(self, batch: int) -> tuple[ad.Tensor, ad.Tensor]:
        dtype = ad.default_dtype()
        return (ad.Tensor(np.zeros((batch, self.r), dtype)),
                ad.Tensor(np.zeros((batch, self.r), dtype)))

    def _weights(self, leaves):
        out = {}
        for gate in ("i", "f", "o", "c"):
            out[gate] = (
                ad.transpose(leaves[f"{self.prefix}.W_{gate}"], (1, 0)),
                ad.transpose(leaves[f"{self.prefix}.U_{gate}"], (1, 0)),
                leaves[f"{self.prefix}.b_{gate}"],
            )
        return out

    def step(self, leaves, state, x_t: ad.Tensor):
        c, h = state
        w = self._weights(leaves)
        gates = {}
        for gate in ("i", "f", "o", "c"):
            wx, uh, b = w[gate]
            gates[gate] = ad.add(ad.add(ad.matmul(x_t, wx), ad.matmul(h, uh)), b)
        i = ad.sigmoid(gates["i"])
        f = ad.sigmoid(gates["f"])
        o = ad.sigmoid(gates["o"])
        g = ad.tanh(gates["c"])
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return (c_new, h_new), h_new

    def forward(self, leaves, xs: ad.Tensor):
        B, T, p = xs.shape
        w = self._weights(leaves)
        flat = ad.reshape(xs, (B * T, p))
        xprojs = {
            gate: ad.reshape(ad.matmul(flat, w[gate][0]), (B, T, self.r))
            for gate in ("i", "f", "o", "c")
        }
        c, h = self.init_state(B)
        hs = []
        for t in range(T):
            acts = {}
            for gate in ("i", "f", "o", "c"):
                xp = ad.reshape(ad.narrow(xprojs[gate], 1, t, 1), (B, self.r))
                acts[gate] = ad.add(ad.add(xp, ad.matmul(h, w[gate][1])), w[gate][2])
            i = ad.sigmoid(acts["i"])
            f = ad.sigmoid(acts["f"])
            o = ad.sigmoid(acts["o"])
            g = ad.tanh(acts["c"])
            c = ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
            hs.append(h)
        return hs


def count_recurrent_params(cell) -> int:
    """Learned recurrent parameter count; fixed memory matrices excluded."""
    if isinstance(cell, LmuCell):
        cfg = cell.cfg
        n = cfg.q * (cfg.p + cfg.r + cfg.d)
        if cfg.learned_readout:
            n += cfg.r * cfg.d + cfg.r * cfg.q
        return n
    if isinstance(cell, LstmCell):
        return 4 * (cell.r * cell.p + cell.r * cell.r + cell.r)
    raise ConfigError(f"unknown cell type {type(cell).__name__}")
