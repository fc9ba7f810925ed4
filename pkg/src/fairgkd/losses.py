"""Hard loss (BCE), NT-Xent contrastive loss and the adaptive loss balancer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_CLAMP = 1e-12


def bce(probs: Tensor, labels, mask) -> Tensor:
    """Mean binary cross-entropy of a probability column over ``mask`` rows."""
    idx = np.asarray(mask, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("bce over an empty mask")
    if probs.cols != 1:
        raise T.ShapeError(f"bce expects one probability column, got {probs.shape}")
    y = np.asarray(labels, dtype=np.float64)[idx]
    p = probs.values[idx, 0]
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    k = idx.size
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)) / k
    inside = (p >= PROB_CLAMP) & (p <= 1.0 - PROB_CLAMP)
    n = probs.rows

    def grad_fn(g):
        local = -(y / pc - (1.0 - y) / (1.0 - pc)) / k * inside * g[0, 0]
        out = np.zeros((n, 1))
        np.add.at(out[:, 0], idx, local)
        return (out,)

    return T.custom_op(np.array([[loss]]), (probs,), grad_fn)


@dataclass
class ContrastiveConfig:
    """``tau`` is the temperature; ``sim_head`` is an optional map applied to
    both sides before cosine similarity (identity when ``None``).

    With ``allow_zero_rows`` an all-zero row has cosine 0 to every row instead
    of being rejected.
    """

    tau: float = 0.5
    sim_head: Callable[[Tensor], Tensor] | None = None
    allow_zero_rows: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature must be positive")


def _cosine_matrix(a: np.ndarray, b: np.ndarray, allow_zero: bool = False) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        if not allow_zero:
            raise ValueError("cosine similarity of a zero row is undefined")
        na, nb = np.where(na == 0, 1.0, na), np.where(nb == 0, 1.0, nb)
    return (a / na[:, None]) @ (b / nb[:, None]).T


def nt_xent_pair(i: int, h, h2, cfg: ContrastiveConfig | None = None) -> float:
    """Loss of the positive pair ``(h[i], h2[i])`` evaluated directly.

    Negatives are every ``h2[j]`` with ``j != i`` and every ``h[j]`` with
    ``j != i``; the positive itself also sits in the denominator.
    """
    cfg = cfg or ContrastiveConfig()
    h = h if isinstance(h, Tensor) else Tensor(h)
    h2 = h2 if isinstance(h2, Tensor) else Tensor(h2)
    if h.shape != h2.shape:
        raise T.ShapeError(f"paired representations differ in shape: {h.shape} vs {h2.shape}")
    if cfg.sim_head is not None:
        with T.no_grad():
            h, h2 = cfg.sim_head(h), cfg.sim_head(h2)
    a, b = h.values, h2.values
    cross = _cosine_matrix(a[i:i + 1], b, cfg.allow_zero_rows)[0] / cfg.tau
    own = _cosine_matrix(a[i:i + 1], a, cfg.allow_zero_rows)[0] / cfg.tau
    own = np.delete(own, i)
    top = max(cross.max(), own.max() if own.size else -np.inf)
    denom = np.exp(cross - top).sum() + np.exp(own - top).sum()
    return float(-(cross[i] - top) + math.log(denom))


def _offdiag_exp_rowsum(z: np.ndarray, c: float) -> np.ndarray:
    e = z @ z.T
    e -= 1.0
    e *= c
    np.exp(e, out=e)
    np.fill_diagonal(e, 0.0)
    return e.sum(axis=1), e


def _nt_xent_unit(za: Tensor, zb: Tensor, tau: float, bb_rowsum: np.ndarray | None = None) -> Tensor:
    """Symmetric NT-Xent on row-normalized inputs (fused forward/backward).

    ``bb_rowsum`` may carry the precomputed off-diagonal row sums of
    ``exp((zb zb^T - 1) / tau)`` when ``zb`` is a constant target.
    """
    a, b = za.values, zb.values
    n = a.shape[0]
    c = 1.0 / tau
    need_a, need_b = za.requires_grad, zb.requires_grad
    # shift by the largest attainable similarity (1) so every exponent is <= 0
    e = a @ np.concatenate([b, a]).T
    e -= 1.0
    e *= c
    np.exp(e, out=e)
    e_ab, e_aa = e[:, :n], e[:, n:]
    np.fill_diagonal(e_aa, 0.0)
    e_bb = None
    if bb_rowsum is None or need_b:
        bb_rowsum, e_bb = _offdiag_exp_rowsum(b, c)
    d_a = e.sum(axis=1)
    d_b = e_ab.sum(axis=0) + bb_rowsum
    pos = (np.einsum("ij,ij->i", a, b) - 1.0) * c
    loss = (np.sum(np.log(d_a)) + np.sum(np.log(d_b)) - 2.0 * np.sum(pos)) / (2.0 * n)
    if not need_b:
        e_bb = None

    # Backward without n x n temporaries: row/column scalings by 1/d are
    # folded into the dense factors, and e_aa, e_bb are symmetric.
    def grad_fn(g):
        k = g[0, 0] * c / (2.0 * n)
        ga = gb = None
        ra, rb = 1.0 / d_a[:, None], 1.0 / d_b[:, None]
        if need_a:
            ga = (e @ np.concatenate([b, a])) * ra
            ga += e @ np.concatenate([b * rb, a * ra])
            ga -= 2.0 * b
            ga *= k
        if need_b:
            gb = (e_ab.T @ a + e_bb @ b) * rb
            gb += e_ab.T @ (a * ra) + e_bb @ (b * rb)
            gb -= 2.0 * a
            gb *= k
        return ga, gb

    return T.custom_op(np.array([[loss]]), (za, zb), grad_fn)


def nt_xent(h: Tensor, h2: Tensor, cfg: ContrastiveConfig | None = None) -> Tensor:
    """Mean of both directed pair losses over all rows; symmetric in its inputs."""
    cfg = cfg or ContrastiveConfig()
    if h.shape != h2.shape:
        raise T.ShapeError(f"paired representations differ in shape: {h.shape} vs {h2.shape}")
    if cfg.sim_head is not None:
        h, h2 = cfg.sim_head(h), cfg.sim_head(h2)
    z = cfg.allow_zero_rows
    return _nt_xent_unit(T.row_l2_normalize(h, z), T.row_l2_normalize(h2, z), cfg.tau)


class FrozenTarget:
    """A constant contrastive target with its self-similarity terms cached.

    ``loss(h)`` equals ``nt_xent(h, target, cfg)`` for ``cfg`` without a
    similarity head, but skips the target-target kernel on every call.
    """

    def __init__(self, target, tau: float = 0.5, allow_zero_rows: bool = False):
        values = target.values if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
        self.allow_zero_rows = allow_zero_rows
        with T.no_grad():
            self.z = T.row_l2_normalize(Tensor._wrap(np.array(values, dtype=np.float64)), allow_zero_rows)
        self.tau = float(tau)
        self.rowsum, _ = _offdiag_exp_rowsum(self.z.values, 1.0 / self.tau)

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape

    def loss(self, h: Tensor) -> Tensor:
        if h.shape != self.z.shape:
            raise T.ShapeError(f"paired representations differ in shape: {h.shape} vs {self.z.shape}")
        return _nt_xent_unit(T.row_l2_normalize(h, self.allow_zero_rows), self.z, self.tau, self.rowsum)


def mse(h: Tensor, h2: Tensor) -> Tensor:
    """Mean squared error; memory-light alternative soft loss."""
    if h.shape != h2.shape:
        raise T.ShapeError(f"mse shapes differ: {h.shape} vs {h2.shape}")
    return T.mean(T.square(T.sub(h, h2)))


# ---------------------------------------------------------------------------
# adaptive balancing


class BalancerError(RuntimeError):
    pass


@dataclass
class BalancerState:
    lr: float = 1.0
    gamma: float = 0.1
    alpha_prev: float = 0.5
    lc0: float | None = None
    lkd0: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.lr <= 1.0:
            raise ValueError("balancer lr must lie in [0, 1]")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0.0 <= self.alpha_prev <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def initialize(self, lc0: float, lkd0: float) -> None:
        if not (lc0 > 0 and lkd0 > 0):
            raise BalancerError(f"initial losses must be positive, got {lc0}, {lkd0}")
        self.lc0, self.lkd0 = float(lc0), float(lkd0)


def adaptive_coefficients(state: BalancerState, lc: float, lkd: float) -> tuple[float, float]:
    """Weight each loss by how little it has fallen relative to epoch 0.

    ``alpha = lr * rc**g / (rc**g + rkd**g) + (1 - lr) * alpha_prev`` with
    ``r = L(t) / L(0)``; ``beta = 1 - alpha``. Updates ``state.alpha_prev``.
    """
    if state.lc0 is None or state.lkd0 is None:
        raise BalancerError("initial losses not recorded")
    lc, lkd = float(lc), float(lkd)
    if not (lc > 0 and lkd > 0):
        raise BalancerError(f"loss values must be positive, got {lc}, {lkd}")
    rc = (lc / state.lc0) ** state.gamma
    rkd = (lkd / state.lkd0) ** state.gamma
    share = rc / (rc + rkd)
    alpha = state.lr * share + (1.0 - state.lr) * state.alpha_prev
    alpha = min(1.0, max(0.0, alpha))
    state.alpha_prev = alpha
    return alpha, 1.0 - alpha


def distill_loss(lc: Tensor, lkd: Tensor, alpha: float, beta: float) -> Tensor:
    if abs(alpha + beta - 1.0) > 1e-12 or alpha < 0 or beta < 0:
        raise BalancerError(f"coefficients must be non-negative and sum to 1: {alpha}, {beta}")
    return T.add(T.scale(lc, alpha), T.scale(lkd, beta))
