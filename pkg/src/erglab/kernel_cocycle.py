"""Random transition operators, their cocycle products and Doeblin minorizations.

``R_omega`` depends only on omega_0, so a kernel set is one stochastic matrix
per environment symbol.  Forward products compose R_{omega_0} ... R_{omega_{n-1}};
backward products compose R_{omega_{-n}} ... R_{omega_{-1}}.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from erglab.env_process import EnvModel, PathWindow, WindowError

log = logging.getLogger(__name__)

ROW_TOL = 1e-12
DRIFT_TOL = 1e-10
# gamma >= delta is decided with this slack so exactly-representable ties count
GAMMA_SLACK = 1e-12


@dataclass(frozen=True)
class KernelSet:
    """One ``state_size x state_size`` row-stochastic matrix per symbol."""

    kernels: np.ndarray = field(repr=False)
    supports: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def state_size(self) -> int:
        return int(self.kernels.shape[1])

    @property
    def alphabet_size(self) -> int:
        return int(self.kernels.shape[0])

    def __getitem__(self, symbol: int) -> np.ndarray:
        return self.kernels[symbol]


def build_kernel_set(
    matrices: Sequence[Sequence[Sequence[float]]],
    supports: Optional[Sequence[Sequence[bool]]] = None,
) -> KernelSet:
    K = np.asarray(matrices, dtype=float)
    if K.ndim != 3 or K.shape[1] != K.shape[2]:
        raise ValueError(f"kernels must have shape (symbols, d, d), got {K.shape}")
    if not np.all(np.isfinite(K)):
        raise ValueError("kernels have non-finite entries")
    if np.any(K < 0):
        s, i, _ = np.argwhere(K < 0)[0]
        raise ValueError(f"kernel {s} row {i} has a negative entry")
    sums = K.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
    if bad.size:
        s, i = bad[0]
        raise ValueError(f"kernel {s} row {i} sums to {sums[s, i]!r}, not 1")
    K.setflags(write=False)
    S = None
    if supports is not None:
        S = np.asarray(supports, dtype=bool)
        if S.shape != K.shape[:2]:
            raise ValueError(f"supports must have shape {K.shape[:2]}")
        if not S.any(axis=1).all():
            raise ValueError("every symbol needs a nonempty support")
        S.setflags(write=False)
    return KernelSet(K, S)


def check_supports(kernel_set: KernelSet, env: EnvModel) -> None:
    """Mass leaving support(s) must land in support(s') for every reachable pair s -> s'."""
    if kernel_set.supports is None:
        return
    k = env.alphabet_size
    if env.kind == "iid":
        allowed = np.outer(env.marginal > 0, env.marginal > 0)
    else:
        allowed = env.transition > 0
    S = kernel_set.supports
    for s in range(k):
        for t in range(k):
            if not allowed[s, t]:
                continue
            leak = kernel_set.kernels[s][np.ix_(S[s], ~S[t])]
            if leak.size and leak.max() > 0:
                raise ValueError(f"kernel {s} sends mass outside support of symbol {t}")


def _renormalize(B: np.ndarray) -> np.ndarray:
    np.clip(B, 0.0, None, out=B)
    drift = np.abs(B.sum(axis=-1) - 1.0).max()
    if drift > DRIFT_TOL:
        log.debug("renormalizing product rows, drift %.3e", drift)
        B /= B.sum(axis=-1, keepdims=True)
    return B


def chain_product(kernel_set: KernelSet, symbols: Sequence[int]) -> np.ndarray:
    """R_{s_0} R_{s_1} ... R_{s_{n-1}} for symbols in time order."""
    B = np.eye(kernel_set.state_size)
    K = kernel_set.kernels
    for s in symbols:
        B = B @ K[s]
    return _renormalize(B)


def forward_product(kernel_set: KernelSet, window: PathWindow, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be nonnegative")
    return chain_product(kernel_set, window.span(0, n))


def backward_product(kernel_set: KernelSet, window: PathWindow, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be nonnegative")
    return chain_product(kernel_set, window.span(-n, 0))


def minorization_gamma(B: np.ndarray) -> np.ndarray:
    """Sum of column minima; works on stacks of matrices."""
    return B.min(axis=-2).sum(axis=-1)


def minorize(matrix: np.ndarray):
    """Column-minimum minorization B_xj >= gamma * m_j.

    Returns ``(gamma, m)``; ``m`` is None when gamma = 0.
    """
    B = np.asarray(matrix, dtype=float)
    colmin = B.min(axis=0)
    gamma = float(colmin.sum())
    if gamma <= 0.0:
        return 0.0, None
    return min(gamma, 1.0), colmin / colmin.sum()


def dobrushin(matrix: np.ndarray) -> np.ndarray:
    """max over row pairs of half the l1 distance; accepts stacks of matrices."""
    B = np.asarray(matrix, dtype=float)
    diff = np.abs(B[..., :, None, :] - B[..., None, :, :]).sum(axis=-1)
    out = 0.5 * diff.max(axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Minorization:
    """B_{xj} >= gamma * m_j for the backward product of depth ``n``."""

    n: int
    gamma: float
    m: np.ndarray


def doeblin_time(
    kernel_set: KernelSet, window: PathWindow, delta_min: float, n_max: int
) -> Optional[Minorization]:
    """Smallest backward depth n <= n_max whose product minorizes with gamma >= delta_min.

    Returns None when no depth up to ``n_max`` qualifies.
    """
    if not 0.0 < delta_min <= 1.0:
        raise ValueError("delta_min must lie in (0, 1]")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    B = np.eye(kernel_set.state_size)
    for n in range(1, n_max + 1):
        B = kernel_set.kernels[window.at(-n)] @ B
        gamma, m = minorize(B)
        if gamma >= delta_min - GAMMA_SLACK:
            return Minorization(n, gamma, m)
    return None


def doeblin_hits(
    kernel_set: KernelSet, recent: np.ndarray, delta_min: float, n_max: int
) -> np.ndarray:
    """Vectorized membership in {gamma_omega >= delta_min, n_omega <= n_max}.

    ``recent[b, j]`` is omega_{-1-j} for base point ``b``.
    """
    recent = np.asarray(recent, dtype=np.int64)
    count = recent.shape[0]
    d = kernel_set.state_size
    if recent.shape[1] < n_max or (recent[:, :n_max] < 0).any():
        raise WindowError(f"membership test needs {n_max} past symbols")
    B = np.broadcast_to(np.eye(d), (count, d, d)).copy()
    hit = np.zeros(count, dtype=bool)
    for n in range(n_max):
        B = kernel_set.kernels[recent[:, n]] @ B
        hit |= minorization_gamma(B) >= delta_min - GAMMA_SLACK
    return hit
