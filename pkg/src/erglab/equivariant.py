"""Equivariant measures mu_omega as limits of backward products.

Distances between a stochastic matrix ``B`` and a measure ``mu`` use the
operator convention ``max_i sum_j |B_ij - mu_j|``, i.e. the sup-norm of
``(B - 1 mu) g`` over test functions with ``|g| <= 1``.  It is twice the
largest row-wise total-variation distance and lies in [0, 2].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from erglab.env_process import PathWindow, WindowBatch, WindowError
from erglab.kernel_cocycle import KernelSet, backward_product, doeblin_hits

MU_TOL = 1e-10
MU_N_MAX = 512


def op_distance(a, b) -> np.ndarray:
    """Operator distance between a matrix and a measure, or between two measures.

    Stacked inputs are accepted; leading axes broadcast.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim >= 2 and a.ndim == b.ndim + 1:
        out = np.abs(a - b[..., None, :]).sum(axis=-1).max(axis=-1)
    elif a.ndim == b.ndim:
        out = np.abs(a - b).sum(axis=-1)
    else:
        raise ValueError(f"cannot compare shapes {a.shape} and {b.shape}")
    return float(out) if out.ndim == 0 else out


def row_diameter(B: np.ndarray) -> np.ndarray:
    """max_{i,i'} sum_j |B_ij - B_i'j| for a stack of matrices."""
    return np.abs(B[..., :, None, :] - B[..., None, :, :]).sum(axis=-1).max(axis=(-2, -1))


@dataclass(frozen=True)
class EquivariantMeasure:
    mu: np.ndarray
    error_bound: float
    depth: int
    converged: bool


def backward_limit(
    kernel_set: KernelSet, recent: np.ndarray, tol: float = MU_TOL, n_max: int = MU_N_MAX
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched backward iteration.

    ``recent[b, k]`` holds omega_{-1-k} for base point ``b`` (``-1`` if not sampled).
    Each row is iterated until the row-diameter of its backward product drops
    to ``tol`` or depth ``n_max`` is reached.  Returns ``(mu, diameter, depth,
    converged)`` where ``mu`` is the mean row at the stopping depth.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    recent = np.asarray(recent, dtype=np.int64)
    count = recent.shape[0]
    d = kernel_set.state_size
    K = kernel_set.kernels
    B = np.broadcast_to(np.eye(d), (count, d, d)).copy()
    diam = row_diameter(B)
    depth = np.zeros(count, dtype=np.int64)
    active = diam > tol
    for n in range(1, n_max + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        if n > recent.shape[1]:
            raise WindowError(f"backward iteration needs omega_{-n}, beyond the window")
        sym = recent[idx, n - 1]
        if (sym < 0).any():
            raise WindowError(f"backward iteration needs omega_{-n}, beyond the window")
        Bi = K[sym] @ B[idx]
        np.clip(Bi, 0.0, None, out=Bi)
        B[idx] = Bi
        diam[idx] = row_diameter(Bi)
        depth[idx] = n
        active[idx] = diam[idx] > tol
    mu = B.mean(axis=1)
    mu /= mu.sum(axis=1, keepdims=True)
    return mu, diam, depth, ~active


def equivariant_measure(
    kernel_set: KernelSet, window: PathWindow, tol: float = MU_TOL, n_max: int = MU_N_MAX
) -> EquivariantMeasure:
    recent = window.recent(n_max)[None, :]
    mu, diam, depth, conv = backward_limit(kernel_set, recent, tol, n_max)
    return EquivariantMeasure(mu[0], float(diam[0]), int(depth[0]), bool(conv[0]))


def measures_along(
    kernel_set: KernelSet,
    window: PathWindow,
    start: int,
    stop: int,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
):
    """mu at theta^s omega for s in [start, stop), computed as one batch."""
    shifts = np.arange(start, stop)
    window.require(start - 1, stop - 2)
    base = window.past_len + shifts
    k = np.arange(n_max)
    pos = base[:, None] - 1 - k[None, :]
    recent = np.where(pos >= 0, window.symbols[np.clip(pos, 0, None)], -1)
    return backward_limit(kernel_set, recent, tol, n_max)


def measures_at_shift(
    kernel_set: KernelSet, batch: WindowBatch, shift: int, tol: float = MU_TOL, n_max: int = MU_N_MAX
):
    """mu at theta^shift omega for every window of a batch."""
    return backward_limit(kernel_set, batch.recent(n_max, shift), tol, n_max)


class ConvergenceError(RuntimeError):
    """The backward iteration did not reach the requested tolerance."""


def equivariance_residual(
    kernel_set: KernelSet, window: PathWindow, tol: float = MU_TOL, n_max: int = MU_N_MAX
) -> float:
    """op_distance(mu_omega R_{omega_0}, mu_{theta omega})."""
    here = equivariant_measure(kernel_set, window, tol, n_max)
    there = equivariant_measure(kernel_set, window.shift(1), tol, n_max)
    if not (here.converged and there.converged):
        raise ConvergenceError("equivariant measure did not converge within n_max")
    pushed = here.mu @ kernel_set.kernels[window.at(0)]
    return op_distance(pushed, there.mu)


def equivariance_residuals(
    kernel_set: KernelSet, batch: WindowBatch, tol: float = MU_TOL, n_max: int = MU_N_MAX
):
    """Batched residuals; entries for unconverged windows are NaN."""
    mu0, _, _, c0 = measures_at_shift(kernel_set, batch, 0, tol, n_max)
    mu1, _, _, c1 = measures_at_shift(kernel_set, batch, 1, tol, n_max)
    pushed = np.einsum("bi,bij->bj", mu0, kernel_set.kernels[batch.column(0)])
    res = op_distance(pushed, mu1)
    return np.where(c0 & c1, res, np.nan)


def block_visits(
    kernel_set: KernelSet, window: PathWindow, delta: float, M: int, n: int
) -> int:
    """Number of j in 1..floor(n/M)-1 with theta^{-jM} omega in the block event A."""
    J = n // M - 1
    if J <= 0:
        return 0
    batch = WindowBatch(window.past_len, window.future_len, window.symbols[None, :])
    return int(block_visit_counts(kernel_set, batch, delta, M, J)[0, -1])


def block_visit_counts(
    kernel_set: KernelSet, batch: WindowBatch, delta: float, M: int, J: int
) -> np.ndarray:
    """Cumulative visit counts: entry [b, j-1] counts hits at blocks 1..j."""
    hits = np.zeros((len(batch), J), dtype=np.int64)
    for j in range(1, J + 1):
        recent = batch.recent(M, shift=-j * M)
        hits[:, j - 1] = doeblin_hits(kernel_set, recent, delta, M)
    return np.cumsum(hits, axis=1)


def visits_for_depths(cum_visits: np.ndarray, M: int, n_values: np.ndarray) -> np.ndarray:
    """Visit counts for each depth n, given cumulative block hits."""
    J = np.asarray(n_values) // M - 1
    padded = np.concatenate([np.zeros((cum_visits.shape[0], 1), dtype=np.int64), cum_visits], axis=1)
    return padded[:, np.maximum(J, 0)]


def pathwise_bound(
    kernel_set: KernelSet, window: PathWindow, delta: float, M: int, n: int
) -> float:
    """2 (1 - delta)^visits with visits counted over blocks 1..floor(n/M)-1."""
    if M < 1:
        raise ValueError("M must be >= 1")
    v = block_visits(kernel_set, window, delta, M, n)
    return 2.0 * (1.0 - delta) ** v


def backward_distances(
    kernel_set: KernelSet, recent: np.ndarray, mu: np.ndarray, n_max: int, stop_tol: float = 0.0
) -> Tuple[np.ndarray, np.ndarray]:
    """op_distance(B_n, mu) and row-diameter of B_n for n = 1..n_max (columns n-1).

    Depths whose symbol lies outside the window are left as NaN.  With
    ``stop_tol > 0`` the loop ends once every row's diameter is at or below it.
    """
    recent = np.asarray(recent, dtype=np.int64)
    count = recent.shape[0]
    d = kernel_set.state_size
    K = kernel_set.kernels
    B = np.broadcast_to(np.eye(d), (count, d, d)).copy()
    dist = np.full((count, n_max), np.nan)
    diam = np.full((count, n_max), np.nan)
    for n in range(1, min(n_max, recent.shape[1]) + 1):
        ok = recent[:, n - 1] >= 0
        if not ok.any():
            break
        idx = np.flatnonzero(ok)
        B[idx] = K[recent[idx, n - 1]] @ B[idx]
        dist[idx, n - 1] = op_distance(B[idx], mu[idx])
        diam[idx, n - 1] = row_diameter(B[idx])
        if stop_tol > 0 and np.all(np.nan_to_num(diam[:, n - 1], nan=0.0) <= stop_tol):
            break
    return dist, diam


def backward_product_distance(
    kernel_set: KernelSet, window: PathWindow, mu: np.ndarray, n: int
) -> float:
    return op_distance(backward_product(kernel_set, window, n), mu)
