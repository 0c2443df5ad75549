"""Quenched mixing times N_eps(omega) and their tail bound.

N_eps(omega) is the first n >= 0 with op_distance(R_{omega,n}, mu_{theta^n omega}) <= eps.
If d_n <= K(omega) rho^{n/p} for every n, then N_eps > N forces K rho^{N/p} > eps,
and Markov's inequality gives P(N_eps > N) <= E[K^p] eps^{-p} rho^N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from erglab import _rng
from erglab.certificate import RateCertificate, forward_distances
from erglab.env_process import EnvModel, PathWindow, WindowBatch, sample_windows
from erglab.equivariant import MU_N_MAX, MU_TOL
from erglab.kernel_cocycle import KernelSet

NOT_FOUND = -1


def mu_tolerance(epsilon: float) -> float:
    """Tolerance for the shifted measures: at most eps/10."""
    return min(epsilon / 10.0, MU_TOL)


@dataclass(frozen=True)
class MixingProfile:
    """Forward distances d_n and measure error bands e_n, n = 0..n_max (columns n)."""

    dist: np.ndarray = field(repr=False)
    err: np.ndarray = field(repr=False)
    ok: np.ndarray = field(repr=False)

    @property
    def n_max(self) -> int:
        return self.dist.shape[1] - 1


def first_passage(profile: MixingProfile, epsilon: float):
    """N_eps per window, decided conservatively.

    A depth counts only when d_n + e_n <= eps.  Returns the times (``NOT_FOUND``
    where no depth qualifies) and the number of windows whose first decision
    fell inside the error band.
    """
    count = profile.dist.shape[0]
    if epsilon >= 2.0:
        return np.zeros(count, dtype=np.int64), 0
    d = profile.dist
    e = np.nan_to_num(profile.err, nan=0.0)
    valid = ~np.isnan(d)
    surely = valid & (d + e <= epsilon)
    maybe = valid & (d - e <= epsilon)
    N = np.where(surely.any(axis=1), surely.argmax(axis=1), NOT_FOUND)
    first_maybe = np.where(maybe.any(axis=1), maybe.argmax(axis=1), NOT_FOUND)
    ambiguous = int(((first_maybe != N) & (first_maybe != NOT_FOUND)).sum())
    return N.astype(np.int64), ambiguous


def mixing_profile(
    kernel_set: KernelSet, batch: WindowBatch, n_max: int, tol: float = MU_TOL, mu_n_max: int = MU_N_MAX
) -> MixingProfile:
    dist, _, err, ok = forward_distances(kernel_set, batch, n_max, tol, mu_n_max)
    return MixingProfile(dist, err, ok)


def mixing_time(
    kernel_set: KernelSet,
    window: PathWindow,
    epsilon: float,
    n_max: int,
    mu_n_max: int = MU_N_MAX,
) -> Optional[int]:
    """Smallest n <= n_max with op_distance(R_{omega,n}, mu_{theta^n omega}) <= eps, or None."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if epsilon >= 2.0:
        return 0
    window.require(0, n_max - 1)
    batch = WindowBatch(window.past_len, window.future_len, window.symbols[None, :])
    prof = mixing_profile(kernel_set, batch, n_max, mu_tolerance(epsilon), mu_n_max)
    N, _ = first_passage(prof, epsilon)
    return None if N[0] == NOT_FOUND else int(N[0])


def sample_profiles(
    env: EnvModel,
    kernel_set: KernelSet,
    n_max: int,
    samples: int,
    seed: int = 0,
    tol: float = MU_TOL,
    mu_n_max: int = MU_N_MAX,
    workers: int = 1,
) -> MixingProfile:
    def block(rng, count, _offset):
        w = sample_windows(env, mu_n_max, n_max, count, rng)
        p = mixing_profile(kernel_set, w, n_max, tol, mu_n_max)
        return p.dist, p.err, p.ok

    parts = _rng.map_blocks(block, samples, seed, "mixing", workers)
    return MixingProfile(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )


@dataclass(frozen=True)
class MixingTailReport:
    epsilon: float
    N_values: np.ndarray
    empirical_tail: np.ndarray  # P(N_eps > N)
    stderr: np.ndarray
    bound_empirical_moment: np.ndarray
    bound_analytic_moment: np.ndarray
    p: float
    rho: float
    samples: int
    skipped: int
    ambiguous: int
    not_found: int


def tail_curve(N_eps: np.ndarray, N_values: np.ndarray):
    """P(N_eps > N) with binomial standard errors; unresolved times count as exceeding."""
    big = np.where(N_eps == NOT_FOUND, np.iinfo(np.int64).max, N_eps)
    tail = (big[:, None] > N_values[None, :]).mean(axis=0)
    se = np.sqrt(tail * (1.0 - tail) / max(N_eps.size, 1))
    return tail, se


def markov_bound(moment: float, epsilon: float, p: float, rho: float, N_values) -> np.ndarray:
    """E[K^p] eps^{-p} rho^N."""
    return moment * epsilon ** (-p) * rho ** np.asarray(N_values, dtype=float)


def tail_experiment(
    env: EnvModel,
    kernel_set: KernelSet,
    certificate: RateCertificate,
    kp_moment: float,
    epsilon: float,
    N_max: int,
    samples: int,
    seed: int = 0,
    mu_n_max: int = MU_N_MAX,
    workers: int = 1,
    profile: Optional[MixingProfile] = None,
) -> MixingTailReport:
    """Empirical P(N_eps > N) against the Markov-inequality curves.

    ``kp_moment`` is an empirical E[K^p] for the forward convention; the second
    curve uses the certificate's analytic moment bound.  The rate is the
    certificate's per-step rate.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if profile is None:
        profile = sample_profiles(env, kernel_set, N_max, samples, seed, mu_tolerance(epsilon), mu_n_max, workers)
    ok = profile.ok
    sub = MixingProfile(profile.dist[ok], profile.err[ok], ok[ok])
    N_eps, ambiguous = first_passage(sub, epsilon)
    Ns = np.arange(N_max + 1)
    tail, se = tail_curve(N_eps, Ns)
    p, rho = certificate.p, certificate.rho_step
    return MixingTailReport(
        epsilon=float(epsilon),
        N_values=Ns,
        empirical_tail=tail,
        stderr=se,
        bound_empirical_moment=markov_bound(kp_moment, epsilon, p, rho, Ns),
        bound_analytic_moment=markov_bound(certificate.remark_moment_bound, epsilon, p, rho, Ns),
        p=p,
        rho=rho,
        samples=int(ok.sum()),
        skipped=int((~ok).sum()),
        ambiguous=ambiguous,
        not_found=int((N_eps == NOT_FOUND).sum()),
    )


def eps_schedule(rho: float, p: float, N) -> float:
    """eps_N = rho^{N / (2p)}."""
    out = rho ** (np.asarray(N, dtype=float) / (2.0 * p))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScheduleEnvelope:
    N_values: np.ndarray
    eps: np.ndarray
    empirical_tail: np.ndarray
    scaled: np.ndarray  # P(N_{eps_N} > N) rho^{-N/2}
    fitted_constant: float  # scaled value at N = 5
    max_scaled: float
    passed: bool


def schedule_envelope(profile: MixingProfile, rho: float, p: float, N_max: int = 20, N_fit: int = 5) -> ScheduleEnvelope:
    """Check P(N_{eps_N} > N) rho^{-N/2} <= 10 x its value at N_fit.

    The envelope is asymptotic, so the assertion covers N_fit <= N <= N_max;
    the scaled values for smaller N are still reported.
    """
    Ns = np.arange(N_max + 1)
    eps = np.array([eps_schedule(rho, p, int(N)) for N in Ns])
    ok = profile.ok
    sub = MixingProfile(profile.dist[ok], profile.err[ok], ok[ok])
    tail = np.empty(Ns.size)
    for i, (N, e) in enumerate(zip(Ns, eps)):
        times, _ = first_passage(sub, float(e))
        tail[i] = tail_curve(times, np.array([N]))[0][0]
    scaled = tail * rho ** (-Ns / 2.0)
    C = float(scaled[N_fit])
    mx = float(scaled[N_fit:].max())
    return ScheduleEnvelope(Ns, eps, tail, scaled, C, mx, bool(mx <= 10.0 * C))
