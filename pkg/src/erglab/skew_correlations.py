"""Annealed correlations of the skew product and their exponential decay.

For observables f(omega_0, x), g(omega_0, x),

    E[(f o pi_0)(g o pi_n)] = E_P[ mu_omega( f_{omega_0} * R_{omega,n} g_{omega_n} ) ].

The inner expectation is exact matrix algebra on each sampled window; only the
outer average over environments is Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from erglab import _rng
from erglab.env_process import EnvModel, WindowBatch, sample_windows
from erglab.equivariant import MU_N_MAX, MU_TOL, measures_at_shift
from erglab.kernel_cocycle import KernelSet

ABS_FLOOR = 1e-13
MIN_LAGS = 6


@dataclass(frozen=True)
class SkewObservablePair:
    f: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)
    q: float = 8.0

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        g = np.asarray(self.g, dtype=float)
        if f.shape != g.shape or f.ndim != 2:
            raise ValueError("f and g must be (symbols, states) tables of equal shape")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise ValueError("observable tables have non-finite entries")
        if not self.q > 2:
            raise ValueError("q must exceed 2")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "g", g)

    def swapped(self) -> "SkewObservablePair":
        return SkewObservablePair(self.g, self.f, self.q)


@dataclass(frozen=True)
class CovarianceProfile:
    n: np.ndarray
    cov: np.ndarray
    stderr: np.ndarray
    samples: int
    skipped: int
    # |bias| from the measure tolerance; lags below it carry no signal
    bias_bound: float = 0.0


def _window_terms(kernel_set: KernelSet, batch: WindowBatch, pair: SkewObservablePair, n_max: int, tol, mu_n_max):
    """Per-window a_n = mu(f R_n g), b = mu(f), c_n = mu_{theta^n}(g) for n = 0..n_max."""
    count = len(batch)
    d = kernel_set.state_size
    K = kernel_set.kernels
    mu0, _, _, ok = measures_at_shift(kernel_set, batch, 0, tol, mu_n_max)
    f0 = pair.f[batch.column(0)]
    b = (mu0 * f0).sum(axis=1)
    a = np.empty((count, n_max + 1))
    c = np.empty((count, n_max + 1))
    F = np.broadcast_to(np.eye(d), (count, d, d)).copy()
    for n in range(n_max + 1):
        if n > 0:
            F = F @ K[batch.column(n - 1)]
        gn = pair.g[batch.column(n)]
        a[:, n] = (mu0 * f0 * np.einsum("bij,bj->bi", F, gn)).sum(axis=1)
        mun, _, _, conv = measures_at_shift(kernel_set, batch, n, tol, mu_n_max)
        ok &= conv
        c[:, n] = (mun * gn).sum(axis=1)
    return a[ok], b[ok], c[ok], int((~ok).sum())


def covariance_profile(
    env: EnvModel,
    kernel_set: KernelSet,
    pair: SkewObservablePair,
    n_max: int,
    samples: int,
    seed: int = 0,
    tol: float = MU_TOL,
    mu_n_max: int = MU_N_MAX,
    workers: int = 1,
) -> CovarianceProfile:
    """Annealed Cov(f o pi_0, g o pi_n) for n = 0..n_max.

    The standard error uses the delta-method influence a - c_bar b - b_bar c.
    A one-symbol environment has zero sampling error.
    """
    if n_max < 0 or samples < 1:
        raise ValueError("need n_max >= 0 and samples >= 1")
    if env.alphabet_size == 1:
        samples = 1

    def block(rng, count, _offset):
        w = sample_windows(env, mu_n_max, n_max, count, rng)
        return _window_terms(kernel_set, w, pair, n_max, tol, mu_n_max)

    parts = _rng.map_blocks(block, samples, seed, "covariance", workers)
    a = np.concatenate([p[0] for p in parts])
    b = np.concatenate([p[1] for p in parts])
    c = np.concatenate([p[2] for p in parts])
    skipped = sum(p[3] for p in parts)
    N = a.shape[0]
    if N == 0:
        raise RuntimeError("every window failed mu convergence")
    a_bar, b_bar, c_bar = a.mean(axis=0), b.mean(), c.mean(axis=0)
    cov = a_bar - b_bar * c_bar
    if N > 1 and env.alphabet_size > 1:
        infl = a - c_bar[None, :] * b[:, None] - b_bar * c
        se = infl.std(axis=0, ddof=1) / math.sqrt(N)
    else:
        se = np.zeros_like(cov)
    bias = 4.0 * tol * np.abs(pair.f).max() * np.abs(pair.g).max()
    return CovarianceProfile(np.arange(n_max + 1), cov, se, N, skipped, float(bias))


def fit_profile(profile: CovarianceProfile, min_lags: int = MIN_LAGS) -> "DecayFit":
    """decay_fit with the floor raised to the profile's tolerance bias."""
    floor = max(ABS_FLOOR, profile.bias_bound)
    return decay_fit(profile.n, profile.cov, profile.stderr, abs_floor=floor, min_lags=min_lags)


def covariance(
    env: EnvModel,
    kernel_set: KernelSet,
    pair: SkewObservablePair,
    n: int,
    samples: int,
    seed: int = 0,
    **kw,
):
    """Single-lag covariance; returns ``(cov, stderr)``."""
    prof = covariance_profile(env, kernel_set, pair, n, samples, seed, **kw)
    return float(prof.cov[n]), float(prof.stderr[n])


@dataclass(frozen=True)
class DecayFit:
    rate: float
    slope: float
    intercept: float
    lags: np.ndarray
    inconclusive: bool


def decay_fit(n, cov, stderr=None, abs_floor: float = ABS_FLOOR, min_lags: int = MIN_LAGS) -> DecayFit:
    """exp of the least-squares slope of log|cov| against n.

    Only lags with |cov| above both 3 standard errors and ``abs_floor`` enter
    the fit; fewer than ``min_lags`` of them gives an inconclusive result.
    """
    n = np.asarray(n, dtype=float)
    cov = np.asarray(cov, dtype=float)
    se = np.zeros_like(cov) if stderr is None else np.asarray(stderr, dtype=float)
    keep = (np.abs(cov) > 3.0 * se) & (np.abs(cov) > abs_floor)
    lags = n[keep]
    if lags.size < min_lags:
        return DecayFit(math.nan, math.nan, math.nan, lags, True)
    slope, intercept = np.polyfit(lags, np.log(np.abs(cov[keep])), 1)
    return DecayFit(float(math.exp(slope)), float(slope), float(intercept), lags, False)


def corr_rate_bound(rho_cert: float, rho_env_rate: float) -> float:
    """rho_corr = max(rho_env_rate^(1/2), rho_cert^(1/4))."""
    if not 0.0 < rho_cert < 1.0:
        raise ValueError("rho_cert must lie in (0, 1)")
    if not 0.0 <= rho_env_rate < 1.0:
        raise ValueError("rho_env_rate must lie in [0, 1)")
    return max(math.sqrt(rho_env_rate), rho_cert**0.25)


def env_rho_rate(env: EnvModel) -> float:
    """Geometric rate of the environment's rho-mixing coefficient.

    For a reversible Markov environment rho(n) = |lambda_2|^n; in general the
    second-largest eigenvalue modulus bounds the asymptotic rate.  i.i.d. gives 0.
    """
    if env.kind == "iid" or env.alphabet_size == 1:
        return 0.0
    ev = np.sort(np.abs(np.linalg.eigvals(env.transition)))[::-1]
    return float(ev[1])


def lq_norm(table: np.ndarray, env: EnvModel, q: float) -> float:
    """||F||_{L^q(P)} with F_omega = max_x |table[omega_0, x]|, by enumeration over symbols."""
    F = np.abs(np.asarray(table, dtype=float)).max(axis=1)
    return float((env.marginal @ F**q) ** (1.0 / q))


@dataclass(frozen=True)
class Envelope:
    rho_corr: float
    constant: float
    bound: np.ndarray
    violations: int
    margin: float  # min over checked lags of bound + 3 SE - |cov|


def envelope_check(
    profile: CovarianceProfile, rho_corr: float, norm_f: float, norm_g: float, n_check: int = 30
) -> Envelope:
    """|cov(n)| <= C rho_corr^n ||F||_q ||G||_q for 1 <= n <= n_check, C fitted at n = 1."""
    scale = norm_f * norm_g
    n = profile.n
    if scale == 0.0:
        bound = np.zeros(n.size)
        C = 0.0
    else:
        C = abs(profile.cov[1]) / (rho_corr * scale) if n.size > 1 else 0.0
        bound = C * rho_corr ** n.astype(float) * scale
    sel = (n >= 1) & (n <= n_check)
    slack = bound[sel] + 3.0 * profile.stderr[sel] - np.abs(profile.cov[sel])
    # rounding in the fitted constant leaves n = 1 an ulp short
    slack = slack + 1e-15 * max(abs(profile.cov[1]) if n.size > 1 else 0.0, 1e-300)
    return Envelope(rho_corr, C, bound, int((slack < 0).sum()), float(slack.min()) if slack.size else math.inf)


def homogeneous_covariance(P: np.ndarray, pi: np.ndarray, f: np.ndarray, g: np.ndarray, n: int) -> float:
    """pi(fbar P^n gbar) for a homogeneous chain."""
    fb = f - pi @ f
    gb = g - pi @ g
    return float(pi @ (fb * (np.linalg.matrix_power(P, n) @ gb)))
