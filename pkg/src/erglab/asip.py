"""Martingale approximation of quenched partial sums.

For an observable f(omega_0, x) centered fiberwise against mu_omega, the
corrector

    chi_n = sum_{s > n} R_{theta^n omega, s-n} fbar_{theta^s omega}

turns f into martingale increments M_n = fbar_n(X_n) + chi_n(X_n) - chi_{n-1}(X_{n-1}).
The infinite sum is truncated at depth S; the truncation tail is bounded by a
geometric series built from the rate certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from erglab import _rng
from erglab.certificate import RateCertificate, select_r0, block_event_probability
from erglab.env_process import EnvModel, PathWindow, WindowBatch, psi_upper, sample_window, sample_windows
from erglab.equivariant import MU_N_MAX, MU_TOL, ConvergenceError, measures_along, measures_at_shift
from erglab.kernel_cocycle import KernelSet, doeblin_hits

TRUNCATION_TOL = 1e-8
DEFAULT_Q = 8.0
DEGENERATE_SIGMA2 = 1e-12
S_MAX = 200_000


@dataclass(frozen=True)
class Observable:
    """Table f[symbol, state]; ``q`` is the declared moment order of sup_x |f_omega(x)|."""

    values: np.ndarray = field(repr=False)
    q: float = DEFAULT_Q

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("observable table must be (symbols, states)")
        if not np.all(np.isfinite(v)):
            raise ValueError("observable table has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def sup(self) -> float:
        return float(np.abs(self.values).max())


def centered_along(
    kernel_set: KernelSet,
    window: PathWindow,
    obs: Observable,
    start: int,
    stop: int,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
) -> np.ndarray:
    """fbar_{theta^s omega} = f(omega_s, .) - mu_{theta^s omega}(f(omega_s, .)) for s in [start, stop)."""
    mu, _, _, conv = measures_along(kernel_set, window, start, stop, tol, n_max)
    if not conv.all():
        raise ConvergenceError(f"mu did not converge at {int((~conv).sum())} base points")
    raw = obs.values[window.span(start, stop)]
    return raw - (mu * raw).sum(axis=1, keepdims=True)


def center_observable(
    kernel_set: KernelSet,
    env: EnvModel,
    raw_values,
    windows: WindowBatch,
    q: float = DEFAULT_Q,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
) -> Observable:
    """Shift each symbol's row so its average mu_omega-mean over ``windows`` is zero.

    Per-symbol constants do not change fbar, so exact centering at use time
    (``centered_along``) still applies on top of this.
    """
    raw = np.asarray(raw_values, dtype=float)
    if raw.shape != (env.alphabet_size, kernel_set.state_size):
        raise ValueError(f"observable must have shape {(env.alphabet_size, kernel_set.state_size)}")
    mu, _, _, conv = measures_at_shift(kernel_set, windows, 0, tol, n_max)
    if not conv.all():
        raise ConvergenceError("mu did not converge for some centering windows")
    sym = windows.column(0)
    means = (mu * raw[sym]).sum(axis=1)
    shift = raw.mean(axis=1)
    for s in range(env.alphabet_size):
        sel = sym == s
        if sel.any():
            shift[s] = means[sel].mean()
    return Observable(raw - shift[:, None], q)


def _step(kernel_set: KernelSet, symbol: int, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(kernel_set.kernels[symbol], axis=1)
    u = rng.random(states.size)
    nxt = (u[:, None] >= cum[states]).sum(axis=1)
    return np.minimum(nxt, kernel_set.state_size - 1)


def initial_states(mu: np.ndarray, replicas: int, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(mu)
    u = rng.random(replicas)
    return np.minimum((u[:, None] >= cum[None, :]).sum(axis=1), mu.size - 1)


def simulate_chains(
    kernel_set: KernelSet,
    window: PathWindow,
    n: int,
    replicas: int,
    rng: np.random.Generator,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
) -> np.ndarray:
    """States X_0..X_n for ``replicas`` independent chains in one environment.

    X_0 ~ mu_omega and X_{j+1} ~ R_{omega_j}(X_j, .).
    """
    window.require(0, n - 1)
    mu, _, _, conv = measures_along(kernel_set, window, 0, 1, tol, n_max)
    if not conv[0]:
        raise ConvergenceError("mu_omega did not converge")
    X = np.empty((replicas, n + 1), dtype=np.int64)
    X[:, 0] = initial_states(mu[0], replicas, rng)
    syms = window.span(0, n)
    for j in range(n):
        X[:, j + 1] = _step(kernel_set, int(syms[j]), X[:, j], rng)
    return X


def simulate_chain(
    kernel_set: KernelSet, window: PathWindow, n: int, rng: np.random.Generator, **kw
) -> np.ndarray:
    return simulate_chains(kernel_set, window, n, 1, rng, **kw)[0]


# --- corrector --------------------------------------------------------------------


@dataclass(frozen=True)
class TailModel:
    """Geometric tail K * F * sum_{m > S} r^m with r = rate^(1/p)."""

    k_bound: float
    rate: float
    p: float

    @classmethod
    def from_certificate(cls, cert: RateCertificate) -> "TailModel":
        return cls(cert.remark_moment_bound ** (1.0 / cert.p), cert.rho_step, cert.p)

    @property
    def r(self) -> float:
        return self.rate ** (1.0 / self.p)

    def tail(self, F: float, S: int) -> float:
        r = self.r
        return self.k_bound * F * r ** (S + 1) / (1.0 - r)

    def depth(self, F: float, truncation_tol: float = TRUNCATION_TOL) -> int:
        """Smallest S >= 1 whose tail is <= truncation_tol."""
        if F <= 0.0:
            return 1
        r = self.r
        target = truncation_tol * (1.0 - r) / (self.k_bound * F)
        S = max(int(math.ceil(math.log(target) / math.log(r))) - 1, 1) if target < 1 else 1
        while self.tail(F, S) > truncation_tol:
            S += 1
        while S > 1 and self.tail(F, S - 1) <= truncation_tol:
            S -= 1
        if S > S_MAX:
            raise ValueError(f"truncation depth {S} exceeds {S_MAX}; loosen truncation_tol")
        return S


def chi_table(
    kernel_set: KernelSet,
    window: PathWindow,
    obs: Observable,
    start: int,
    stop: int,
    S: int,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
    fbar: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Truncated correctors chi_n for n in [start, stop), rows indexed n - start.

    ``fbar``, if given, must hold the centered observable for s in [start, stop + S).
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    if fbar is None:
        fbar = centered_along(kernel_set, window, obs, start, stop + S, tol, n_max)
    K = kernel_set.kernels
    syms = window.span(start, stop + S)
    n_idx = np.arange(stop - start)
    h = fbar[n_idx + S].copy()
    for t in range(S - 1, 0, -1):
        h = fbar[n_idx + t] + np.einsum("bij,bj->bi", K[syms[n_idx + t]], h)
    return np.einsum("bij,bj->bi", K[syms[n_idx]], h)


def chi(
    kernel_set: KernelSet,
    window: PathWindow,
    obs: Observable,
    n: int,
    S: int,
    tail_model: TailModel,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
) -> Tuple[np.ndarray, float]:
    """chi_n truncated after S terms, with the geometric bound on the dropped tail."""
    vec = chi_table(kernel_set, window, obs, n, n + 1, S, tol, n_max)[0]
    return vec, tail_model.tail(2.0 * obs.sup, S)


def martingale_residuals(
    kernel_set: KernelSet,
    window: PathWindow,
    obs: Observable,
    n_steps: int,
    S: int,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
) -> np.ndarray:
    """max_x |R_{omega_{n-1}}(fbar_n + chi_n)(x) - chi_{n-1}(x)| for n = 1..n_steps."""
    fbar = centered_along(kernel_set, window, obs, 0, n_steps + 1 + S, tol, n_max)
    ch = chi_table(kernel_set, window, obs, 0, n_steps + 1, S, tol, n_max, fbar=fbar)
    K = kernel_set.kernels[window.span(0, n_steps)]
    pushed = np.einsum("bij,bj->bi", K, fbar[1 : n_steps + 1] + ch[1:])
    return np.abs(pushed - ch[:-1]).max(axis=1)


@dataclass(frozen=True)
class MartingaleTrace:
    chain: np.ndarray  # X_0..X_{L-1}
    increments: np.ndarray  # M_0..M_{L-1}
    partial_sums_f: np.ndarray  # S_k f for k = 1..L
    partial_sums_M: np.ndarray  # S_k M for k = 1..L
    truncation_tol: float
    chi_depth: int
    chi_sup: float


def martingale_increments(
    kernel_set: KernelSet,
    window: PathWindow,
    obs: Observable,
    chain: np.ndarray,
    S: int,
    tail_model: TailModel,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
) -> MartingaleTrace:
    """Increments along one simulated chain.

    M_0 = fbar_0(X_0) + chi_0(X_0) (the corrector before time 0 is taken as 0),
    so S_k M = sum_{j<k} M_j = S_k f + chi_{k-1}(X_{k-1}).
    """
    chain = np.asarray(chain, dtype=np.int64)
    L = chain.size
    fbar = centered_along(kernel_set, window, obs, 0, L + S, tol, n_max)
    ch = chi_table(kernel_set, window, obs, 0, L, S, tol, n_max, fbar=fbar)
    t = np.arange(L)
    fx = fbar[t, chain]
    cx = ch[t, chain]
    inc = fx + cx - np.concatenate([[0.0], cx[:-1]])
    return MartingaleTrace(
        chain=chain,
        increments=inc,
        partial_sums_f=np.cumsum(fx),
        partial_sums_M=np.cumsum(inc),
        truncation_tol=2.0 * tail_model.tail(2.0 * obs.sup, S),
        chi_depth=S,
        chi_sup=float(np.abs(ch).max()),
    )


# --- variance and CLT --------------------------------------------------------------


@dataclass(frozen=True)
class Sigma2Result:
    n: np.ndarray
    sigma2_f: np.ndarray
    se_f: np.ndarray
    sigma2_M: np.ndarray
    se_M: np.ndarray
    gap: np.ndarray  # |Var(S_n f) - Var(S_n M)| / n
    degenerate: bool
    sums_f: np.ndarray = field(repr=False)  # (replicas_total, len(n))
    sums_M: np.ndarray = field(repr=False)


def _run_sums(
    kernel_set: KernelSet,
    window: PathWindow,
    obs: Observable,
    n_values: Sequence[int],
    replicas: int,
    rng: np.random.Generator,
    S: Optional[int],
    tol: float,
    n_max: int,
):
    """Partial sums S_n f (and S_n M when S is given) at each checkpoint n."""
    n_values = sorted(int(x) for x in n_values)
    n_top = n_values[-1]
    depth = S if S is not None else 0
    fbar = centered_along(kernel_set, window, obs, 0, n_top + depth, tol, n_max)
    ch = None
    if S is not None:
        ch = chi_table(kernel_set, window, obs, 0, n_top, S, tol, n_max, fbar=fbar)
    mu0 = measures_along(kernel_set, window, 0, 1, tol, n_max)[0][0]
    X = initial_states(mu0, replicas, rng)
    sf = np.zeros(replicas)
    sm = np.zeros(replicas)
    prev_chi = np.zeros(replicas)
    out_f = np.empty((replicas, len(n_values)))
    out_m = np.full((replicas, len(n_values)), np.nan)
    syms = window.span(0, n_top)
    k = 0
    for j in range(n_top):
        fx = fbar[j, X]
        sf += fx
        if ch is not None:
            cx = ch[j, X]
            sm += fx + cx - prev_chi
            prev_chi = cx
        if j + 1 == n_values[k]:
            out_f[:, k] = sf
            out_m[:, k] = sm
            k += 1
        if j + 1 < n_top:
            X = _step(kernel_set, int(syms[j]), X, rng)
    return out_f, out_m


def sigma2(
    env: EnvModel,
    kernel_set: KernelSet,
    obs: Observable,
    n,
    replicas: int,
    seed: int = 0,
    env_samples: int = 1,
    tail_model: Optional[TailModel] = None,
    truncation_tol: float = TRUNCATION_TOL,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
) -> Sigma2Result:
    """(1/n) E[(S_n f)^2] averaged over ``env_samples`` environments.

    ``n`` may be an int or a sequence of checkpoints.  Each environment runs
    ``replicas`` chains.  The M-variant is computed when a tail model is given.
    """
    n_values = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if replicas < 1 or n_values.min() < 1:
        raise ValueError("n and replicas must be >= 1")
    S = None
    if tail_model is not None:
        S = tail_model.depth(2.0 * obs.sup, truncation_tol)
    n_top = int(n_values.max())
    fs, ms = [], []
    for e in range(env_samples):
        rng = _rng.stream(seed, "sigma2", e)
        window = sample_window(env, n_max, n_top + (S or 0) + 1, rng)
        f_part, m_part = _run_sums(kernel_set, window, obs, n_values, replicas, rng, S, tol, n_max)
        fs.append(f_part)
        ms.append(m_part)
    sums_f = np.concatenate(fs)
    sums_m = np.concatenate(ms)
    nn = np.sort(n_values).astype(float)
    qf = sums_f**2 / nn
    qm = sums_m**2 / nn
    N = sums_f.shape[0]
    s2f = qf.mean(axis=0)
    s2m = qm.mean(axis=0)
    sef = qf.std(axis=0, ddof=1) / math.sqrt(N) if N > 1 else np.zeros_like(s2f)
    sem = qm.std(axis=0, ddof=1) / math.sqrt(N) if N > 1 else np.zeros_like(s2m)
    gap = np.abs((qf - qm).mean(axis=0))
    return Sigma2Result(
        n=np.sort(n_values),
        sigma2_f=s2f,
        se_f=sef,
        sigma2_M=s2m,
        se_M=sem,
        gap=gap,
        degenerate=bool(s2f[-1] < DEGENERATE_SIGMA2),
        sums_f=sums_f,
        sums_M=sums_m,
    )


@dataclass(frozen=True)
class CltResult:
    ks: float
    sigma2_hat: float
    sigma2_se: float
    n: int
    replicas: int
    skipped: bool

    @property
    def null_q99(self) -> float:
        """Asymptotic 99% quantile of the KS statistic under the null, for reference."""
        return 1.628 / math.sqrt(self.replicas)


def clt_check(
    env: EnvModel,
    kernel_set: KernelSet,
    obs: Observable,
    n: int,
    replicas: int,
    seed: int = 0,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
) -> CltResult:
    """KS distance between S_n f / (sigma_hat sqrt(n)) over replicas and N(0, 1).

    One environment is drawn and held fixed (quenched); chains are replicated.
    """
    res = sigma2(env, kernel_set, obs, n, replicas, seed, env_samples=1, tol=tol, n_max=n_max)
    s2, se = float(res.sigma2_f[0]), float(res.se_f[0])
    if res.degenerate:
        return CltResult(math.nan, s2, se, n, replicas, True)
    z = res.sums_f[:, 0] / math.sqrt(n * s2)
    ks = float(stats.kstest(z, "norm").statistic)
    return CltResult(ks, s2, se, n, replicas, False)


def green_kubo(P: np.ndarray, pi: np.ndarray, f: np.ndarray, terms: int = 10_000) -> float:
    """pi(f^2) + 2 sum_{k>=1} pi(f P^k f) for a homogeneous chain and centered f."""
    total = float(pi @ (f * f))
    v = f.copy()
    for _ in range(terms):
        v = P @ v
        term = float(pi @ (f * v))
        total += 2.0 * term
        if abs(term) < 1e-18:
            break
    return total


def increment_ensemble(
    kernel_set: KernelSet,
    window: PathWindow,
    obs: Observable,
    n: int,
    replicas: int,
    rng: np.random.Generator,
    S: int,
    tol: float = MU_TOL,
    n_max: int = MU_N_MAX,
) -> np.ndarray:
    """Increments M_0..M_{n-1} of ``replicas`` chains in one environment, shape (replicas, n)."""
    X = simulate_chains(kernel_set, window, n - 1, replicas, rng, tol, n_max)
    fbar = centered_along(kernel_set, window, obs, 0, n + S, tol, n_max)
    ch = chi_table(kernel_set, window, obs, 0, n, S, tol, n_max, fbar=fbar)
    t = np.arange(n)[None, :]
    fx = fbar[t, X]
    cx = ch[t, X]
    prev = np.concatenate([np.zeros((replicas, 1)), cx[:, :-1]], axis=1)
    return fx + cx - prev


def hatM_autocovariance(increments: np.ndarray, m: int, k: int) -> Tuple[float, float]:
    """Ensemble covariance of hat-M at times m and m + k, with its standard error.

    hat-M_j = M_j^2 - E[M_j^2], the expectation taken over the ensemble rows.
    """
    inc = np.asarray(increments, dtype=float)
    sq = inc**2
    hat = sq - sq.mean(axis=0, keepdims=True)
    prod = hat[:, m] * hat[:, m + k]
    n = prod.size
    se = float(prod.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(prod.mean()), se


# --- visiting times ------------------------------------------------------------------


@dataclass(frozen=True)
class VisitTail:
    j: np.ndarray
    empirical: np.ndarray  # P(n_1 > j)
    stderr: np.ndarray
    analytic: np.ndarray
    partial_sums: np.ndarray  # sum_{i <= j} P(n_1 > i)^{1 - 2/q}
    prob_Q: float
    r: int
    samples: int


def smallest_L(env: EnvModel, kernel_set: KernelSet, L_max: int = 12, mc_samples: int = 20_000, seed: int = 0) -> int:
    """Smallest L <= L_max with P(Q_L) > 0."""
    for L in range(1, L_max + 1):
        if block_event_probability(env, kernel_set, 1.0 / L, L, mc_samples, seed).prob > 0.0:
            return L
    raise ValueError(f"P(Q_L) = 0 for every L <= {L_max}")


def visiting_time_tail(
    env: EnvModel,
    kernel_set: KernelSet,
    L: int,
    j_max: int,
    samples: int,
    seed: int = 0,
    q: float = DEFAULT_Q,
    workers: int = 1,
) -> VisitTail:
    """Tail of n_1 = min{k >= 1: theta^k omega in Q_L}, Q_L = {n_omega <= L, gamma_omega >= 1/L}.

    The analytic curve is ((1 + psi_U(r-1)) (1 - P(Q_L)))^{floor(j / (r L))}
    with r = r0 + 1 from the r0 selection applied to 1 - P(Q_L).
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    delta = 1.0 / L
    est = block_event_probability(env, kernel_set, delta, L, samples, seed, workers=workers)
    prob_Q = est.prob
    if prob_Q <= 0.0:
        raise ValueError(f"P(Q_L) = 0 for L={L}; try a larger L")
    r0, _ = select_r0(env, 1.0 - prob_Q) if prob_Q < 1.0 else (1, 0.0)
    r = r0 + 1
    base = (1.0 + psi_upper(env, r - 1)) * (1.0 - prob_Q)
    j = np.arange(j_max + 1)
    analytic = base ** (j // (r * L))

    def block(rng, count, _offset):
        w = sample_windows(env, L, j_max + 1, count, rng)
        first = np.full(count, j_max + 2, dtype=np.int64)
        for k in range(j_max + 1, 0, -1):
            hit = doeblin_hits(kernel_set, w.recent(L, shift=k), delta, L)
            first[hit] = k
        return first

    n1 = np.concatenate(_rng.map_blocks(block, samples, seed, f"visits/{L}", workers))
    exceed = n1[:, None] > j[None, :]
    emp = exceed.mean(axis=0)
    se = np.sqrt(emp * (1.0 - emp) / samples)
    partial = np.cumsum(emp ** (1.0 - 2.0 / q))
    return VisitTail(j, emp, se, analytic, partial, prob_Q, r, samples)
