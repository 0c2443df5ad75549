"""Rate certificates for effective geometric ergodicity.

Pipeline: pick a block event A = {gamma_omega >= delta, n_omega <= M}, compute
p0 = E[(1 - delta)^{1_A}], find the smallest r0 with (1 + psi_U(r0)) p0 < 1,
set rho = sqrt((1 + psi_U(r0)) p0), then derive C_p and the two moment bounds
on the random prefactor K_p.  Empirical K_p values are measured on sampled
environment windows and compared with both bounds.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from erglab import _rng
from erglab.env_process import EnvModel, WindowBatch, path_probabilities, psi_upper, psi_upper_sequence, sample_windows
from erglab.equivariant import (
    MU_N_MAX,
    MU_TOL,
    backward_distances,
    backward_limit,
    measures_at_shift,
    op_distance,
    row_diameter,
)
from erglab.kernel_cocycle import KernelSet, doeblin_hits

R0_MAX = 10_000
ENUM_MAX_SYMBOLS = 12
ENUM_MAX_TERMS = 1 << 20
VACUOUS = 1e12
TIE_TOL = 1e-12
RHO_FLOOR = 1e-6


class CertificationError(RuntimeError):
    """No admissible certificate exists for the given model and grids."""


@dataclass(frozen=True)
class BlockEventEstimate:
    delta: float
    M: int
    prob: float
    stderr: float
    method: str  # "enumeration" or "monte-carlo"


def block_event_probability(
    env: EnvModel,
    kernel_set: KernelSet,
    delta: float,
    M: int,
    mc_samples: int = 20_000,
    seed: int = 0,
    method: str = "auto",
    workers: int = 1,
) -> BlockEventEstimate:
    """P(gamma_omega >= delta, n_omega <= M).

    The event depends on omega_{-M}..omega_{-1} only; it is enumerated exactly
    when that is cheap (``method="auto"``), otherwise estimated from windows.
    """
    k = env.alphabet_size
    if method == "auto":
        method = "enumeration" if M <= ENUM_MAX_SYMBOLS and k**M <= ENUM_MAX_TERMS else "monte-carlo"
    if method == "enumeration":
        paths = np.array(list(itertools.product(range(k), repeat=M)), dtype=np.int64)
        weights = path_probabilities(env, paths)
        hits = doeblin_hits(kernel_set, paths[:, ::-1], delta, M)
        return BlockEventEstimate(delta, M, min(float(weights[hits].sum()), 1.0), 0.0, method)
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")

    def block(rng, count, _offset):
        w = sample_windows(env, M, 0, count, rng)
        return doeblin_hits(kernel_set, w.recent(M), delta, M)

    hits = np.concatenate(_rng.map_blocks(block, mc_samples, seed, f"prob_A/{delta}/{M}", workers))
    p = float(hits.mean())
    se = float(hits.std(ddof=1) / math.sqrt(hits.size)) if hits.size > 1 else 0.0
    return BlockEventEstimate(delta, M, p, se, "monte-carlo")


def p0(delta: float, prob_A: float) -> float:
    """E[(1 - delta)^{1_A}] = (1 - delta) P(A) + 1 - P(A)."""
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    if not 0.0 <= prob_A <= 1.0:
        raise ValueError("prob_A must lie in [0, 1]")
    return (1.0 - delta) * prob_A + (1.0 - prob_A)


def select_r0(env: EnvModel, p0_value: float, r0_max: int = R0_MAX) -> Tuple[int, float]:
    """Smallest r0 >= 1 with (1 + psi_U(r0)) p0 < 1, and rho = sqrt of that product."""
    if not 0.0 <= p0_value < 1.0:
        raise ValueError("p0 must lie in [0, 1)")
    if env.kind == "iid" or env.alphabet_size == 1:
        return 1, math.sqrt(p0_value)
    Q = env.transition
    Qr = Q.copy()
    for r0 in range(1, r0_max + 1):
        psi = max(float((Qr / env.marginal[None, :]).max() - 1.0), 0.0)
        if (1.0 + psi) * p0_value < 1.0:
            return r0, math.sqrt((1.0 + psi) * p0_value)
        Qr = Qr @ Q
    raise CertificationError(f"no r0 <= {r0_max} with (1 + psi_U(r0)) p0 < 1")


def effective_r0(env: EnvModel, p0_value: float, r0_min: int, span: int = 200) -> Tuple[int, float]:
    """r0 in [r0_min, r0_min + span) minimizing rho(r0)^(1 / r0); returns (r0, that rate)."""
    psi = psi_upper_sequence(env, r0_min + span)
    best = (r0_min, math.inf)
    for r0 in range(r0_min, r0_min + span):
        prod = (1.0 + psi[r0 - 1]) * p0_value
        if prod >= 1.0:
            continue
        rate = math.sqrt(prod) ** (1.0 / r0)
        if rate < best[1] - TIE_TOL:
            best = (r0, rate)
    return best


def _candidate_rate(env: EnvModel, delta: float, M: int, prob_A: float) -> Optional[float]:
    if prob_A <= 0.0:
        return None
    q = p0(delta, prob_A)
    if q >= 1.0:
        return None
    try:
        _, rho = select_r0(env, q)
    except CertificationError:
        return None
    return rho ** (1.0 / M)


def search_block_params(
    env: EnvModel,
    kernel_set: KernelSet,
    delta_grid: Sequence[float],
    M_grid: Sequence[int],
    mc_samples: int = 20_000,
    seed: int = 0,
    workers: int = 1,
) -> Tuple[float, int, float]:
    """Grid point (delta, M) with the smallest per-step rate rho^(1/M).

    Ties go to the smallest M, then the largest delta.
    """
    if not delta_grid or not M_grid:
        raise ValueError("grids must be nonempty")
    best = None
    tried = []
    for M in sorted(set(int(m) for m in M_grid)):
        for delta in sorted(set(float(x) for x in delta_grid), reverse=True):
            est = block_event_probability(env, kernel_set, delta, M, mc_samples, seed, workers=workers)
            rate = _candidate_rate(env, delta, M, est.prob)
            tried.append((delta, M, est.prob, rate))
            if rate is None:
                continue
            if best is None or rate < best[0] - TIE_TOL:
                best = (rate, delta, M, est.prob)
    if best is None:
        lines = ", ".join(f"(delta={d}, M={m}: P(A)={p:.3g})" for d, m, p, _ in tried)
        raise CertificationError(f"no grid point gives a contracting block event: {lines}")
    return best[1], best[2], best[3]


def cp_constant(rho: float, p: float) -> float:
    """C_p = max_{n >= 1} n^{2/p} rho^n, so that n^{2/p} rho^{2n} <= C_p rho^n."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if p < 1.0:
        raise ValueError("p must be >= 1")
    n_star = 2.0 / (p * math.log(1.0 / rho))
    n_hi = int(math.ceil(n_star)) + 2
    n = np.arange(1, n_hi + 1, dtype=float)
    return float(np.max(n ** (2.0 / p) * rho**n))


def remark_moment_bound(rho: float, r0: int, Cp: float) -> float:
    """4 C_p rho^{-2 r0} / (1 - rho^{r0})."""
    return 4.0 * Cp * rho ** (-2.0 * r0) / (1.0 - rho**r0)


def lemma_moment_bound(rho: float, r0: int) -> float:
    """rho^{-r0/2} / (1 - rho^{1/(2 r0)})."""
    return rho ** (-r0 / 2.0) / (1.0 - rho ** (1.0 / (2.0 * r0)))


@dataclass(frozen=True)
class RateCertificate:
    delta: float
    M: int
    prob_A: float
    p0: float
    r0: int
    psi_r0: float
    rho: float
    rho_step: float
    p: float
    Cp: float
    remark_moment_bound: float
    lemma_moment_bound: float
    r0_effective: int
    rate_effective: float
    prob_A_method: str = "enumeration"

    @property
    def vacuous(self) -> bool:
        return max(self.remark_moment_bound, self.lemma_moment_bound) > VACUOUS

    def as_record(self) -> dict:
        rec = {k: getattr(self, k) for k in self.__dataclass_fields__}
        rec["vacuous"] = self.vacuous
        return rec


def build_certificate(
    env: EnvModel,
    kernel_set: KernelSet,
    delta: float,
    M: int,
    p: float = 2.0,
    prob_A: Optional[float] = None,
    mc_samples: int = 20_000,
    seed: int = 0,
) -> RateCertificate:
    """Certificate for a fixed block event.

    ``rho`` follows the plug-in formula; ``rho_step = rho^(1/M)`` is the rate
    per chain step used for C_p, the moment bounds and every experiment that
    measures decay in steps.  The two agree for M = 1.
    """
    method = "given"
    if prob_A is None:
        est = block_event_probability(env, kernel_set, delta, M, mc_samples, seed)
        prob_A, method = est.prob, est.method
    if prob_A <= 0.0:
        raise CertificationError(f"P(A) = 0 for delta={delta}, M={M}")
    q = p0(delta, prob_A)
    r0, rho = select_r0(env, q)
    psi_r0 = psi_upper(env, r0)
    if rho <= 0.0:
        # P(A) = 1 with delta = 1: every block collapses the product; any positive rate is valid
        rho = RHO_FLOOR
    rho_step = rho ** (1.0 / M)
    Cp = cp_constant(rho_step, p)
    r_eff, rate_eff = effective_r0(env, q, r0)
    return RateCertificate(
        delta=float(delta),
        M=int(M),
        prob_A=float(prob_A),
        p0=q,
        r0=r0,
        psi_r0=psi_r0,
        rho=rho,
        rho_step=rho_step,
        p=float(p),
        Cp=Cp,
        remark_moment_bound=remark_moment_bound(rho_step, r0, Cp),
        lemma_moment_bound=lemma_moment_bound(rho_step, r0),
        r0_effective=r_eff,
        rate_effective=rate_eff,
        prob_A_method=method,
    )


def certify(
    env: EnvModel,
    kernel_set: KernelSet,
    delta_grid: Sequence[float],
    M_grid: Sequence[int],
    p: float = 2.0,
    mc_samples: int = 20_000,
    seed: int = 0,
    workers: int = 1,
) -> RateCertificate:
    delta, M, prob_A = search_block_params(env, kernel_set, delta_grid, M_grid, mc_samples, seed, workers)
    cert = build_certificate(env, kernel_set, delta, M, p, prob_A=prob_A)
    method = "enumeration" if M <= ENUM_MAX_SYMBOLS and env.alphabet_size**M <= ENUM_MAX_TERMS else "monte-carlo"
    return RateCertificate(**{**cert.__dict__, "prob_A_method": method})


# --- the product-moment lemma -------------------------------------------------


def key_lemma_product_moment(env: EnvModel, e_beta: float, r: int, n: int) -> float:
    """(1 + psi_U(r-1))^{max(k-1, 0)} E[beta]^k with k = floor(n / r).

    The psi factor is dropped when k <= 1 (empty product convention).
    """
    if r < 2:
        raise ValueError("r must be >= 2")
    k = n // r
    return (1.0 + psi_upper(env, r - 1)) ** max(k - 1, 0) * e_beta**k


@dataclass(frozen=True)
class ProductMoments:
    n: np.ndarray  # 1..n_max
    p: Tuple[float, ...]
    mean: np.ndarray  # shape (len(p), n_max)
    stderr: np.ndarray
    samples: int


def block_products(
    kernel_set: KernelSet, batch: WindowBatch, delta: float, M: int, n_max: int
) -> np.ndarray:
    """b_n = prod_{j=0}^{n-1} beta(theta^{-Mj} omega) for n = 1..n_max (columns n-1)."""
    hits = np.zeros((len(batch), n_max), dtype=np.int64)
    for j in range(n_max):
        hits[:, j] = doeblin_hits(kernel_set, batch.recent(M, shift=-j * M), delta, M)
    return np.cumsum(hits, axis=1)


def block_product_moments(
    env: EnvModel,
    kernel_set: KernelSet,
    delta: float,
    M: int,
    n_max: int,
    p_values: Iterable[float],
    samples: int,
    seed: int = 0,
    workers: int = 1,
) -> ProductMoments:
    """Monte-Carlo E[b_n^p] with b_n the block product of beta = (1-delta)^{1_A}."""
    p_values = tuple(float(p) for p in p_values)

    def block(rng, count, _offset):
        w = sample_windows(env, n_max * M, 0, count, rng)
        return block_products(kernel_set, w, delta, M, n_max)

    visits = np.concatenate(_rng.map_blocks(block, samples, seed, "lemma", workers))
    means, ses = [], []
    for p in p_values:
        vals = (1.0 - delta) ** (p * visits)
        means.append(vals.mean(axis=0))
        ses.append(vals.std(axis=0, ddof=1) / math.sqrt(samples))
    return ProductMoments(np.arange(1, n_max + 1), p_values, np.array(means), np.array(ses), samples)


# --- empirical K_p --------------------------------------------------------------


@dataclass(frozen=True)
class KpEstimate:
    p: float
    convention: str
    samples: np.ndarray = field(repr=False)
    empirical_p_moment: float
    stderr: float
    n_max: int
    sample_count: int

    @property
    def upper(self) -> float:
        """Empirical moment plus three standard errors."""
        return self.empirical_p_moment + 3.0 * self.stderr


@dataclass(frozen=True)
class KpReport:
    remark: KpEstimate  # sup_n rate^{-n/p} d_n, backward
    lemma: KpEstimate  # sup_n rate^{-n/(2 r0 p)} d_n, backward
    forward: KpEstimate  # sup_{n >= 0} rate^{-n/p} d_n, forward products vs shifted mu
    skipped: int


def _estimate(samples: np.ndarray, p: float, convention: str, n_max: int) -> KpEstimate:
    vals = samples**p
    m = float(vals.mean()) if vals.size else math.nan
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return KpEstimate(p, convention, samples, m, se, n_max, int(samples.size))


def _resolved(dist: np.ndarray, diam: np.ndarray, tol: float) -> np.ndarray:
    """Mask of depths up to and including the first one whose diameter is <= tol.

    Beyond that depth the distances are below numerical resolution.
    """
    small = np.nan_to_num(diam, nan=0.0) <= tol
    first = np.where(small.any(axis=1), small.argmax(axis=1), diam.shape[1] - 1)
    cols = np.arange(diam.shape[1])[None, :]
    return (cols <= first[:, None]) & ~np.isnan(dist)


def forward_distances(
    kernel_set: KernelSet, batch: WindowBatch, n_max: int, tol: float = MU_TOL, mu_n_max: int = MU_N_MAX
):
    """op_distance(R_{omega,n}, mu_{theta^n omega}) for n = 0..n_max (columns n).

    Also returns the row-diameter of each forward product, the error bound of
    each shifted measure, and a mask of windows whose measures all converged.
    Rows stop once their forward product has collapsed below ``tol``.
    """
    count = len(batch)
    d = kernel_set.state_size
    K = kernel_set.kernels
    F = np.broadcast_to(np.eye(d), (count, d, d)).copy()
    dist = np.full((count, n_max + 1), np.nan)
    diam = np.full((count, n_max + 1), np.nan)
    err = np.full((count, n_max + 1), np.nan)
    ok = np.ones(count, dtype=bool)
    active = np.ones(count, dtype=bool)
    for n in range(n_max + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        if n > 0:
            F[idx] = F[idx] @ K[batch.symbols[idx, batch.past_len + n - 1]]
        sub = WindowBatch(batch.past_len, batch.future_len, batch.symbols[idx])
        mu, e, _, conv = measures_at_shift(kernel_set, sub, n, tol, mu_n_max)
        ok[idx[~conv]] = False
        dist[idx, n] = op_distance(F[idx], mu)
        err[idx, n] = e
        diam[idx, n] = row_diameter(F[idx])
        active[idx] = (diam[idx, n] > tol) & conv
    return dist, diam, err, ok


def empirical_kp(
    env: EnvModel,
    kernel_set: KernelSet,
    rho: float,
    p: float,
    n_max: int,
    sample_count: int,
    seed: int = 0,
    r0: int = 1,
    tol: float = MU_TOL,
    mu_n_max: int = MU_N_MAX,
    workers: int = 1,
) -> KpReport:
    """Per-window suprema of rate-normalized distances to the equivariant measure.

    ``rho`` is the per-step rate.  Backward suprema run over depths 1..n_max,
    the forward one over 0..n_max, each up to the
    depth where the product has collapsed below ``tol``.  Windows whose
    measures fail to converge are skipped and counted.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    past = max(mu_n_max, n_max)
    exps = np.arange(1, n_max + 1, dtype=float)

    def block(rng, count, _offset):
        w = sample_windows(env, past, n_max, count, rng)
        recent = w.recent(past)
        mu, _, _, conv = backward_limit(kernel_set, recent, tol, mu_n_max)
        dist, diam = backward_distances(kernel_set, recent, mu, n_max, stop_tol=tol)
        mask = _resolved(dist, diam, tol)
        d0 = np.where(mask, dist, 0.0)
        k_rem = (d0 * rho ** (-exps / p)).max(axis=1)
        k_lem = (d0 * rho ** (-exps / (2.0 * r0 * p))).max(axis=1)
        # the forward sup includes n = 0 so the Markov-inequality tail holds at N = 0 too
        fdist, fdiam, _, fok = forward_distances(kernel_set, w, n_max, tol, mu_n_max)
        fmask = _resolved(fdist, fdiam, tol)
        f0 = np.where(fmask, fdist, 0.0)
        k_fwd = (f0 * rho ** (-np.arange(n_max + 1) / p)).max(axis=1)
        good = conv & fok
        return k_rem[good], k_lem[good], k_fwd[good], int((~good).sum())

    parts = _rng.map_blocks(block, sample_count, seed, "kp", workers)
    rem = np.concatenate([x[0] for x in parts])
    lem = np.concatenate([x[1] for x in parts])
    fwd = np.concatenate([x[2] for x in parts])
    skipped = sum(x[3] for x in parts)
    return KpReport(
        _estimate(rem, p, "remark", n_max),
        _estimate(lem, p, "lemma", n_max),
        _estimate(fwd, p, "forward", n_max),
        skipped,
    )
