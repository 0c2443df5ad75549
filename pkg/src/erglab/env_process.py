"""Stationary environment processes over a finite alphabet.

Two kinds of environment are supported: i.i.d. symbols drawn from a marginal,
and a stationary finite-state Markov chain.  For both, the upper psi-mixing
coefficient and the rho-mixing coefficient are exactly computable.

Path windows index the environment relative to a base point: position ``i``
of a window is the symbol omega_i, for ``-past_len <= i <= future_len``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

PROB_TOL = 1e-12
STATIONARY_TOL = 1e-10


class WindowError(ValueError):
    """A computation needed environment symbols outside the sampled window."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_prob_vector(v: np.ndarray, name: str = "marginal") -> None:
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(v < 0):
        raise ValueError(f"{name} has negative entries: {v.tolist()}")
    if abs(v.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"{name} is not a probability vector (sum={v.sum()!r})")


def _check_stochastic(Q: np.ndarray, name: str = "transition") -> None:
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(Q < 0):
        raise ValueError(f"{name} has negative entries")
    sums = Q.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{name} row {i} sums to {sums[i]!r}, not 1")


def _is_irreducible(Q: np.ndarray) -> bool:
    k = Q.shape[0]
    pattern = (np.eye(k) + Q) > 0
    reach = pattern.copy()
    for _ in range(k):
        reach = (reach.astype(int) @ pattern.astype(int)) > 0
    return bool(reach.all())


def _is_primitive(Q: np.ndarray) -> bool:
    k = Q.shape[0]
    pattern = (Q > 0).astype(int)
    power = pattern.copy()
    for _ in range(k * k):
        if power.all():
            return True
        power = ((power @ pattern) > 0).astype(int)
    return bool(power.all())


def stationary_vector(Q: np.ndarray) -> np.ndarray:
    """Solve pi Q = pi, sum(pi) = 1 as a least-squares linear system."""
    k = Q.shape[0]
    A = np.vstack([Q.T - np.eye(k), np.ones((1, k))])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@dataclass(frozen=True)
class EnvModel:
    """A stationary ergodic environment over ``{0, ..., alphabet_size - 1}``."""

    kind: str
    marginal: np.ndarray
    transition: Optional[np.ndarray] = None

    @property
    def alphabet_size(self) -> int:
        return int(self.marginal.size)


def build_iid_env(alphabet_size: int, marginal: Sequence[float]) -> EnvModel:
    m = np.asarray(marginal, dtype=float)
    if alphabet_size < 1:
        raise ValueError("alphabet_size must be positive")
    if m.shape != (alphabet_size,):
        raise ValueError(f"marginal has length {m.size}, expected {alphabet_size}")
    _check_prob_vector(m)
    return EnvModel("iid", _frozen(m))


def build_markov_env(transition: Sequence[Sequence[float]]) -> EnvModel:
    Q = np.asarray(transition, dtype=float)
    _check_stochastic(Q)
    if not _is_irreducible(Q):
        raise ValueError("transition is reducible: some symbol cannot reach another")
    if not _is_primitive(Q):
        raise ValueError("transition is periodic: no power of it is strictly positive")
    pi = stationary_vector(Q)
    resid = np.abs(pi @ Q - pi).max()
    if resid > STATIONARY_TOL:
        raise ValueError(f"stationary vector residual {resid:.3e} exceeds {STATIONARY_TOL}")
    return EnvModel("markov", _frozen(pi), _frozen(Q))


@dataclass(frozen=True)
class PathWindow:
    """Symbols omega_{-past_len}, ..., omega_{future_len}; base point at index past_len."""

    past_len: int
    future_len: int
    symbols: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.symbols, dtype=np.int64)
        if self.past_len < 0 or self.future_len < 0:
            raise ValueError("window lengths must be nonnegative")
        if s.shape != (self.past_len + self.future_len + 1,):
            raise ValueError(
                f"window has {s.size} symbols, expected {self.past_len + self.future_len + 1}"
            )
        s.setflags(write=False)
        object.__setattr__(self, "symbols", s)

    def covers(self, lo: int, hi: int) -> bool:
        """True when omega_lo .. omega_hi (inclusive) are all available."""
        return lo >= -self.past_len and hi <= self.future_len

    def require(self, lo: int, hi: int) -> None:
        if hi >= lo and not self.covers(lo, hi):
            raise WindowError(
                f"need omega_{lo}..omega_{hi}, window holds "
                f"omega_{-self.past_len}..omega_{self.future_len}"
            )

    def at(self, i: int) -> int:
        self.require(i, i)
        return int(self.symbols[self.past_len + i])

    def span(self, lo: int, hi: int) -> np.ndarray:
        """Symbols omega_lo .. omega_{hi-1} in time order."""
        self.require(lo, hi - 1)
        return self.symbols[self.past_len + lo : self.past_len + hi]

    def recent(self, depth: int) -> np.ndarray:
        """omega_{-1}, omega_{-2}, ... (newest first), at most ``depth`` entries."""
        d = min(depth, self.past_len)
        return self.symbols[self.past_len - d : self.past_len][::-1]

    def shift(self, n: int) -> "PathWindow":
        """The same path seen from base point theta^n omega."""
        if not -self.past_len <= n <= self.future_len:
            raise WindowError(f"cannot shift window by {n}")
        return PathWindow(self.past_len + n, self.future_len - n, self.symbols)


@dataclass(frozen=True)
class WindowBatch:
    """A stack of equally shaped windows, one per row of ``symbols``."""

    past_len: int
    future_len: int
    symbols: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.symbols, dtype=np.int64)
        if s.ndim != 2 or s.shape[1] != self.past_len + self.future_len + 1:
            raise ValueError("batch symbols must be (count, past_len + future_len + 1)")
        object.__setattr__(self, "symbols", s)

    def __len__(self) -> int:
        return self.symbols.shape[0]

    def __getitem__(self, i: int) -> PathWindow:
        return PathWindow(self.past_len, self.future_len, self.symbols[i])

    def column(self, i: int) -> np.ndarray:
        if not -self.past_len <= i <= self.future_len:
            raise WindowError(f"omega_{i} outside batch windows")
        return self.symbols[:, self.past_len + i]

    def recent(self, depth: int, shift: int = 0) -> np.ndarray:
        """Rows of omega_{shift-1}, omega_{shift-2}, ...; missing symbols are -1."""
        base = self.past_len + shift
        avail = min(depth, base)
        out = np.full((len(self), depth), -1, dtype=np.int64)
        if avail > 0:
            out[:, :avail] = self.symbols[:, base - avail : base][:, ::-1]
        return out


def sample_windows(
    env: EnvModel, past_len: int, future_len: int, count: int, rng: np.random.Generator
) -> WindowBatch:
    """Draw ``count`` independent stationary windows."""
    if past_len < 0 or future_len < 0:
        raise ValueError("window lengths must be nonnegative")
    length = past_len + future_len + 1
    k = env.alphabet_size
    if k == 1:
        return WindowBatch(past_len, future_len, np.zeros((count, length), dtype=np.int64))
    if env.kind == "iid":
        s = rng.choice(k, size=(count, length), p=env.marginal)
        return WindowBatch(past_len, future_len, s.astype(np.int64))
    cum = np.cumsum(env.transition, axis=1)
    s = np.empty((count, length), dtype=np.int64)
    s[:, 0] = rng.choice(k, size=count, p=env.marginal)
    for t in range(1, length):
        u = rng.random(count)
        nxt = (u[:, None] >= cum[s[:, t - 1]]).sum(axis=1)
        s[:, t] = np.minimum(nxt, k - 1)
    return WindowBatch(past_len, future_len, s)


def sample_window(
    env: EnvModel, past_len: int, future_len: int, rng: np.random.Generator
) -> PathWindow:
    return sample_windows(env, past_len, future_len, 1, rng)[0]


def path_probabilities(env: EnvModel, paths: np.ndarray) -> np.ndarray:
    """Stationary probability of each row of ``paths`` (symbols in time order)."""
    paths = np.asarray(paths, dtype=np.int64)
    p = env.marginal[paths[:, 0]].copy()
    if env.kind == "iid":
        for t in range(1, paths.shape[1]):
            p *= env.marginal[paths[:, t]]
    else:
        for t in range(1, paths.shape[1]):
            p *= env.transition[paths[:, t - 1], paths[:, t]]
    return p


def psi_upper(env: EnvModel, n: int) -> float:
    """Upper psi-mixing coefficient at separation ``n``.

    For a Markov environment the supremum over past/future events reduces, by
    the Markov property, to max_ij (Q^n)_ij / pi_j - 1.
    """
    if n < 1:
        raise ValueError("psi_upper needs n >= 1")
    if env.kind == "iid" or env.alphabet_size == 1:
        return 0.0
    Qn = np.linalg.matrix_power(env.transition, n)
    return max(float((Qn / env.marginal[None, :]).max() - 1.0), 0.0)


def psi_upper_sequence(env: EnvModel, n_max: int) -> np.ndarray:
    """psi_upper(env, n) for n = 1..n_max (entry n-1), by repeated multiplication."""
    out = np.zeros(n_max)
    if env.kind == "iid" or env.alphabet_size == 1:
        return out
    Qn = env.transition.copy()
    for n in range(n_max):
        out[n] = max(float((Qn / env.marginal[None, :]).max() - 1.0), 0.0)
        Qn = Qn @ env.transition
    return out


def rho_env(env: EnvModel, n: int) -> float:
    """Maximal correlation between omega_0 and omega_n.

    Second singular value of D^{1/2} Q^n D^{-1/2}, D = diag(marginal).
    """
    if n < 1:
        raise ValueError("rho_env needs n >= 1")
    if env.kind == "iid" or env.alphabet_size == 1:
        return 0.0
    d = np.sqrt(env.marginal)
    A = d[:, None] * np.linalg.matrix_power(env.transition, n) / d[None, :]
    sv = np.linalg.svd(A, compute_uv=False)
    return float(sv[1])
