import numpy as np
import pytest

from erglab.env_process import (
    PathWindow,
    WindowError,
    build_iid_env,
    build_markov_env,
    psi_upper,
    psi_upper_sequence,
    rho_env,
    sample_window,
    sample_windows,
)
from conftest import Q_SYM


def test_iid_builders():
    env = build_iid_env(2, [0.5, 0.5])
    assert env.kind == "iid" and env.alphabet_size == 2
    assert build_iid_env(1, [1.0]).alphabet_size == 1
    with pytest.raises(ValueError, match="probability vector"):
        build_iid_env(2, [0.7, 0.4])
    with pytest.raises(ValueError, match="negative"):
        build_iid_env(2, [1.5, -0.5])
    with pytest.raises(ValueError):
        build_iid_env(3, [0.5, 0.5])


def test_markov_stationary():
    np.testing.assert_allclose(build_markov_env(Q_SYM).marginal, [0.5, 0.5], atol=1e-12)
    # pi = (b, a) / (a + b) with a = 0.3, b = 0.1
    np.testing.assert_allclose(build_markov_env([[0.7, 0.3], [0.1, 0.9]]).marginal, [0.25, 0.75], atol=1e-12)


def test_markov_rejections():
    with pytest.raises(ValueError, match="reducible"):
        build_markov_env([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="periodic"):
        build_markov_env([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ValueError, match="row 1"):
        build_markov_env([[0.5, 0.5], [0.3, 0.3]])


def test_degenerate_window_all_zero():
    env = build_iid_env(1, [1.0])
    w = sample_window(env, 4, 6, np.random.default_rng(0))
    assert w.symbols.tolist() == [0] * 11


def test_window_reproducible():
    env = build_iid_env(2, [0.5, 0.5])
    a = sample_window(env, 3, 3, np.random.default_rng(42)).symbols
    b = sample_window(env, 3, 3, np.random.default_rng(42)).symbols
    assert a.size == 7 and np.array_equal(a, b)


def test_window_indexing():
    w = PathWindow(2, 3, [5, 6, 7, 8, 9, 10])
    assert w.at(-2) == 5 and w.at(0) == 7 and w.at(3) == 10
    assert w.span(-1, 2).tolist() == [6, 7, 8]
    assert w.recent(5).tolist() == [6, 5]
    assert w.shift(1).at(0) == 8
    with pytest.raises(WindowError, match="omega_4"):
        w.at(4)


@pytest.mark.parametrize("env", [build_iid_env(3, [0.2, 0.3, 0.5]), build_markov_env(Q_SYM)])
def test_sample_frequencies(env):
    w = sample_windows(env, 0, 0, 100_000, np.random.default_rng(1))
    freq = np.bincount(w.symbols[:, 0], minlength=env.alphabet_size) / 1e5
    se = np.sqrt(env.marginal * (1 - env.marginal) / 1e5)
    assert np.all(np.abs(freq - env.marginal) <= 3 * se)


def test_markov_transitions_sampled():
    env = build_markov_env([[0.7, 0.3], [0.1, 0.9]])
    w = sample_windows(env, 0, 1, 50_000, np.random.default_rng(2))
    s0, s1 = w.column(0), w.column(1)
    est = np.mean(s1[s0 == 0] == 1)
    assert abs(est - 0.3) < 4 * np.sqrt(0.21 / (s0 == 0).sum())


def test_psi_iid_zero():
    env = build_iid_env(2, [0.3, 0.7])
    assert all(psi_upper(env, n) == 0.0 for n in (1, 5, 50))


def test_psi_closed_form():
    env = build_markov_env(Q_SYM)
    assert abs(psi_upper(env, 2) - 0.64) < 1e-12
    seq = psi_upper_sequence(env, 30)
    np.testing.assert_allclose(seq, 0.8 ** np.arange(1, 31), rtol=0, atol=1e-10)
    with pytest.raises(ValueError):
        psi_upper(env, 0)


@pytest.mark.parametrize("Q", [Q_SYM, [[0.7, 0.3], [0.1, 0.9]], [[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.2, 0.2]]])
def test_psi_monotone_and_vanishing(Q):
    env = build_markov_env(Q)
    seq = psi_upper_sequence(env, 200)
    assert np.all(np.diff(seq[:50]) <= 1e-12)
    assert seq[49] < seq[0] + 1e-12
    assert seq[199] < 1e-6


def test_rho_env():
    assert rho_env(build_iid_env(2, [0.5, 0.5]), 3) == 0.0
    env = build_markov_env(Q_SYM)
    for n in range(1, 20):
        assert abs(rho_env(env, n) - 0.8**n) < 1e-10
    # dense SVD oracle for a non-symmetric chain
    Q = np.array([[0.7, 0.3], [0.1, 0.9]])
    pi = np.array([0.25, 0.75])
    A = np.diag(np.sqrt(pi)) @ Q @ np.diag(1 / np.sqrt(pi))
    assert abs(rho_env(build_markov_env(Q), 1) - np.linalg.svd(A)[1][1]) < 1e-12
    # a reversible two-state chain: rho(n) = rho(1)^n
    env2 = build_markov_env(Q)
    for n in range(1, 15):
        assert abs(rho_env(env2, n) - rho_env(env2, 1) ** n) < 1e-10
