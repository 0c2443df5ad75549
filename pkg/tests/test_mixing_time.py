import numpy as np
import pytest

from erglab.certificate import build_certificate
from erglab.env_process import PathWindow, sample_windows
from erglab.mixing_time import (
    NOT_FOUND,
    MixingProfile,
    eps_schedule,
    first_passage,
    mixing_profile,
    mixing_time,
    sample_profiles,
    schedule_envelope,
    tail_curve,
    tail_experiment,
)
from oracles import deflated_distance
from conftest import P_HOM


def test_eps_schedule_examples():
    assert abs(eps_schedule(0.5, 2, 4) - 0.5) < 1e-15
    assert abs(eps_schedule(0.25, 1, 2) - 0.25) < 1e-15
    np.testing.assert_allclose(eps_schedule(0.25, 1, [0, 2]), [1.0, 0.25])


def test_identity_uniform_examples(iu):
    # omega_{-1} = U so mu_omega is uniform; omega_0, omega_1, ... as given
    w = PathWindow(1, 3, [1, 1, 0, 0, 0])
    assert mixing_time(iu.kernels, w, 0.5, 3) == 1
    w = PathWindow(1, 3, [1, 0, 1, 0, 0])
    assert mixing_time(iu.kernels, w, 0.5, 3) == 2
    w = PathWindow(1, 3, [1, 0, 0, 0, 0])
    assert mixing_time(iu.kernels, w, 0.5, 3) is None
    assert mixing_time(iu.kernels, w, 2.0, 3) == 0
    with pytest.raises(ValueError):
        mixing_time(iu.kernels, w, 0.0, 3)


def test_homogeneous_matches_deflated_oracle(hom):
    w = PathWindow(600, 30, np.zeros(631, dtype=int))
    for eps in (0.5, 0.1, 1e-3, 1e-6):
        expected = next(n for n in range(1, 30) if deflated_distance(P_HOM, n) <= eps)
        assert mixing_time(hom.kernels, w, eps, 30) == expected


def test_first_passage_ambiguity():
    prof = MixingProfile(
        dist=np.array([[0.6, 0.49, 0.3], [0.6, 0.45, 0.2], [0.9, 0.8, 0.7]]),
        err=np.full((3, 3), 0.02),
        ok=np.ones(3, dtype=bool),
    )
    N, amb = first_passage(prof, 0.5)
    assert N.tolist() == [2, 1, NOT_FOUND]
    assert amb == 1


def test_monotone_in_epsilon(mr):
    prof = sample_profiles(mr.env, mr.kernels, 40, 300, seed=2, tol=1e-11)
    prev = None
    for eps in (1.5, 0.5, 0.1, 0.01, 1e-4):
        N, _ = first_passage(prof, eps)
        N = np.where(N == NOT_FOUND, 10**9, N)
        if prev is not None:
            assert np.all(N >= prev)
        prev = N


def test_profile_batch_matches_single(mr):
    batch = sample_windows(mr.env, 512, 20, 5, np.random.default_rng(0))
    prof = mixing_profile(mr.kernels, batch, 20, 1e-11)
    N, _ = first_passage(prof, 0.2)
    for b in range(5):
        assert mixing_time(mr.kernels, batch[b], 0.2, 20) == (None if N[b] == NOT_FOUND else N[b])


def test_tail_curve():
    tail, se = tail_curve(np.array([0, 1, 1, NOT_FOUND]), np.array([0, 1, 5]))
    np.testing.assert_allclose(tail, [0.75, 0.25, 0.25])
    assert se[0] > 0


def test_tail_experiment_identity_uniform(iu):
    cert = build_certificate(iu.env, iu.kernels, 1.0, 1)
    rep = tail_experiment(iu.env, iu.kernels, cert, 1.3, 0.5, 10, 20_000, seed=4)
    exact = 0.5 ** rep.N_values
    assert np.all(np.abs(rep.empirical_tail - exact) <= 4 * np.sqrt(exact * (1 - exact) / rep.samples) + 1e-12)
    assert np.all(rep.empirical_tail <= rep.bound_analytic_moment)
    assert rep.skipped == 0 and rep.ambiguous == 0


def test_schedule_envelope_identity_uniform(iu):
    prof = sample_profiles(iu.env, iu.kernels, 20, 20_000, seed=1, tol=1e-12)
    env = schedule_envelope(prof, np.sqrt(0.5), 2.0)
    assert env.passed
    assert env.eps[0] == 1.0
