import numpy as np
import pytest

from erglab.env_process import PathWindow, WindowError, build_iid_env, build_markov_env
from erglab.kernel_cocycle import (
    backward_product,
    build_kernel_set,
    check_supports,
    dobrushin,
    doeblin_hits,
    doeblin_time,
    forward_product,
    minorize,
)
from conftest import P_HOM

I2 = np.eye(2)
U2 = np.full((2, 2), 0.5)


@pytest.fixture
def iu_kernels():
    return build_kernel_set([I2, U2])


def test_validation_names_row():
    with pytest.raises(ValueError, match="kernel 1 row 0"):
        build_kernel_set([I2, [[0.6, 0.3], [0.5, 0.5]]])
    with pytest.raises(ValueError, match="negative"):
        build_kernel_set([[[1.2, -0.2], [0.5, 0.5]]])


def test_forward_identity_and_power():
    ks = build_kernel_set([P_HOM])
    w = PathWindow(0, 5, np.zeros(6, dtype=int))
    assert np.array_equal(forward_product(ks, w, 0), I2)
    np.testing.assert_allclose(forward_product(ks, w, 3), P_HOM @ P_HOM @ P_HOM, atol=1e-12)


def test_forward_backward_examples(iu_kernels):
    w = PathWindow(2, 2, [0, 1, 0, 1, 0])  # omega_{-2..2}
    np.testing.assert_allclose(forward_product(iu_kernels, w, 2), U2)
    np.testing.assert_allclose(backward_product(iu_kernels, w, 2), U2)
    assert np.array_equal(backward_product(iu_kernels, w, 0), I2)


def test_backward_equals_shifted_forward():
    ks = build_kernel_set([P_HOM, [[0.2, 0.8], [0.6, 0.4]]])
    rng = np.random.default_rng(0)
    w = PathWindow(10, 10, rng.integers(0, 2, 21))
    for n in range(0, 10):
        assert np.array_equal(backward_product(ks, w, n), forward_product(ks, w.shift(-n), n))


def test_window_too_short(iu_kernels):
    w = PathWindow(1, 1, [0, 0, 0])
    with pytest.raises(WindowError, match="omega_0..omega_2"):
        forward_product(iu_kernels, w, 3)


def test_minorize_examples():
    g, m = minorize(U2)
    assert g == 1.0 and np.allclose(m, [0.5, 0.5])
    assert minorize(I2) == (0.0, None)
    g, m = minorize(P_HOM)
    assert abs(g - 0.8) < 1e-15
    np.testing.assert_allclose(m, [0.875, 0.125])


def test_dobrushin_examples():
    assert dobrushin(U2) == 0.0
    assert dobrushin(I2) == 1.0
    assert abs(dobrushin(P_HOM) - 0.2) < 1e-15


def test_doeblin_time(iu_kernels):
    w = PathWindow(3, 0, [0, 0, 1, 0])
    mn = doeblin_time(iu_kernels, w, 0.5, 3)
    assert mn.n == 1 and mn.gamma == 1.0 and np.allclose(mn.m, [0.5, 0.5])
    assert doeblin_time(iu_kernels, PathWindow(5, 0, [0] * 6), 0.5, 5) is None
    ks = build_kernel_set([P_HOM])
    mn = doeblin_time(ks, PathWindow(2, 0, [0, 0, 0]), 0.5, 2)
    assert mn.n == 1 and abs(mn.gamma - 0.8) < 1e-15


def test_doeblin_hits_matches_scalar(iu_kernels):
    rng = np.random.default_rng(3)
    syms = rng.integers(0, 2, (200, 4))
    hits = doeblin_hits(iu_kernels, syms, 1.0, 3)
    for row, h in zip(syms, hits):
        w = PathWindow(4, 0, np.concatenate([row[::-1], [0]]))
        assert h == (doeblin_time(iu_kernels, w, 1.0, 3) is not None)


def test_supports():
    env = build_iid_env(2, [0.5, 0.5])
    ks = build_kernel_set([I2, U2], supports=[[True, True], [True, True]])
    check_supports(ks, env)
    bad = build_kernel_set([I2, U2], supports=[[True, False], [True, True]])
    with pytest.raises(ValueError, match="outside support"):
        check_supports(bad, env)
