import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sigmak import symfun
from sigmak.errors import ConeViolation, DimensionError


def minors_sigma(k, A):
    """sigma_k as the sum of k x k principal minors."""
    n = A.shape[-1]
    if k == 0:
        return 1.0
    return sum(np.linalg.det(A[np.ix_(idx, idx)]) for idx in itertools.combinations(range(n), k))


def recursive_newton(k, A):
    """T_0 = I, T_j = sigma_j I - T_{j-1} A with sigma_j from principal minors."""
    n = A.shape[-1]
    T = np.eye(n)
    for j in range(1, k + 1):
        T = minors_sigma(j, A) * np.eye(n) - T @ A
    return T


@pytest.fixture
def rng():
    return np.random.default_rng(12)


def test_sigma_matches_principal_minors(rng):
    for n in range(1, 7):
        A = symfun.sample_symmetric(rng, n, 20)
        for k in range(0, n + 1):
            got = symfun.sigma(k, A)
            want = np.array([minors_sigma(k, a) for a in A])
            assert np.allclose(got, want, rtol=1e-11, atol=1e-11)


def test_known_values():
    I3 = np.eye(3)
    assert symfun.sigma(1, I3) == 3.0
    assert symfun.sigma(2, I3) == 3.0
    assert symfun.sigma(3, I3) == 1.0
    assert symfun.sigma(2, np.diag([1.0, 2.0, 3.0])) == pytest.approx(11.0)
    # sigma_1 = trace, sigma_n = determinant
    A = np.array([[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]])
    assert symfun.sigma(1, A) == pytest.approx(9.0)
    assert symfun.sigma(3, A) == pytest.approx(np.linalg.det(A))


def test_newton_tensor_matches_recursion(rng):
    for n in (2, 3, 5):
        A = symfun.sample_symmetric(rng, n, 10)
        for k in range(0, n + 1):
            got = symfun.newton_tensor(k, A)
            want = np.array([recursive_newton(k, a) for a in A])
            assert np.allclose(got, want, atol=1e-10 * max(1.0, np.abs(want).max()))


def test_newton_tensor_n_vanishes(rng):
    # Cayley-Hamilton: T_n(A) = 0
    A = symfun.sample_symmetric(rng, 4, 10)
    assert np.abs(symfun.newton_tensor(4, A)).max() < 1e-10


def test_cone_membership():
    A = np.diag([1.0, 1.0, -0.4])
    assert symfun.in_gamma_k(1, A)
    assert symfun.in_gamma_k(2, A)  # sigma_2 = 1 - 0.8 = 0.2
    assert not symfun.in_gamma_k(3, A)
    B = np.diag([1.0, 1.0, -0.5])  # sigma_2 = 0 exactly: boundary, not inside
    assert not symfun.in_gamma_k(2, B)


def test_cone_margin_of_identity():
    for n in (3, 5):
        for k in range(1, n + 1):
            want = min(math.comb(n, j) ** (1 / j) for j in range(1, k + 1))
            assert symfun.cone_margin(k, np.eye(n)) == pytest.approx(want)


def test_cone_margin_is_homogeneous(rng):
    A = symfun.sample_gamma(rng, 4, 2, 50)
    assert np.allclose(symfun.cone_margin(2, 3.0 * A), 3.0 * symfun.cone_margin(2, A))


def test_sigma_root_outside_cone():
    A = np.diag([1.0, -2.0, 0.5])
    with pytest.raises(ConeViolation):
        symfun.sigma_root(2, A)
    assert np.isnan(symfun.sigma_root(2, A[None], strict=False)[0])
    with pytest.raises(ConeViolation):
        symfun.grad_sigma_k1k(2, A)


def test_dimension_checks():
    with pytest.raises(DimensionError):
        symfun.sigma(4, np.eye(3))
    with pytest.raises(DimensionError):
        symfun.sigma(1, np.ones((2, 3)))
    with pytest.raises(DimensionError):
        symfun.concavity_probe(2, np.eye(3), np.eye(2), 0.5)


def test_sample_gamma_in_cone(rng):
    for n, k in [(3, 2), (4, 4), (6, 3)]:
        A = symfun.sample_gamma(rng, n, k, 200)
        assert A.shape == (200, n, n)
        assert np.all(symfun.in_gamma_k(k, A))
    B = symfun.sample_gamma(rng, 4, 2, 100, boundary=True)
    assert np.all(symfun.in_gamma_k(2, B)) and not np.any(symfun.in_gamma_k(3, B))


def test_concavity_probe_endpoints(rng):
    A, B = symfun.sample_gamma(rng, 3, 2, 2)
    assert symfun.concavity_probe(2, A, B, 0.0) == 0.0
    assert symfun.concavity_probe(2, A, A, 0.4) == pytest.approx(0.0, abs=1e-14)


sym3 = arrays(np.float64, (3, 3), elements=st.floats(-2, 2, allow_nan=False, allow_subnormal=False))


@settings(max_examples=60, deadline=None)
@given(sym3)
def test_identities_on_arbitrary_symmetric(M):
    A = 0.5 * (M + M.T)
    for k in range(1, 3):
        scale = symfun.identity_scale(k, A)
        assert symfun.trace_identity_residual(k, A) <= 1e-12 * max(1.0, scale)
    for k in range(1, 4):
        assert symfun.euler_identity_residual(k, A) <= 1e-12 * max(1.0, symfun.identity_scale(k, A))
    for k in range(2, 4):
        assert symfun.newton_complement_identity(k, A) <= 1e-12 * max(1.0, symfun.identity_scale(k - 1, A))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_quotient_chain_nonnegative(seed):
    r = np.random.default_rng(seed)
    A = symfun.sample_gamma(r, 4, 3, 5)
    assert np.all(symfun.quotient_chain_gap(3, A) >= -1e-10)
