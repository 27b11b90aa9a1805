from fractions import Fraction

import numpy as np
import pytest

from sigmak import estimates as es
from sigmak import symfun
from sigmak.errors import ConfigError, DimensionError, DomainError, GridError, ThresholdError
from sigmak.expr import ExprFunction
from sigmak.gridcalc import Box, ScalarField
from sigmak.solver import manufactured


@pytest.fixture(scope="module")
def bubble():
    return manufactured("bubble-positive", 3, 2)


@pytest.fixture(scope="module")
def perturbed():
    return manufactured("perturbed-bubble", 3, 2)


def cfg_for(u, q=4.0):
    R = 0.45
    return es.EstimateConfig(R=R, rho=R / 3, q=q, h=float(u.spacing.max()))


# ------------------------------------------------------------- cutoff


def test_cutoff_profile_shape():
    R, rho = 0.3, 0.1
    r = np.array([0.0, 0.4, 0.45, 0.5, 0.6])
    eta = es.cutoff_profile(r, R, rho)
    assert eta[0] == 1.0 and eta[1] == 1.0 and eta[-1] == 0.0
    assert 0 < eta[2] < 1 and eta[3] == 0.0
    # C^1 at both ends of the layer
    t = 1e-7
    for r0 in (R + rho, R + 2 * rho):
        left = (es.cutoff_profile(r0, R, rho) - es.cutoff_profile(r0 - t, R, rho)) / t
        right = (es.cutoff_profile(r0 + t, R, rho) - es.cutoff_profile(r0, R, rho)) / t
        assert abs(left - right) < 1e-4


def test_cutoff_bounds_closed_form():
    b = es.cutoff_bounds(0.2)
    assert b["grad_sampled"] <= b["grad"] * (1 + 1e-9)
    assert b["grad_sampled"] == pytest.approx(b["grad"], rel=1e-6)
    assert b["hess_sampled"] <= b["hess"] * (1 + 1e-9)


# ------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        es.EstimateConfig(R=0.3, rho=0.2, q=4, h=0.1)
    with pytest.raises(ConfigError):
        es.EstimateConfig(R=0.3, rho=0.1, q=1.0, h=0.1)
    with pytest.raises(ConfigError):
        es.EstimateConfig(R=0.3, rho=0.1, q=2, h=0.1, delta=-1)
    cfg = es.EstimateConfig(R=0.6, rho=0.2, q=2, h=0.1)
    with pytest.raises(DomainError):
        cfg.validate(Box.cube(3, -1, 1))
    es.EstimateConfig(R=0.5, rho=0.1, q=2, h=0.1).validate(Box.cube(3, -1, 1))


def test_tilde_v_on_quadratic(bubble):
    u = bubble.sample(17)
    tv = es.TildeV.from_solution(u, bubble.spec, 0.25)
    # v_h of 1 + |x|^2 is exactly 6 and C1 is 0 for this field
    assert tv.c1 == 0.0
    assert np.allclose(tv.values, 6.0)
    assert np.allclose(tv.q_delta(0.0), 6.0)
    assert np.all(tv.q_delta(1.0) >= 1.0)


# ------------------------------------------------------ pointwise checks


@pytest.mark.parametrize("name", ["bubble-positive", "perturbed-bubble", "cap-negative"])
def test_concavity_and_gradient_bound(name):
    ms = manufactured(name, 3, 2)
    u = ms.sample(17)
    half = 0.5 * (ms.spec.box.hi[0] - ms.spec.box.lo[0])
    R = 0.45 * half
    for q in (2.0, 8.0):
        cfg = es.EstimateConfig(R=R, rho=R / 3, q=q, h=float(u.spacing.max()))
        c = es.concavity_dq_check(u, ms.spec, cfg)
        g = es.i1_pointwise_bound(u, ms.spec, cfg)
        assert c.passed, c.details
        assert g.passed, g.details
        assert c.details["skipped"] == 0


def test_cancellation_identities(perturbed):
    r = es.cancellation_identity_checks(perturbed.sample(13), perturbed.spec)
    assert r.passed
    rng = np.random.default_rng(5)
    A = symfun.sample_gamma(rng, 5, 3, 500)
    res = es.cancellation_residuals(3, A, symfun.sigma_root(3, A))
    for key in ("euler", "complement", "model_f"):
        assert np.max(res[key]) < 1e-12


@pytest.mark.parametrize("H1", ["1 + z**2", "2 + sin(x1)*x2", "exp(0.3*z) + xi1**2"])
def test_bochner_identity_exact(H1):
    box = Box.cube(3, -1, 1)
    u = ScalarField.from_function(box, 17, lambda X: np.sin(X[..., 0]) * np.exp(0.5 * X[..., 1]) + X[..., 2] ** 3)
    for axis, h in ((0, 0.125), (2, 0.25)):
        r = es.bochner_identity_check(u, ExprFunction(H1, 3), axis, h)
        assert r.passed, r.details
        assert r.details["relative_residual"] < 1e-13


def test_bochner_needs_margin():
    u = ScalarField.from_function(Box.cube(2, -1, 1), 9, lambda X: X[..., 0] ** 2)
    with pytest.raises(GridError):
        es.bochner_identity_check(u, ExprFunction("1", 2), 0, 0.25, margin=1)


def test_i123_probe_positive_i1(perturbed):
    u = perturbed.sample(17)
    r = es.estimate_probe_I123(u, perturbed.spec, cfg_for(u))
    assert r.kind == "probe"
    assert r.details["I1"] > 0
    assert r.implied_constant is not None and np.isfinite(r.implied_constant)


def test_f_xi_extension(perturbed):
    u = perturbed.sample(17)
    r = es.f_xi_extension_check(u, perturbed.spec, cfg_for(u))
    assert r.passed, r.details


# ---------------------------------------------------------- exponents


@pytest.mark.parametrize(
    "case,k,n,beta,offset",
    [
        ("case1", 2, 3, Fraction(3, 2), 1),
        ("case1", 2, 4, Fraction(4, 3), 1),
        ("case1", 3, 4, Fraction(6, 4), 2),
        ("case2", 2, 3, Fraction(9, 5), 2),
        ("k2-general", 2, 4, Fraction(12, 8), 2),
        ("k>=3-general", 3, 3, Fraction(9, 4), 5),
    ],
)
def test_case_exponents(case, k, n, beta, offset):
    ex = es.case_exponents(case, k, n)
    assert ex.beta == beta and ex.offset == offset
    # the Sobolev-conjugate route gives the same beta
    assert ex.sobolev_beta() == ex.beta


def test_case_exponent_domain():
    with pytest.raises(ConfigError):
        es.case_exponents("k2-general", 3, 4)
    with pytest.raises(ConfigError):
        es.case_exponents("k>=3-general", 2, 4)
    with pytest.raises(DimensionError):
        es.case_exponents("case1", 2, 2)
    with pytest.raises(ConfigError):
        es.case_exponents("case9", 2, 3)


def test_moser_schedule_exact():
    s = es.moser_schedule(2, 3, 4, "case1")
    assert s.beta == Fraction(3, 2) and s.q0 == 3 and s.limit == 1
    assert s.q[:4] == [3, Fraction(7, 2), Fraction(17, 4), Fraction(43, 8)]
    for j in (1, 10, 60):
        assert s.ratio(j) == s.closed_form(j)
    assert abs(s.limit_gap(60)) < 1e-9
    assert s.sum_beta_inv == 3 and s.sum_i_beta_inv == 6
    a, b = es.partial_sums(s.beta, 200)
    assert a == pytest.approx(float(s.sum_i_beta_inv)) and b == pytest.approx(float(s.sum_beta_inv))


def test_moser_case2_limit():
    s = es.moser_schedule(2, 3, 5, "case2")
    assert s.beta == Fraction(9, 5) and s.limit == Fraction(1, 2)


@pytest.mark.parametrize("case,k,n,gate", [("case1", 2, 3, 3), ("case2", 2, 3, Fraction(9, 2)), ("k2-general", 2, 4, 6), ("k>=3-general", 3, 4, 12)])
def test_moser_gates(case, k, n, gate):
    with pytest.raises(ThresholdError):
        es.moser_schedule(k, n, gate, case)
    s = es.moser_schedule(k, n, Fraction(gate) + Fraction(1, 100), case)
    assert s.limit > 0


def test_reverse_holder_threshold(bubble):
    u = bubble.sample(17)
    with pytest.raises(ThresholdError):
        es.reverse_holder_probe(u, bubble.spec, cfg_for(u, q=2.0))
    r = es.reverse_holder_probe(u, bubble.spec, cfg_for(u, q=4.0))
    assert r.kind == "probe" and r.implied_constant > 0
    assert r.details["binding_bound"].startswith("q >")


def test_stability_helpers():
    assert es.within_band([1.0, 1.1, 0.85])
    assert not es.within_band([1.0, 1.3])
    assert es.stability([2.0, 3.0]) == pytest.approx(0.5)
    assert es.stability([0.0, 1.0]) == float("inf")


def test_sup_norm_chain_on_bubble(bubble):
    u = bubble.sample(17)
    s = es.moser_schedule(2, 3, 4, "case1")
    r = es.sup_norm_chain(u, bubble.spec, s, R=0.45)
    assert r.passed, r.details
