import numpy as np
import pytest

from sigmak.errors import ConfigError, DomainError, InadmissibleInit, MaxIterations
from sigmak.gridcalc import Box
from sigmak.solver import NAMES, _Discrete, boundary_bump, default_init, linear_solve, manufactured, mms_convergence, newton_solve


@pytest.mark.parametrize("name", NAMES)
@pytest.mark.parametrize("n,k", [(3, 2), (4, 3)])
def test_manufactured_are_exact(name, n, k):
    ms = manufactured(name, n, k)
    assert ms.exact_residual(7) < 1e-12
    assert ms.min_margin(7) > 0


def test_manufactured_errors():
    with pytest.raises(ConfigError):
        manufactured("saddle", 3, 2)
    with pytest.raises(DomainError):
        manufactured("cap-negative", 3, 2, Box.cube(3, -1, 1))


def test_perturbed_eps_keeps_margin():
    ms = manufactured("perturbed-bubble", 3, 2)
    base = manufactured("bubble-positive", 3, 2)
    assert ms.params["eps"] == 0.05
    assert ms.min_margin(9) >= 0.5 * base.min_margin(9)


def test_jacobian_matches_differences():
    ms = manufactured("perturbed-bubble", 3, 2)
    u = default_init(ms, 9)
    disc = _Discrete(ms.spec, u)
    nd, A, inside, margin, res = disc.evaluate(u.values)
    J = disc.jacobian(nd, A)
    rng = np.random.default_rng(0)
    d = rng.normal(size=u.shape) * disc.interior
    t = 1e-6
    fd = (disc.evaluate(u.values + t * d)[4] - disc.evaluate(u.values - t * d)[4]) / (2 * t)
    Jd = (J @ d.ravel()).reshape(u.shape)
    m = disc.interior
    assert np.abs(Jd[m] - fd[m]).max() < 1e-6 * np.abs(fd[m]).max()


def test_quadratic_recovered_from_perturbed_init():
    ms = manufactured("quadratic-khessian", 3, 2)
    exact = ms.sample(9)
    init = exact.with_values(exact.values + 0.05 * boundary_bump(ms.spec.box, exact.coords()))
    r = newton_solve(ms.spec, exact, init)
    # H = 0 and constant f: the discrete problem is sigma_2^(1/2) of a linear
    # map of u, so Newton lands on the solution in few steps
    assert r.converged and r.iterations <= 6
    assert np.abs(r.field.values - exact.values).max() < 1e-10


def test_bubble_converges_quadratically():
    ms = manufactured("bubble-positive", 3, 2)
    exact = ms.sample(13)
    r = newton_solve(ms.spec, exact, default_init(ms, 13))
    assert r.converged and all(m > 0 for m in r.margins)
    res = r.residuals
    # last full steps: e_{j+1} <~ C e_j^2
    assert res[-1] < 1e-9 and res[-2] < 1e-3
    assert np.abs(r.field.values - exact.values).max() < 1e-9


def test_cap_negative_solution_positive():
    ms = manufactured("cap-negative", 3, 2)
    exact = ms.sample(9)
    r = newton_solve(ms.spec, exact, default_init(ms, 9))
    assert r.converged
    assert np.all(r.field.values > 0)
    assert np.abs(r.field.values - exact.values).max() < 1e-9


def test_inadmissible_init_rejected():
    ms = manufactured("bubble-positive", 3, 2)
    exact = ms.sample(9)
    saddle = exact.with_values(exact.values - 3 * exact.coords()[..., 0] ** 2)
    with pytest.raises(InadmissibleInit):
        newton_solve(ms.spec, exact, saddle)
    with pytest.raises(InadmissibleInit):
        newton_solve(ms.spec, exact, exact.with_values(-exact.values))


def test_max_iterations():
    ms = manufactured("perturbed-bubble", 3, 2)
    with pytest.raises(MaxIterations):
        newton_solve(ms.spec, ms.sample(9), default_init(ms, 9), max_iter=1)


def test_mms_perturbed_second_order():
    r = mms_convergence("perturbed-bubble", 3, 2, levels=(9, 13, 17))
    assert r.passed
    assert min(r.details["orders"]) > 1.8
    assert r.details["all_iterates_admissible"]
    assert all(r.details["estimate_checks"].values())


def test_mms_needs_three_levels():
    with pytest.raises(ConfigError):
        mms_convergence("bubble-positive", levels=(9, 17))


def test_amg_and_direct_agree():
    ms = manufactured("perturbed-bubble", 3, 2)
    u = default_init(ms, 17)
    disc = _Discrete(ms.spec, u)
    nd, A, inside, margin, res = disc.evaluate(u.values)
    J = disc.jacobian(nd, A)
    rhs = np.where(disc.interior, -res, 0.0).ravel()
    x_lu = linear_solve(J, rhs, "direct")
    x_amg = linear_solve(J, rhs, "amg")
    assert np.abs(x_amg - x_lu).max() < 1e-10 * np.abs(x_lu).max()
    with pytest.raises(ConfigError):
        linear_solve(J, rhs, "cholesky")


def test_newton_with_amg_matches_direct():
    ms = manufactured("perturbed-bubble", 3, 2)
    exact = ms.sample(13)
    a = newton_solve(ms.spec, exact, default_init(ms, 13), linear_solver="amg")
    b = newton_solve(ms.spec, exact, default_init(ms, 13), linear_solver="direct")
    assert a.converged and b.converged
    assert np.abs(a.field.values - b.field.values).max() < 1e-9
