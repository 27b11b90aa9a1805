import math

import numpy as np
import pytest

from sigmak import augmented as ag
from sigmak.errors import ConeViolation, ConfigError, DimensionError, DomainError
from sigmak.expr import ExprFunction
from sigmak.gridcalc import Box, ScalarField


def bubble(n=3):
    return ag.AnalyticField.from_expression("1 + " + " + ".join(f"x{i}**2" for i in range(1, n + 1)), n)


def yamabe_spec(n=3, k=2, sign="positive", box=None):
    c = math.comb(n, k) ** (1 / k)
    r2 = " + ".join(f"x{i}**2" for i in range(1, n + 1))
    return ag.ProblemSpec(n, k, box or Box.cube(n, -1, 1), ExprFunction(f"{2 * c}/(1 + {r2})", n), ag.PositiveYamabe(), sign)


def test_yamabe_values():
    h = ag.PositiveYamabe()
    x = np.zeros((1, 3))
    H = h.H(x, np.array([2.0]), np.array([[1.0, 2.0, 2.0]]))
    assert np.allclose(H[0], 9 / 4 * np.eye(3))
    with pytest.raises(DomainError):
        h.check_domain(np.array([0.0]))
    Hn = ag.NegativeYamabe().H(x, np.array([-2.0]), np.array([[1.0, 2.0, 2.0]]))
    assert np.allclose(Hn[0], -9 / 4 * np.eye(3))


@pytest.mark.parametrize(
    "model",
    [
        ag.PositiveYamabe(),
        ag.ScalarGeneral(ExprFunction("0.1*z*x1 + 0.05*(xi1**2 + xi2**2)", 3)),
        ag.ScalarQuadratic(ExprFunction("1 + 0.2*x2", 3)),
        ag.GeneralMatrix(fn=lambda x, z, p: 0.05 * p[..., :, None] * p[..., None, :] + 0.1 * z[..., None, None] * np.eye(3), n=3),
    ],
)
def test_h_derivatives_match_differences(model):
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (6, 3))
    z = rng.uniform(1, 2, 6)
    p = rng.uniform(-1, 1, (6, 3))
    t = 1e-6
    dz = (model.H(x, z + t, p) - model.H(x, z - t, p)) / (2 * t)
    assert np.allclose(model.dH_dz(x, z, p), dz, atol=1e-7)
    for a in range(3):
        e = np.zeros(3)
        e[a] = t
        dx = (model.H(x + e, z, p) - model.H(x - e, z, p)) / (2 * t)
        dp = (model.H(x, z, p + e) - model.H(x, z, p - e)) / (2 * t)
        assert np.allclose(model.dH_dx(x, z, p)[..., a], dx, atol=1e-7)
        assert np.allclose(model.dH_dp(x, z, p)[..., a], dp, atol=1e-7)
    H = model.H(x, z, p)
    assert np.allclose(H, np.swapaxes(H, -1, -2))


def test_bubble_is_exact_solution():
    # A_H = 2 I / (1 + |x|^2) on the bubble
    spec = yamabe_spec()
    nd = bubble().nodes(spec.box, 9)
    A = ag.a_h_field(nd, spec)
    want = 2.0 / nd.z
    assert np.allclose(A, want[..., None, None] * np.eye(3))
    assert np.abs(ag.residual_field(nd, spec)).max() < 1e-13
    adm = ag.admissibility_map(nd, spec)
    assert adm.admissible.all()
    assert np.allclose(adm.margin, 2 * np.sqrt(3) / nd.z)  # min(3, sqrt 3) * 2/u


def test_admissibility_flags_outside_cone():
    spec = ag.ProblemSpec(3, 2, Box.cube(3, -1, 1), ExprFunction("1", 3), ag.Zero())
    u = ScalarField.from_function(spec.box, 9, lambda X: X[..., 0] ** 2 - X[..., 1] ** 2)
    adm = ag.admissibility_map(u, spec)
    assert not adm.admissible.any()
    assert (adm.margin <= 0).all()


def test_c1_of_scaled_quadratic():
    spec = ag.ProblemSpec(3, 2, Box.cube(3, -1, 1), ExprFunction("1", 3), ag.Zero())
    u = ag.AnalyticField.from_expression("0.1*(x1**2 + x2**2 + x3**2)", 3).nodes(spec.box, 5)
    r = ag.compute_c1(u, spec)
    assert r.c1 == pytest.approx(0.4)
    assert r.lap_min == pytest.approx(0.6)
    bad = ag.AnalyticField.from_expression("x1**2 - 2*x2**2", 3).nodes(spec.box, 5)
    with pytest.raises(ConeViolation):
        ag.compute_c1(bad, spec)
    with pytest.raises(DimensionError):
        ag.compute_c1(u, ag.ProblemSpec(2, 2, Box.cube(2, -1, 1), ExprFunction("1", 2), ag.Zero()))


def test_c_sigma_constant_and_convexity():
    box = ag.EvalBox((0.0, 0.0, 0.0), 0.5, 1.0, 2.0, 1.0)
    concave = ag.ScalarGeneral(ExprFunction("-0.5*(xi1**2 + xi2**2 + xi3**2)", 3))
    r = ag.compute_c_sigma(concave, box)
    assert r.c_sigma == pytest.approx(0.5) and not r.varied
    assert ag.convexity_defect(concave, box, r.c_sigma) >= -1e-12
    assert ag.convexity_defect(concave, box, 0.0) < 0
    assert ag.compute_c_sigma(ag.PositiveYamabe(), box).c_sigma == 0.0
    with pytest.raises(DomainError):
        ag.compute_c_sigma(ag.PositiveYamabe(), ag.EvalBox((0.0, 0.0, 0.0), 0.5, -1.0, 2.0, 1.0))


def test_varied_curvature_gets_safety_factor():
    box = ag.EvalBox((0.0, 0.0), 0.5, 1.0, 2.0, 1.0)
    model = ag.ScalarGeneral(ExprFunction("-(1 + x1**2)*(xi1**2 + xi2**2)", 2))
    r = ag.compute_c_sigma(model, box)
    assert r.varied
    assert r.c_sigma == pytest.approx(1.25 * -0.5 * r.min_curvature)
    assert r.c_sigma >= 1.25  # curvature -2(1 + x1^2) <= -2


def test_spec_round_trip(tmp_path):
    spec = ag.ProblemSpec(
        3, 2, Box.cube(3, -1, 1), ExprFunction("1 + x1", 3), ag.ScalarGeneral(ExprFunction("0.3*z", 3))
    )
    spec.save(tmp_path / "s.json")
    back = ag.ProblemSpec.load(tmp_path / "s.json")
    assert back.to_dict() == spec.to_dict()
    with pytest.raises(ConfigError):
        ag.ProblemSpec.from_dict({"n": 3})
    with pytest.raises(DimensionError):
        ag.ProblemSpec(3, 4, Box.cube(3, -1, 1), ExprFunction("1", 3), ag.Zero())
    with pytest.raises(ConfigError):
        ag.ProblemSpec(3, 2, Box.cube(3, -1, 1), ExprFunction("1", 3), ag.Zero(), "sideways")


def test_negative_case_positive_form():
    n, k = 3, 2
    c = math.comb(n, k) ** 0.5
    spec = ag.ProblemSpec(
        n, k, Box.cube(n, -0.5, 0.5),
        ExprFunction(f"(0.5 + (x1**2 + x2**2 + x3**2)/(8*(1 - (x1**2 + x2**2 + x3**2)/4)))*{c}", n),
        ag.PositiveYamabe(), "negative",
    )
    cap = ag.AnalyticField.from_expression("1 - (x1**2 + x2**2 + x3**2)/4", n)
    nd = cap.nodes(spec.box, 9)
    assert np.abs(ag.residual_field(nd, spec)).max() < 1e-13
    pos = spec.positive_form()
    assert isinstance(pos.h, ag.NegativeYamabe) and pos.sign_case == "positive"
    assert np.abs(ag.residual_field(nd.negated(), pos)).max() < 1e-13


def test_reflection_is_involution():
    box = Box.cube(2, -1, 1)
    u = ScalarField.from_function(box, 5, lambda X: 2 + X[..., 0])
    f = ExprFunction("z + xi1", 2)
    w, g = ag.negative_to_positive(u, f)
    v, h = ag.positive_to_negative(w, g)
    assert np.array_equal(v.values, u.values)
    x, z, p = np.zeros((1, 2)), np.array([0.7]), np.array([[0.3, 0.0]])
    assert h.value(x, z, p) == pytest.approx(f.value(x, z, p))
    assert g.value(x, z, p) == pytest.approx(-1.0)
    with pytest.raises(DomainError):
        ag.negative_to_positive(w, f)
