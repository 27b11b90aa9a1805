import numpy as np
import pytest

from sigmak.errors import ConfigError
from sigmak.expr import CallableFunction, ExprFunction, Reflected, function_from_dict


@pytest.mark.parametrize(
    "text",
    ["__import__('os')", "x1.real", "x4", "lambda: 1", "x1 if z else 2", "sin(x1, x2)", "'a'", "x1 // 2", "x1 = 2"],
)
def test_rejects_outside_grammar(text):
    with pytest.raises(ConfigError):
        ExprFunction(text, 3)


def test_values_and_derivatives():
    f = ExprFunction("z*x1 + sin(xi2) + xi1**2 * xi2", 2)
    x = np.array([[0.5, -1.0]])
    z = np.array([2.0])
    p = np.array([[0.3, 0.7]])
    assert f.value(x, z, p)[0] == pytest.approx(1.0 + np.sin(0.7) + 0.09 * 0.7)
    assert np.allclose(f.d_x(x, z, p), [[2.0, 0.0]])
    assert f.d_z(x, z, p)[0] == pytest.approx(0.5)
    assert np.allclose(f.d_p(x, z, p), [[2 * 0.3 * 0.7, np.cos(0.7) + 0.09]])
    assert np.allclose(f.d2_pp(x, z, p), [[[1.4, 0.6], [0.6, -np.sin(0.7)]]])
    assert f.depends_on_p


def test_constant_broadcasts():
    f = ExprFunction("3", 2)
    out = f.value(np.zeros((4, 5, 2)), np.zeros((4, 5)), np.zeros((4, 5, 2)))
    assert out.shape == (4, 5) and np.all(out == 3.0)
    assert f.d_p(np.zeros((4, 2)), np.zeros(4), np.zeros((4, 2))).shape == (4, 2)


def test_callable_differences_match_expression():
    e = ExprFunction("exp(x1)*z + xi1*xi2", 2)
    c = CallableFunction(lambda x, z, p: np.exp(x[..., 0]) * z + p[..., 0] * p[..., 1], 2)
    rng = np.random.default_rng(0)
    x, z, p = rng.normal(size=(5, 2)), rng.uniform(1, 2, 5), rng.normal(size=(5, 2))
    for name in ("d_x", "d_z", "d_p", "d2_pp"):
        assert np.allclose(getattr(c, name)(x, z, p), getattr(e, name)(x, z, p), atol=1e-6)


def test_reflection_and_dict_round_trip():
    f = ExprFunction("z + 2*xi1 + x2", 2)
    g = Reflected.of(f)
    x, z, p = np.array([[0.0, 1.0]]), np.array([0.5]), np.array([[1.0, 0.0]])
    assert g.value(x, z, p)[0] == pytest.approx(-0.5 - 2.0 + 1.0)
    assert np.allclose(g.d_z(x, z, p), -1.0)
    assert Reflected.of(g).value(x, z, p)[0] == pytest.approx(f.value(x, z, p)[0])
    back = function_from_dict(g.to_dict(), 2)
    assert back.value(x, z, p)[0] == pytest.approx(g.value(x, z, p)[0])
    with pytest.raises(ConfigError):
        function_from_dict({"nonsense": 1}, 2)
