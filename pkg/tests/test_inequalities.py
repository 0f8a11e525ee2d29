import numpy as np
import pytest

from nlskam import constants as K
from nlskam.inequalities import (
    SUITES,
    _draw,
    _rhs,
    calibrate,
    circle_norm,
    compose_circle,
    identity_ratios,
    verify_norms,
    winf_norm,
)


def test_compose_constant_shift():
    # u(x + c) has coefficients u_k e^{ikc}
    rng = np.random.default_rng(0)
    u = rng.standard_normal(9) + 1j * rng.standard_normal(9)
    p = np.zeros(3, complex)
    p[1] = 0.3
    out = compose_circle(u, p, n_out=4)
    assert np.abs(out - u * np.exp(1j * np.arange(-4, 5) * 0.3)).max() < 1e-13


def test_winf_norm_sine():
    c = np.array([0.5j, 0, -0.5j])  # sin x
    assert winf_norm(c, 0) == pytest.approx(1.0, abs=1e-4)
    assert winf_norm(c, 2) == pytest.approx(3.0, abs=1e-3)


def test_circle_norm_weights():
    c = np.zeros(7, complex)
    c[6] = 1.0
    assert circle_norm(c, 2) == 9.0


def test_identity_ratios():
    assert np.all(identity_ratios() <= 1.0)


def test_change_of_variable_example():
    # |xi|_{1,inf} = 0.4: bound holds with the calibrated constant
    x = np.array([0.2j, 0, -0.2j])  # 0.4 sin x has |p|_inf + |p'|_inf = 0.8; halve it
    p = x * 0.5
    assert winf_norm(p, 1) == pytest.approx(0.4, abs=1e-4)
    u = np.zeros(13, complex)
    u[6 + 3], u[6 - 3] = 1.0, 1.0
    uf = compose_circle(u, p)
    for s in (1, 2, 3, 4):
        rhs = K.constant(K.CHANGE_A, s) * (circle_norm(u, s) + winf_norm(p, s, start=1) * circle_norm(u, 1))
        assert circle_norm(uf, s) <= rhs


@pytest.mark.parametrize("name", list(SUITES))
def test_suite_passes(name):
    rep = verify_norms(seed=7, count=150, suites=[name])
    assert rep.passed, rep.rows()


def test_deterministic():
    a = verify_norms(seed=3, count=20, suites=["tame_product", "change_c"])
    b = verify_norms(seed=3, count=20, suites=["tame_product", "change_c"])
    for x, y in zip(a.suites, b.suites):
        assert np.array_equal(x.ratios, y.ratios)


@pytest.mark.parametrize("name", ["interpolation", "operator_field", "tame_product"])
def test_calibration_covers_its_corpus(name):
    # with margin 1 the constants are tight on the corpus they came from
    consts = calibrate(seed=11, count=40, margin=1.0, suites=[name])[name]
    _, _, s_values, kind = SUITES[name]
    lhs, terms = _draw(name, np.random.default_rng([11, list(SUITES).index(name)]), 40)
    ratios = lhs / _rhs(kind, consts, s_values, terms)
    assert ratios.max() <= 1 + 1e-12 and ratios.max() > 0.999


def test_frozen_constants_reproduce():
    small = calibrate(count=50, suites=["composition"])
    # a sub-corpus of the calibration seed never needs larger constants
    for s, c in small["composition"].items():
        assert c <= K.COMPOSITION[float(s)] + 1e-9
