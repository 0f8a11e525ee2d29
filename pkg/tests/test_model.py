import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlskam.model import (
    Monomial,
    Nonlinearity,
    coefficient_from_spec,
    coefficient_parity_defects,
    desk_nonlinearity,
    directional_derivative_check,
    eval_F,
    full_operator,
    linearize,
    validate_hypothesis,
)
from nlskam.opmatrix import classify_reversibility
from nlskam.spectral import SpectralField, Truncation, grid_points, parity_defect, project_parity, sobolev_norm

T = Truncation(1, 4, 5)
EPS = 0.01


def coeff(spec):
    return coefficient_from_spec(spec, 1)


def mono(spec, **powers):
    keys = ("z0p", "z0m", "z1p", "z1m", "z2p", "z2m")
    return Monomial(coeff(spec), tuple(powers.get(k, 0) for k in keys))


def random_x(rng, scale=0.05, trunc=T):
    c = rng.standard_normal((2,) + trunc.shape) + 1j * rng.standard_normal((2,) + trunc.shape)
    return project_parity(SpectralField(scale * c, trunc), "X")


SIN = [{"amp": 1.0, "x": "sin", "k": 1}]
COS = [{"amp": 1.0, "x": "cos", "k": 1}]
ONE = [{"amp": 1.0}]


class TestHypotheses:
    def test_uxx_cos_x(self):
        # the x-reflection and time-reversal rules hold; f(phi, x, 0) = 0 breaks (iii)
        rep = validate_hypothesis(Nonlinearity([mono(COS, z2p=1)]))
        assert rep.passed == {"i": True, "ii": True, "iii": False}
        clauses = [v["clause"] for v in rep.violations["iii"]]
        assert "f(phi, x, 0) vanishes identically" in clauses

    def test_sin_plus_u_squared_sin(self):
        rep = validate_hypothesis(Nonlinearity([mono(SIN), mono(SIN, z0p=2)]))
        assert rep.passed["i"] and rep.passed["ii"] and not rep.passed["iii"]
        assert rep.violations["iii"] == [{"clause": "d/dz2 f vanishes at z = 0"}]

    def test_sin_plus_uxx_passes(self):
        rep = validate_hypothesis(Nonlinearity([mono(SIN), mono(ONE, z2p=1)]))
        assert rep.ok and not rep.warnings

    def test_parity_violation_names_monomial(self):
        rep = validate_hypothesis(Nonlinearity([mono(COS), mono(ONE, z2p=1)]))
        assert not rep.passed["i"]
        assert rep.violations["i"][0]["powers"]["z2p"] == 0 and rep.violations["i"][0]["needs"] == "odd"

    def test_time_reversal_violation(self):
        bad = [{"amp": 1.0, "phi": "sin", "ell": [1], "x": "sin", "k": 1}]
        rep = validate_hypothesis(Nonlinearity([mono(SIN), mono(bad), mono(ONE, z2p=1)]))
        assert rep.passed["i"] and not rep.passed["ii"]

    def test_complex_second_derivative_coefficient(self):
        rep = validate_hypothesis(Nonlinearity([mono(SIN), mono([{"amp": [0.0, 1.0]}], z2p=1)]))
        assert not rep.passed["iii"]

    def test_sign_change_warns(self):
        rep = validate_hypothesis(Nonlinearity([mono(SIN), mono(COS, z2p=1)]))
        assert rep.passed["iii"] and rep.warnings

    def test_desk_nonlinearity_passes(self):
        assert validate_hypothesis(desk_nonlinearity()).ok


class TestEvalF:
    def test_zero(self):
        u = SpectralField.zeros(T, doubled=True)
        assert np.abs(eval_F(desk_nonlinearity(), u, 0.0, 1.0, [1.0]).coeffs).max() == 0

    @pytest.mark.parametrize("ell,j", [(0, 1), (2, 3), (-3, 5)])
    def test_single_sine_mode(self, ell, j):
        lam = 0.8
        s = np.zeros((9, 6))
        s[ell + 4, j] = 1.0
        u = SpectralField.doubled_from(SpectralField.from_sine(s, T))
        F = eval_F(desk_nonlinearity(), u, 0.0, lam, [1.0])
        for a, sigma in enumerate((1, -1)):
            # the conjugate component carries the mode -ell
            want = (1j * lam * sigma * ell - 1j * sigma * j ** 2) * u.coeffs[a]
            assert np.abs(F.coeffs[a] - want).max() < 1e-14

    def test_matches_grid_oracle(self):
        rng = np.random.default_rng(0)
        u = random_x(rng)
        f = desk_nonlinearity()
        lam, ob = 1.1, [1.0]
        F = eval_F(f, u, EPS, lam, ob)
        grid = (48, 64)
        phi, x = grid_points(1, grid)
        up, um = u.component(1), u.component(-1)
        z = [w.grid(grid) for w in (up, um, up.dx(1), um.dx(1), up.dx(2), um.dx(2))]
        f1 = ((1 + np.cos(phi)) * np.sin(x) + (1 + 0.5 * np.cos(phi) * np.cos(x)) * z[4] + 0.3 * np.cos(x) * z[5]
              + np.sin(x) * z[2] + 0.5 * np.sin(x) * z[3] + np.cos(phi) * np.cos(x) * z[0] + 0.2 * z[1] + z[0] ** 2 * z[1])
        plus = up.omega_dphi(lam).grid(grid) + 1j * up.dx(2).grid(grid) + 1j * EPS * f1
        oracle = SpectralField.from_grid(plus, T)
        assert np.abs(F.component(1).coeffs - oracle.coeffs).max() < 1e-13

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), eps=st.floats(0, 0.05))
    def test_x_to_z_and_conjugate_components(self, seed, eps):
        u = random_x(np.random.default_rng(seed))
        F = eval_F(desk_nonlinearity(), u, eps, 1.0, [1.0])
        assert parity_defect(F, "Z") < 1e-14
        assert np.abs(F.coeffs[1] - F.conj_reflect().coeffs[0]).max() < 1e-15


class TestLinearize:
    def test_eps_zero_is_diagonal(self):
        u = random_x(np.random.default_rng(1))
        lc = linearize(desk_nonlinearity(), u, 0.0)
        assert all(np.abs(c.coeffs).max() == 0 for c in lc.a + lc.b)
        L = full_operator(lc, 0.9, [1.0]).to_dense()
        ells = np.arange(-4, 5)
        j = np.arange(1, 6)
        diag = np.concatenate([np.concatenate([1j * (0.9 * l - j ** 2), 1j * (0.9 * l + j ** 2)]) for l in ells])
        assert np.abs(L - np.diag(diag)).max() < 1e-13

    def test_uxx_only(self):
        u = random_x(np.random.default_rng(2))
        lc = linearize(Nonlinearity([mono(ONE, z2p=1)]), u, EPS)
        assert np.abs(lc.a2.coeffs - SpectralField.from_modes(lc.a2.trunc, {(0, 0): EPS}).coeffs).max() < 1e-16
        others = [lc.a0, lc.a1, lc.b0, lc.b1, lc.b2]
        assert all(np.abs(c.coeffs).max() == 0 for c in others)

    def test_u_times_ux_symbolic(self):
        u = random_x(np.random.default_rng(3))
        lc = linearize(Nonlinearity([mono(ONE, z0p=1, z1p=1)]), u, EPS)
        up = u.component(1)
        assert np.abs((lc.a0 - up.dx(1) * EPS).coeffs).max() < 1e-16
        assert np.abs((lc.a1 - up * EPS).coeffs).max() < 1e-16
        assert all(np.abs(c.coeffs).max() == 0 for c in (lc.a2, lc.b0, lc.b1, lc.b2))

    def test_coefficient_parities(self):
        lc = linearize(desk_nonlinearity(), random_x(np.random.default_rng(4)), EPS)
        assert max(coefficient_parity_defects(lc).values()) < 1e-15

    def test_operator_is_reversible(self):
        lc = linearize(desk_nonlinearity(), random_x(np.random.default_rng(5)), EPS)
        assert classify_reversibility(lc.operator()).tag == "reversible"

    def test_a2_real_valued(self):
        lc = linearize(desk_nonlinearity(), random_x(np.random.default_rng(6)), EPS)
        assert np.abs(lc.a2.grid().imag).max() < 1e-15

    def test_operator_matches_field_action(self):
        rng = np.random.default_rng(7)
        lc = linearize(desk_nonlinearity(), random_x(rng), EPS)
        h = random_x(rng)
        sig = np.array([1, -1]).reshape(2, 1, 1)
        ref = lc.apply(h) + SpectralField(1j * sig * h.dx(2).coeffs, T)
        assert np.abs(lc.operator().apply(h).coeffs - ref.coeffs).max() < 1e-14


class TestDirectionalDerivative:
    def test_eps_zero(self):
        rng = np.random.default_rng(8)
        assert directional_derivative_check(desk_nonlinearity(), random_x(rng), random_x(rng), 0.0) == 0.0

    def test_quadratic_central_difference_exact(self):
        rng = np.random.default_rng(9)
        f = Nonlinearity([mono(SIN), mono(ONE, z2p=1), mono(ONE, z0p=1, z1p=1)])
        d = directional_derivative_check(f, random_x(rng), random_x(rng), EPS, delta=1e-2, extrapolate=False)
        assert d < 1e-13

    def test_cubic_second_order_slope(self):
        rng = np.random.default_rng(10)
        u, h = random_x(rng), random_x(rng)
        deltas = np.array([1e-1, 3e-2, 1e-2])
        defects = [directional_derivative_check(desk_nonlinearity(), u, h, EPS, delta=dl, extrapolate=False) for dl in deltas]
        slope = np.polyfit(np.log(deltas), np.log(defects), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.05)

    def test_generic_below_threshold(self):
        rng = np.random.default_rng(11)
        d = directional_derivative_check(desk_nonlinearity(), random_x(rng), random_x(rng), EPS, delta=1e-4)
        assert d < 1e-8


class TestConfig:
    def test_round_trip(self):
        f = desk_nonlinearity()
        g = Nonlinearity.from_dict(json.loads(json.dumps(f.to_dict())))
        u = random_x(np.random.default_rng(12))
        a = eval_F(f, u, EPS, 1.0, [1.0])
        b = eval_F(g, u, EPS, 1.0, [1.0])
        assert np.abs(a.coeffs - b.coeffs).max() < 1e-15

    def test_term_spec(self):
        c = coeff([{"amp": 2.0, "phi": "cos", "ell": [1], "x": "sin", "k": 2}])
        assert c.mode([1], 2) == pytest.approx(2.0 / 4j)
        assert c.mode([-1], -2) == pytest.approx(-2.0 / 4j)

    def test_unknown_power_key(self):
        with pytest.raises(ValueError):
            Nonlinearity.from_dict({"terms": [{"coefficient": 1.0, "powers": {"z3p": 1}}]})
