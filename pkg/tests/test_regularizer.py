import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from nlskam.collocation import Collocation
from nlskam.exceptions import DegenerateCoefficientError, DiffeoInvalidError
from nlskam.model import Monomial, Nonlinearity, coefficient_from_spec, desk_nonlinearity, linearize
from nlskam.opmatrix import OpMatrix, classify_reversibility, coefficient_matrix, decay_norm
from nlskam.regularizer import (
    GridOperator,
    TorusDiffeo,
    compose_diffeo,
    regularize,
    step1_diag_second_order,
    step2_space_diffeo,
    step3_time_reparam,
    step4_descent,
)
from nlskam.spectral import SpectralField, Truncation, project_parity

T = Truncation(1, 4, 5)
C = Collocation(1, 16, 20)
PHI, X = C.points()
ZERO = np.zeros((2, 2) + C.shape, complex)
EDIAG = np.array([[1.0, 0.0], [0.0, -1.0]]).reshape(2, 2, 1, 1)


def grid_op(c2=None, c1=None, c0=None, lam=1.0, ob=(1.0,)):
    cs = [ZERO.copy() if c is None else np.asarray(c, complex) for c in (c0, c1, c2)]
    return GridOperator(C, cs, lam * np.asarray(ob, float))


def second_order(a2, b2):
    return np.array([[1 + a2, b2], [-np.conj(b2), -(1 + np.conj(a2))]])


def diag_second(a):
    return second_order(a, np.zeros_like(a))


def random_x(rng, scale=0.05, trunc=T):
    c = rng.standard_normal((2,) + trunc.shape) + 1j * rng.standard_normal((2,) + trunc.shape)
    return project_parity(SpectralField(scale * c, trunc), "X")


def mono(spec, **powers):
    keys = ("z0p", "z0m", "z1p", "z1m", "z2p", "z2m")
    return Monomial(coefficient_from_spec(spec, 1), tuple(powers.get(k, 0) for k in keys))


@pytest.fixture(scope="module")
def desk():
    u = random_x(np.random.default_rng(0))
    lc = linearize(desk_nonlinearity(), u, 0.02)
    return lc, regularize(lc, 1.1, [1.0])


class TestStep1:
    def test_b2_zero_diagonal(self):
        a2 = 0.05 * np.cos(X) * (1 + np.cos(PHI))
        res = step1_diag_second_order(grid_op(diag_second(a2)))
        T1 = res.data["T1"]
        assert np.abs(T1[0, 1]).max() == 0 and np.abs(T1[1, 0]).max() == 0
        assert np.abs(res.data["a2_1"] - a2).max() < 1e-15

    @pytest.mark.parametrize("c", [0.1, 0.5, -0.3])
    def test_constant_b2_scalar_formula(self, c):
        res = step1_diag_second_order(grid_op(second_order(np.zeros(C.shape), c + np.zeros(C.shape))))
        assert np.abs(res.data["a2_1"] - (np.sqrt(1 - c ** 2) - 1)).max() < 1e-15

    def test_random_conjugation_diagonal_in_decay_norm(self):
        rng = np.random.default_rng(1)
        t = Truncation(1, 3, 4)
        a2 = np.real(SpectralField(0.03 * rng.standard_normal(t.shape), t).grid(C.shape))
        b2 = SpectralField(0.03 * rng.standard_normal(t.shape), t).grid(C.shape)
        C2 = second_order(a2, b2)
        res = step1_diag_second_order(grid_op(C2))
        T1, T1inv = res.data["T1"], res.data["T1_inv"]
        conj = np.einsum("ab...,bc...,cd...->ad...", T1inv, C2, T1)
        conj[0, 0] = conj[1, 1] = 0
        assert decay_norm(coefficient_matrix(conj, T), 1.0).value < 1e-12
        # the computed diagonal is +-(1 + a2^(1))
        lam1 = 1 + res.data["a2_1"]
        assert np.abs(lam1 ** 2 - ((1 + a2) ** 2 - np.abs(b2) ** 2)).max() < 1e-14

    def test_t1_reversibility_preserving(self):
        rng = np.random.default_rng(2)
        lc = linearize(desk_nonlinearity(), random_x(rng), 0.02)
        op = GridOperator.from_linearization(lc, 1.0, [1.0], Collocation.covering([lc.a[0].trunc], 4))
        res = step1_diag_second_order(op)
        T1 = coefficient_matrix(res.data["T1"], T)
        T1inv = coefficient_matrix(res.data["T1_inv"], T)
        assert classify_reversibility(T1).tag == "reversibility_preserving"
        assert classify_reversibility(T1inv).tag == "reversibility_preserving"

    def test_degenerate(self):
        with pytest.raises(DegenerateCoefficientError):
            step1_diag_second_order(grid_op(second_order(np.zeros(C.shape), 1.2 + np.zeros(C.shape))))


class TestStep2:
    def test_zero(self):
        res = step2_space_diffeo(grid_op(diag_second(np.zeros(C.shape))))
        assert res.data["xi"].w1inf() == 0 and np.abs(res.data["a2_2"]).max() == 0

    def test_constant(self):
        res = step2_space_diffeo(grid_op(diag_second(0.07 + np.zeros(C.shape))))
        assert res.data["xi"].w1inf() < 1e-15
        assert np.abs(res.data["a2_2"] - 0.07).max() < 1e-14

    def test_cos_x_quadrature_oracle(self):
        a = 0.1 * np.cos(X) * (1 + np.cos(PHI))
        res = step2_space_diffeo(grid_op(diag_second(a)))
        phis = PHI[:, 0]
        oracle = []
        for p in phis:
            mean = quad(lambda x: (1 + 0.1 * np.cos(x) * (1 + np.cos(p))) ** -0.5, 0, 2 * np.pi, epsabs=1e-14)[0] / (2 * np.pi)
            oracle.append(mean ** -2 - 1)
        assert np.abs(res.data["a2_2"] - np.array(oracle)).max() < 1e-10
        xi = res.data["xi"].shift_values
        one22 = 1 + res.data["a2_2"][:, None]
        assert np.abs((1 + a) * (1 + np.real(C.dx(xi))) ** 2 - one22).max() < 1e-10
        assert res.defects["x_independence"] < 1e-10

    def test_xi_odd_and_real(self):
        a = 0.1 * np.cos(X) * (1 + np.cos(PHI))
        xi = step2_space_diffeo(grid_op(diag_second(a))).data["xi"].shift
        assert np.abs(xi.coeffs - project_parity(xi, "X").coeffs).max() < 1e-15

    def test_nonpositive_coefficient(self):
        with pytest.raises(DegenerateCoefficientError):
            step2_space_diffeo(grid_op(diag_second(-1.5 + np.zeros(C.shape))))


class TestStep3:
    def test_zero(self):
        res = step3_time_reparam(grid_op(diag_second(np.zeros(C.shape))))
        assert res.m == 1.0 and res.data["alpha"].w1inf() == 0
        assert np.abs(res.data["rho"] - 1).max() == 0

    def test_constant(self):
        res = step3_time_reparam(grid_op(diag_second(0.2 + np.zeros(C.shape))))
        assert res.m == pytest.approx(1.2, abs=1e-15) and res.data["alpha"].w1inf() < 1e-15

    @pytest.mark.parametrize("lam,ob", [(1.0, 1.0), (0.9, 1.3)])
    def test_single_mode(self, lam, ob):
        eps = 0.01
        a = eps * np.cos(PHI)
        res = step3_time_reparam(grid_op(diag_second(a), lam=lam, ob=(ob,)))
        assert res.m == pytest.approx(1.0, abs=1e-15)
        alpha = res.data["alpha"].shift_values
        assert np.abs(alpha - eps * np.sin(PHI) / (lam * ob)).max() < 1e-15
        assert res.defects["eq_residual"] < 1e-14
        assert res.defects["constant_second_order"] < 1e-12

    def test_rho_definition(self):
        eps, lam = 0.02, 1.1
        res = step3_time_reparam(grid_op(diag_second(eps * np.cos(PHI)), lam=lam))
        g = res.data["alpha"]
        theta = PHI[:, 0]
        # phi = theta + omega alpha_hat(theta), rho = 1 + omega alpha'(phi)
        phi = theta + lam * g.inverse_values[:, 0]
        want = 1 + eps * np.cos(phi)
        assert np.abs(res.data["rho"][:, 0] - want).max() < 1e-13


class TestStep4:
    def test_zero(self):
        res = step4_descent(grid_op(diag_second(np.zeros(C.shape))), 1.0)
        assert np.abs(res.data["s"]).max() == 0 and np.abs(res.data["z"]).max() == 0

    @pytest.mark.parametrize("c", [0.1, -0.04])
    def test_sine(self, c):
        C1 = ZERO.copy()
        C1[0, 0] = c * np.sin(X)
        C1[1, 1] = -c * np.sin(X)
        res = step4_descent(grid_op(diag_second(np.zeros(C.shape)), C1), 1.0)
        s = res.data["s"]
        assert np.abs(s.real - c / 2 * np.cos(X)).max() < 1e-15
        assert np.abs(s.imag).max() < 1e-15

    def test_random_a1_residual(self):
        rng = np.random.default_rng(3)
        a1 = random_x(rng, 0.05, Truncation(1, 3, 4)).component(1)
        v = a1.grid(C.shape)
        C1 = ZERO.copy()
        C1[0, 0], C1[1, 1] = v, -np.conj(v)
        m = 1.03
        res = step4_descent(grid_op(m * EDIAG + ZERO, C1), m)
        z = res.data["z"]
        a1_4 = 2 * m * C.dx(z) / (1 + z) + v
        assert np.abs(a1_4).max() < 1e-10
        assert res.defects["a1_residual"] < 1e-10

    def test_s_is_y_parity(self):
        rng = np.random.default_rng(4)
        a1 = random_x(rng, 0.05, Truncation(1, 3, 4)).component(1)
        v = a1.grid(C.shape)
        C1 = ZERO.copy()
        C1[0, 0], C1[1, 1] = v, -np.conj(v)
        s = C.field(step4_descent(grid_op(EDIAG + ZERO, C1), 1.0).data["s"])
        assert np.abs(s.coeffs - project_parity(s, "Y").coeffs).max() < 1e-15


class TestDiffeo:
    def test_zero_identity(self):
        g = TorusDiffeo.build("space", np.zeros(C.shape), C)
        f = SpectralField.from_modes(T, {(1, 2): 1.0, (-2, -3): 0.5j})
        assert np.abs(compose_diffeo(g, f, trunc=T).coeffs - f.coeffs).max() < 1e-15

    @pytest.mark.parametrize("k", [1, -3, 4])
    def test_constant_shift_phase(self, k):
        c = 0.3
        g = TorusDiffeo.build("space", c + np.zeros(C.shape), C)
        f = SpectralField.from_modes(T, {(0, k): 1.0})
        out = compose_diffeo(g, f, trunc=T)
        assert out.mode([0], k) == pytest.approx(np.exp(1j * k * c), abs=1e-14)
        assert np.abs(out.coeffs).sum() == pytest.approx(1.0, abs=1e-13)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000), amp=st.floats(0.0, 0.15))
    def test_roundtrip_space(self, seed, amp):
        rng = np.random.default_rng(seed)
        t = Truncation(1, 2, 3)
        xi = project_parity(SpectralField(rng.standard_normal(t.shape) + 0j, t), "X")
        vals = np.real(xi.grid(C.shape))
        vals *= amp / max(np.abs(vals).max(), 1e-300)
        g = TorusDiffeo.build("space", vals, C)
        f = SpectralField(rng.standard_normal(T.shape) + 1j * rng.standard_normal(T.shape), T)
        h = C.values(f)
        assert g.roundtrip_defect(h) < 1e-9
        assert _sup_inverse_identity(g) < 1e-12

    def test_roundtrip_time(self):
        # the composed field must be resolved in phi, hence the finer grid
        c = Collocation(1, 32, 8)
        phi, x = c.points()
        alpha = 0.05 * np.sin(phi) + 0.02 * np.sin(2 * phi)
        g = TorusDiffeo.build("time", alpha, c, omega=(1.2,))
        h = np.cos(phi + 2 * x) + 1j * np.sin(3 * phi - x)
        assert g.roundtrip_defect(h) < 1e-9

    def test_invalid(self):
        with pytest.raises(DiffeoInvalidError):
            TorusDiffeo.build("space", 0.8 * np.sin(X), C)


def _sup_inverse_identity(g):
    # xi_hat(y) + xi(y + xi_hat(y)) = 0
    xi, xh = g.shift_values, g.inverse_values
    return np.abs(xh + np.real(C.shift_x(xi, xh))).max()


class TestRegularize:
    def test_eps_zero_identity(self):
        lc = linearize(desk_nonlinearity(), random_x(np.random.default_rng(5)), 0.0)
        r = regularize(lc, 1.0, [1.0])
        t = Truncation(1, 2, 3)
        for V in (r.V1, r.V2):
            M = V.matrix(t).as_dense().dense
            assert np.abs(M - np.eye(M.shape[0])).max() < 1e-13
        assert r.m == 1.0
        L = lc.operator()
        assert np.abs(r.L4.as_dense().dense - L.as_dense().dense).max() < 1e-13

    def test_quasilinear_t1_identity(self):
        u = random_x(np.random.default_rng(6))
        f = Nonlinearity([mono([{"amp": 1.0, "x": "sin", "k": 1}]), mono([{"amp": 1.0}], z2p=1)])
        r = regularize(linearize(f, u, 0.01), 1.0, [1.0])
        T1 = r.steps[0].data["T1"]
        assert np.abs(T1 - np.eye(2).reshape(2, 2, 1, 1)).max() < 1e-15
        assert r.m == pytest.approx(1.01, abs=1e-14)
        assert r.residual < 1e-8

    def test_desk_residual(self, desk):
        _, r = desk
        assert r.residual < 1e-8

    def test_structure(self, desk):
        _, r = desk
        C0, C1, C2 = r.grid_operator.coeffs
        assert np.abs(C2 - r.m * EDIAG).max() == 0
        assert max(np.abs(C1[0, 0]).max(), np.abs(C1[1, 1]).max()) < 1e-12
        assert np.abs(C1[1, 0] + np.conj(C1[0, 1])).max() < 1e-14
        assert np.abs(C0[1, 0] + np.conj(C0[0, 1])).max() < 1e-14
        assert np.abs(C0[1, 1] + np.conj(C0[0, 0])).max() < 1e-14

    def test_l4_reversible(self, desk):
        _, r = desk
        assert classify_reversibility(r.L4, rtol=1e-10).tag == "reversible"

    def test_transforms_reversibility_preserving(self, desk):
        _, r = desk
        t = Truncation(1, 2, 3)
        for inverse in (False, True):
            assert classify_reversibility(r.V2.matrix(t, inverse=inverse), rtol=1e-10).tag == "reversibility_preserving"
        for step in r.V1.steps:
            from nlskam.regularizer import TransformChain
            M = TransformChain(r.V1.colloc, [step]).matrix(t)
            assert classify_reversibility(M, rtol=1e-10).tag == "reversibility_preserving", step.name

    def test_m_close_to_one(self, desk):
        lc, r = desk
        assert isinstance(r.m, float)
        assert abs(r.m - 1) <= 5 * lc.eps

    def test_transformation_bound_scales_with_eps(self):
        u = random_x(np.random.default_rng(7))
        h = random_x(np.random.default_rng(8))
        out = []
        for eps in (0.005, 0.01):
            r = regularize(linearize(desk_nonlinearity(), u, eps), 1.0, [1.0], test_modes=0)
            out.append(np.abs(r.V2.apply(h).coeffs - h.coeffs).max())
        assert out[1] / out[0] == pytest.approx(2.0, rel=0.05)

    def test_inverse_chain(self, desk):
        _, r = desk
        h = random_x(np.random.default_rng(9), 1.0, Truncation(1, 2, 3))
        v = r.V1.colloc.values(h)
        back = r.V1.apply_values(r.V1.apply_values(v), inverse=True)
        assert np.abs(back - v).max() < 1e-10

    def test_dump(self, desk, tmp_path):
        _, r = desk
        path = tmp_path / "steps.json"
        r.dump(path)
        obj = json.loads(path.read_text())
        assert [s["step"] for s in obj["steps"]] == ["diag_second_order", "space_diffeo", "time_reparam", "descent"]
        assert set(obj["steps"][0]) == {"step", "defect_norms", "diffeo_sup_norms", "m"}

    def test_remainder_has_no_second_order(self, desk):
        _, r = desk
        R = r.remainder()
        # no d_xx growth: the remainder acts like a first-order operator
        assert decay_norm(R, 0.0).value < 10 * r.trunc.nx * 0.1

    @settings(max_examples=5, deadline=None)
    @given(seed=st.integers(0, 10_000), eps=st.floats(0.0, 0.03))
    def test_residual_property(self, seed, eps):
        u = random_x(np.random.default_rng(seed), trunc=Truncation(1, 2, 3))
        r = regularize(linearize(desk_nonlinearity(), u, eps), 1.0, [1.0])
        assert r.residual < 1e-8
