import numpy as np
import pytest

from nlskam import solver as solver_mod
from nlskam.exceptions import ConfigError, DivergenceError, SmallDivisorError
from nlskam.kam import EigenvalueTable
from nlskam.model import Monomial, Nonlinearity, coefficient_from_spec, desk_nonlinearity, eval_F
from nlskam.solver import (
    Inversion,
    NashMoserConfig,
    apply_diagonal,
    build_pipeline,
    first_melnikov_mask,
    invert_diagonal,
    invert_L,
    nash_moser,
    solution_parity_defect,
)
from nlskam.spectral import ParamGrid, SpectralField, Truncation, parity_defect, project_parity, sobolev_norm

T = Truncation(1, 8, 8)
DESK_LAMBDAS = [1.2247, 1.2361]  # Melnikov margins > 10 at eps -> 0 for Nx <= 16
MU0 = -1j * np.repeat([1.0, -1.0], 8) * np.tile(np.arange(1, 9.0) ** 2, 2)


def smooth(seed, parity, trunc=T, scale=1.0, rate=0.5):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((2,) + trunc.shape) + 1j * rng.standard_normal((2,) + trunc.shape)
    ell = np.abs(np.arange(-trunc.nphi, trunc.nphi + 1))[:, None]
    k = np.abs(np.arange(-trunc.nx, trunc.nx + 1))[None, :]
    return project_parity(SpectralField(scale * c * np.exp(-rate * (ell + k)), trunc), parity)


def linear_model(c=0.1):
    """sin x + c u_xx: the equation is linear in u."""
    spec = lambda *t: coefficient_from_spec(list(t), 1)  # noqa: E731
    return Nonlinearity((Monomial(spec({"amp": 1.0, "x": "sin", "k": 1}), (0, 0, 0, 0, 0, 0)),
                         Monomial(spec({"amp": c}), (0, 0, 0, 0, 1, 0))))


class TestConfig:
    def test_kappas(self):
        cfg = NashMoserConfig(eps=1e-3, mu_loss=2.0, nu_loss=2)
        assert (cfg.kappa1, cfg.kappa2, cfg.kappa3) == (36.0, 72.0, 22.0)
        cfg.mu_loss = 1.0
        assert cfg.kappa1 == 30.0  # derived on access, never stale

    @pytest.mark.parametrize("kw", [{"gamma": 0.5}, {"tau": 0.5}, {"eps": 0.5}, {"n0": 0}])
    def test_invalid(self, kw):
        cfg = NashMoserConfig(**{"eps": 1e-3, **kw})
        with pytest.raises(ConfigError) as info:
            cfg.validate(1)
        assert info.value.problems

    def test_to_dict(self):
        d = NashMoserConfig(eps=1e-3).to_dict()
        assert {"kappa1", "kappa2", "kappa3", "eps", "gamma"} <= set(d)


class TestFirstMelnikov:
    def table(self, samples, modes=np.arange(1, 9)):
        S = len(samples)
        return EigenvalueTable(np.ones(S), np.zeros((2, len(modes), S, 1), complex), modes, samples)

    def test_resonant_lambda(self):
        # lam l = j^2 at (l, j) = (3, 2)
        grid = ParamGrid([4 / 3], 0.1, 2.0, [1.0], 8)
        mask = first_melnikov_mask(self.table([4 / 3]), grid, 0.01, 2.0)
        assert not mask.mask[0]
        w = mask.witness[0]
        assert w["divisor"] < 1e-12 and abs(abs(w["ell"][0]) * 4 / 3 - w["j"] ** 2) < 1e-12

    def test_large_modes_pass(self):
        modes = np.arange(20, 26)
        samples = np.linspace(0.6, 1.4, 9)
        grid = ParamGrid(samples, 0.1, 2.0, [1.0], 2)
        assert first_melnikov_mask(self.table(samples, modes), grid, 0.01, 2.0).mask.all()

    def test_matches_sweep(self):
        samples = np.linspace(0.55, 1.45, 31)
        grid = ParamGrid(samples, 0.1, 2.0, [1.0], 8)
        mask = first_melnikov_mask(self.table(samples), grid, 0.01, 2.0)
        for i, lam in enumerate(samples):
            ok = True
            for l in range(-8, 9):
                for s in (1, -1):
                    for j in range(1, 9):
                        div = abs(1j * lam * l - 1j * s * j * j)
                        ok &= div >= 2 * 0.01 * j * j / max(abs(l), 1) ** 2
            assert mask.mask[i] == ok
        assert mask.mask.any() and not mask.mask.all()


class TestDiagonal:
    def test_single_mode(self):
        g = SpectralField.zeros(T, doubled=True)
        c = g.coeffs.copy()
        c[0, 8 + 2, 8 + 3] = 0.5
        c[0, 8 + 2, 8 - 3] = -0.5
        g = SpectralField(c, T)
        h = invert_diagonal(MU0, g, 1.2247, [1.0])
        expect = 0.5 / (1j * 1.2247 * 2 - 1j * 9)
        assert abs(h.coeffs[0, 10, 11] - expect) < 1e-15

    def test_parity(self):
        g = smooth(0, "Z")
        h = invert_diagonal(MU0, g, 1.2247, [1.0])
        assert parity_defect(h, "X") == 0.0

    def test_forward_residual(self):
        g = smooth(1, "Z")
        h = invert_diagonal(MU0, g, 1.2247, [1.0])
        assert sobolev_norm(apply_diagonal(MU0, h, 1.2247, [1.0]) - g, 1.5) < 1e-12

    def test_small_divisor(self):
        g = smooth(2, "Z")
        with pytest.raises(SmallDivisorError):
            invert_diagonal(MU0, g, 4 / 3, [1.0])


@pytest.fixture(scope="module")
def pipe():
    u = smooth(3, "X", scale=0.05)
    return u, build_pipeline(desk_nonlinearity(), u, 1e-3, DESK_LAMBDAS[0], [1.0], 0.01, 2.0)


class TestInvertL:
    def test_unperturbed_is_diagonal(self):
        u = SpectralField.zeros(T, doubled=True, parity="X")
        pipe = build_pipeline(desk_nonlinearity(), u, 0.0, DESK_LAMBDAS[0], [1.0], 0.01, 2.0)
        g = smooth(4, "Z")
        inv = invert_L(u, g, DESK_LAMBDAS[0], pipe)
        ref = invert_diagonal(MU0, g, DESK_LAMBDAS[0], [1.0])
        assert sobolev_norm(inv.h - ref, 1.5) < 1e-13

    def test_forward_residual(self, pipe):
        u, p = pipe
        for seed in range(3):
            inv = invert_L(u, smooth(10 + seed, "Z"), DESK_LAMBDAS[0], p)
            assert inv.relative <= 1e-6
            assert parity_defect(inv.h, "X") == 0.0

    def test_refinement(self, pipe):
        u, p = pipe
        g = smooth(20, "Z")
        plain = invert_L(u, g, DESK_LAMBDAS[0], p)
        ref = invert_L(u, g, DESK_LAMBDAS[0], p, refine=2)
        assert ref.relative < 1e-3 * plain.relative and ref.refinements == 2

    def test_z_projection_reported(self, pipe):
        u, p = pipe
        g = smooth(21, "Z") + smooth(22, "Y")
        inv = invert_L(u, g, DESK_LAMBDAS[0], p)
        assert inv.discarded > 0

    def test_wrong_u(self, pipe):
        _, p = pipe
        with pytest.raises(ValueError):
            invert_L(smooth(99, "X"), smooth(21, "Z"), DESK_LAMBDAS[0], p)


@pytest.fixture(scope="module")
def desk_newton():
    grid = ParamGrid(DESK_LAMBDAS, 0.1, 2.0, [1.0], 8)
    return nash_moser(NashMoserConfig(eps=1e-2), desk_nonlinearity(), grid, T)


class TestNashMoser:
    def test_unperturbed(self):
        grid = ParamGrid([DESK_LAMBDAS[0]], 0.1, 2.0, [1.0], 8)
        res = nash_moser(NashMoserConfig(eps=0.0), desk_nonlinearity(), grid, T)
        assert res.stop_reason[0] == "converged" and not res.inversions
        assert not res.solutions[0].coeffs.any()

    def test_desk_convergence(self, desk_newton):
        res = desk_newton
        assert not res.empty and res.good.all()
        for k in range(2):
            trace = [r.residual_s0[k] for r in res.records]
            assert trace[-1] <= 1e-8
            floor = 1e-12
            for a, b in zip(trace[:-1], trace[1:]):
                if a > floor:
                    assert b <= a / 10

    def test_solution_is_reversible(self, desk_newton):
        for k, u in desk_newton.solutions.items():
            assert solution_parity_defect(u) == 0.0
            plus, minus = u.component(1), u.component(-1)
            assert np.abs(minus.coeffs - plus.conj_reflect().coeffs).max() == 0.0

    def test_forward_residual_of_solution(self, desk_newton):
        res = desk_newton
        for k, u in res.solutions.items():
            F = eval_F(desk_nonlinearity(), u, 1e-2, DESK_LAMBDAS[k], [1.0])
            assert sobolev_norm(F, 1.5) <= 1e-8

    def test_masks_nested(self, desk_newton):
        hist = desk_newton.good_history
        for a, b in zip(hist[:-1], hist[1:]):
            assert np.all(b <= a)

    def test_update_confinement(self, desk_newton):
        rec = desk_newton.records
        for prev, cur in zip(rec[:-1], rec[1:]):
            for k in cur.u:
                diff = cur.u[k].coeffs - prev.u[k].coeffs
                size = np.maximum(np.abs(T.mesh()[0]), np.abs(T.mesh()[1]))
                assert not diff[:, size > cur.N].any()

    def test_report(self, desk_newton, tmp_path):
        path = tmp_path / "run.json"
        desk_newton.to_json(path)
        import json

        rep = json.loads(path.read_text())
        assert {"N_n", "residual_s0", "residual_high", "surviving_samples", "wall_time"} <= set(rep["iterations"][1])
        assert set(rep["solutions"]) == {"0", "1"}

    def test_linear_model_quadratic(self):
        grid = ParamGrid([DESK_LAMBDAS[0]], 0.1, 2.0, [1.0], 8)
        res = nash_moser(NashMoserConfig(eps=1e-3), linear_model(), grid, T)
        trace = [r.residual_s0[0] for r in res.records]
        assert trace[1] <= max(trace[0] ** 2, 1e-13)
        assert res.stop_reason[0] == "converged"

    def test_empty_good_set(self):
        grid = ParamGrid([1.0], 0.1, 2.0, [1.0], 8)
        res = nash_moser(NashMoserConfig(eps=1e-2), desk_nonlinearity(), grid, T)
        assert res.empty and "dropped" in res.stop_reason[0]

    def test_divergence(self, monkeypatch):
        def bad(u, g, lam, pipe, **kw):
            return Inversion(g * -100.0, 0.0, 0.0, 0.0)

        monkeypatch.setattr(solver_mod, "invert_L", bad)
        grid = ParamGrid([DESK_LAMBDAS[0]], 0.1, 2.0, [1.0], 4)
        with pytest.raises(DivergenceError):
            nash_moser(NashMoserConfig(eps=1e-3), desk_nonlinearity(), grid, Truncation(1, 4, 4))
