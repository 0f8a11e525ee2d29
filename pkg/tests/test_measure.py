import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlskam.kam import EigenvalueTable
from nlskam.measure import (
    INTERVAL_CONSTANT,
    approximate_reducibility,
    cantor_measure_sweep,
    merge_intervals,
    monte_carlo_measure,
    resonance_intervals,
    resonance_triples,
    sample_mask,
    set_chain,
    unperturbed_table,
    union_length,
)
from nlskam.model import desk_nonlinearity, linearize
from nlskam.regularizer import regularize
from nlskam.spectral import ParamGrid, SpectralField, Truncation, project_parity

NX = 8
SAMPLES = np.linspace(0.5, 1.5, 201)
BASE = unperturbed_table(SAMPLES, NX)


def wobble(lam, amp=0.02):
    """mu = -i sigma j^2 (1 + amp sin 3 lam): imaginary, sigma-antisymmetric, smooth in lam."""
    j2 = np.arange(1, NX + 1) ** 2.0
    plus = -1j * j2 * (1 + amp * np.sin(3 * lam))
    return np.concatenate([plus, -plus])


def wobble_table(samples=SAMPLES, amp=0.02):
    r = np.empty((2, NX, samples.size, 1), complex)
    for i, lam in enumerate(samples):
        mu = wobble(lam, amp)
        r[0, :, i, 0] = mu[:NX] + 1j * np.arange(1, NX + 1) ** 2
        r[1, :, i, 0] = mu[NX:] - 1j * np.arange(1, NX + 1) ** 2
    return EigenvalueTable(np.ones(samples.size), r, np.arange(1, NX + 1), samples)


def closed_form(triple, gamma, tau, lo=0.5, hi=1.5):
    """psi = lam l - Delta at eps = 0."""
    (l,), (s, j), hp = triple
    delta = s * j * j if hp is None else s * j * j - hp[0] * hp[1] ** 2
    thr = 2 * gamma * abs(delta) / max(abs(l), 1) ** tau
    a, b = sorted(((delta - thr) / l, (delta + thr) / l))
    a, b = max(a, lo), min(b, hi)
    return [(a, b)] if a < b else []


class TestResonanceIntervals:
    @pytest.mark.parametrize("triple", [((2, ), (1, 1), (-1, 1)), ((5, ), (1, 3), (1, 2)), ((3, ), (1, 2), None),
                                        ((-3, ), (-1, 2), None), ((7, ), (1, 4), (1, 3))])
    def test_closed_form(self, triple):
        rs = resonance_intervals(BASE, triple, 0.05, 2.0, [1.0])
        expect = closed_form(triple, 0.05, 2.0)
        assert len(rs.intervals) == len(expect)
        for (a, b), (c, d) in zip(rs.intervals, expect):
            assert abs(a - c) < 1e-12 and abs(b - d) < 1e-12

    def test_pruned(self):
        rs = resonance_intervals(BASE, ((1, ), (1, 3), (-1, 1)), 0.1, 2.0, [1.0])
        assert rs.empty and rs.pruned

    def test_pruning_sound(self):
        tab = wobble_table()
        lam = np.linspace(0.5, 1.5, 101)
        for tr in resonance_triples(1, 4, tab.modes, include_first=False):
            rs = resonance_intervals(tab, tr, 0.1, 2.0, [1.0])
            if rs.pruned:
                mu = np.array([wobble(x) for x in lam])
                hi = (0 if tr[1][0] > 0 else NX) + tr[1][1] - 1
                lo = (0 if tr[2][0] > 0 else NX) + tr[2][1] - 1
                psi = lam * tr[0][0] + (mu[:, hi] - mu[:, lo]).imag
                assert np.all(np.abs(psi) >= rs.threshold)

    def test_diagonal_triple_empty(self):
        assert resonance_intervals(BASE, ((1, ), (1, 2), (1, 2)), 0.1, 2.0, [1.0]).empty

    def test_endpoints_certified(self):
        tab = wobble_table()
        for tr in [((2, ), (1, 1), (-1, 1)), ((5, ), (1, 3), (1, 2)), ((3, ), (1, 2), None)]:
            rs = resonance_intervals(tab, tr, 0.05, 2.0, [1.0], method="root-bracketing", mu_fn=wobble)
            assert rs.intervals and rs.certified
            for end in np.ravel(rs.intervals):
                if 0.5 < end < 1.5:
                    mu = wobble(end)
                    hi = (0 if tr[1][0] > 0 else NX) + tr[1][1] - 1
                    val = end * tr[0][0] + mu[hi].imag
                    if tr[2] is not None:
                        val -= mu[(0 if tr[2][0] > 0 else NX) + tr[2][1] - 1].imag
                    assert abs(abs(val) - rs.threshold) < 1e-10

    def test_sweep_vs_bracketing(self):
        tab = wobble_table()
        tr = ((2, ), (1, 1), (-1, 1))
        a = resonance_intervals(tab, tr, 0.05, 2.0, [1.0])
        b = resonance_intervals(tab, tr, 0.05, 2.0, [1.0], method="root-bracketing", mu_fn=wobble)
        # piecewise-linear interpolation error on a 5e-3 grid
        assert np.abs(np.array(a.intervals) - np.array(b.intervals)).max() < 1e-4

    def test_flat_psi_warns(self, caplog):
        r = np.zeros((2, NX, SAMPLES.size, 1), complex)
        # Im mu_(+,1) = -lam cancels the lam l slope: psi = 0 on (2, (1,1), (-1,1))
        r[0, 0, :, 0] = 1j * (1 - SAMPLES)
        r[1, 0, :, 0] = -1j * (1 - SAMPLES)
        tab = EigenvalueTable(np.ones(SAMPLES.size), r, np.arange(1, NX + 1), SAMPLES)
        with caplog.at_level(logging.WARNING):
            rs = resonance_intervals(tab, ((2, ), (1, 1), (-1, 1)), 0.5, 2.0, [1.0])
        assert not rs.certified and "unreliable" in caplog.text

    def test_bad_method(self):
        with pytest.raises(ValueError):
            resonance_intervals(BASE, ((1, ), (1, 1), None), 0.1, 2.0, [1.0], method="nope")


class TestUnion:
    def test_merge(self):
        assert merge_intervals([(3, 4), (0, 1), (0.5, 2)]) == [(0, 2), (3, 4)]
        assert union_length([(0, 1), (0.5, 2), (0.5, 1.5)]) == 2.0


class TestSweep:
    def test_analytic_union(self):
        gamma, tau = 0.1, 2.0
        mt = cantor_measure_sweep(BASE, [gamma], tau, [1.0], 6)
        pieces = []
        for tr in resonance_triples(1, 6, BASE.modes):
            (l,), (s, j), hp = tr
            if hp is not None and (hp == (s, j) or abs(s * j * j - hp[0] * hp[1] ** 2) > 8 * abs(l)):
                continue
            pieces += closed_form(tr, gamma, tau)
        assert abs(mt.rows[0].excluded - union_length(pieces)) < 1e-12

    @pytest.mark.parametrize("table", [BASE, wobble_table()], ids=["eps0", "perturbed"])
    def test_fit_exponent(self, table):
        mt = cantor_measure_sweep(table, [0.1, 0.05, 0.025], 2.0, [1.0], 8)
        assert abs(mt.fit_exponent - 1.0) <= 0.2
        for row in mt.rows:
            assert row.max_constant <= INTERVAL_CONSTANT

    def test_tau_shift(self):
        samples = np.linspace(0.51, 1.49, 99)
        tab = unperturbed_table(samples, NX)
        a = cantor_measure_sweep(tab, [1e-3], 2.0, [1.0], 8).rows[0].per_ell
        b = cantor_measure_sweep(tab, [1e-3], 4.0, [1.0], 8).rows[0].per_ell
        assert set(a) == set(b)
        for ell in a:
            assert b[ell] / a[ell] == pytest.approx(max(abs(ell[0]), 1) ** -2.0, rel=1e-9)

    def test_monte_carlo(self):
        tab = wobble_table()
        exact = cantor_measure_sweep(tab, [0.05], 2.0, [1.0], 8).rows[0].excluded
        mc = monte_carlo_measure(tab, 0.05, 2.0, [1.0], 8, count=40000, seed=1)
        assert abs(mc - exact) < 0.02

    def test_csv(self, tmp_path):
        mt = cantor_measure_sweep(BASE, [0.1, 0.05], 2.0, [1.0], 4)
        mt.write_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "gamma,excluded_measure,triple_count,fit_exponent" and len(lines) == 3


class TestMasks:
    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.001, 0.2), st.floats(0.001, 0.2))
    def test_nesting_in_gamma(self, g1, g2):
        tab = wobble_table(np.linspace(0.5, 1.5, 41))
        big, small = max(g1, g2), min(g1, g2)
        assert np.all(sample_mask(tab, big, 2.0, [1.0], 6) <= sample_mask(tab, small, 2.0, [1.0], 6))

    def test_set_chain_monotone(self):
        tab = wobble_table(np.linspace(0.5, 1.5, 41))
        chain = set_chain(tab, 0.02, 2.0, [1.0], [2, 3, 5, 8])
        for a, b in zip(chain.masks[:-1], chain.masks[1:]):
            assert np.all(b <= a)
        for ev in chain.events:
            assert chain.direct[ev["n"]][ev["sample"]] and not chain.masks[ev["n"]][ev["sample"]]


def desk(seed, t, scale=0.05):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((2,) + t.shape) + 1j * rng.standard_normal((2,) + t.shape)
    return project_parity(SpectralField(scale * c, t), "X")


class TestApproximateReducibility:
    t = Truncation(1, 4, 4)
    grid = ParamGrid(np.linspace(0.9, 1.3, 5), 0.1, 2.0, [1.0], 4)

    def regs(self, u, eps):
        lc = linearize(desk_nonlinearity(), u, eps)
        return [regularize(lc, lam, [1.0], test_modes=0) for lam in self.grid.samples]

    def test_same_field(self):
        regs = self.regs(desk(0, self.t), 1e-2)
        rep = approximate_reducibility(regs, regs, self.grid, 0.01, 2.0, 4, 0.005, 1e-2, 0.0)
        assert rep.inclusion and rep.drift == 0.0 and rep.precondition

    def test_unperturbed_masks_identical(self):
        a = self.regs(desk(0, self.t), 0.0)
        b = self.regs(desk(1, self.t), 0.0)
        rep = approximate_reducibility(a, b, self.grid, 0.01, 2.0, 4, 0.005, 0.0, 1.0)
        assert np.array_equal(rep.mask_u, rep.mask_v) and rep.drift == 0.0

    def test_rho_range(self):
        regs = self.regs(desk(0, self.t), 1e-2)
        with pytest.raises(ValueError):
            approximate_reducibility(regs, regs, self.grid, 0.01, 2.0, 4, 0.02, 1e-2, 0.0)
