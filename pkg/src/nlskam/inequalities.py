"""Randomized checks of the norm inequalities used by the iteration.

Every suite draws random inputs, evaluates the left-hand side and the terms
of the right-hand side, and reports ``lhs / rhs`` with the calibrated
constants of :mod:`nlskam.constants`.  :func:`calibrate` measures the
constants on a corpus; :func:`verify_norms` checks a fresh corpus against
the frozen values.

Suites
------
interpolation
    ``|AB|_s <= C(s)|A|_{s0}|B|_s + C(s0)|A|_s|B|_{s0}`` (decay norms).
operator_field
    ``||Ah||_s <= C(s)(|A|_{s0}||h||_s + |A|_s||h||_{s0})``.
tame_product
    ``||uv||_s <= C(s0)||u||_s||v||_{s0} + C(s)||u||_{s0}||v||_s``.
change_a/b/c
    Composition with ``x -> x + p(x)``, ``|p|_{1,inf} <= 1/2``, on the circle:
    ``||u o f||_s``, ``||u o f - u||_s`` and the Lipschitz-weighted version.
composition
    ``Q = Q1 Q2`` with ``Q_i h = <D>^{t_i}((1 + u) h)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import constants as K
from .opmatrix import OpMatrix, decay_norm
from .spectral import SpectralField, Truncation, multiply, sobolev_norm

S0_TORUS = 1.5  # (d + 2) / 2 with d = 1
S0_CIRCLE = 1.0
TORUS_S = (1.5, 2.0, 2.5, 3.0, 4.0)
CIRCLE_S = (1, 2, 3, 4)


# ---------------------------------------------------------------------------
# random inputs
# ---------------------------------------------------------------------------

def _decay_profile(rng, size):
    """Random envelope: smooth, flat or concentrated at one offset."""
    kind = rng.integers(3)
    if kind == 0:
        return np.exp(-rng.uniform(0.2, 1.5) * size)
    if kind == 1:
        return (1.0 + size) ** -rng.uniform(2.5, 5.0)
    peak = rng.integers(0, int(size.max()) + 1)
    return np.where(size == peak, 1.0, 0.05 * np.exp(-size))


def random_toeplitz(rng, trunc, lmax):
    J = trunc.nx
    shape = (2 * lmax + 1,) * trunc.d + (2 * J, 2 * J)
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    ell = np.abs(np.arange(-lmax, lmax + 1))[:, None, None]
    j = np.tile(np.arange(1, J + 1), 2)
    off = np.abs(j[:, None] - j[None, :])[None]
    env = _decay_profile(rng, np.maximum(ell, off).astype(float))
    return OpMatrix(trunc, "sine", slabs=rng.uniform(0.1, 10) * c * env)


def random_field(rng, trunc):
    c = rng.standard_normal(trunc.shape) + 1j * rng.standard_normal(trunc.shape)
    ell, k = trunc.mesh()
    env = _decay_profile(rng, np.maximum(np.abs(ell), np.abs(k)).astype(float))
    return SpectralField(rng.uniform(0.1, 10) * c * env, trunc)


def random_circle(rng, n, real=False):
    """Coefficients ``k = -n..n`` of a function on the circle."""
    k = np.arange(-n, n + 1)
    c = rng.standard_normal(k.size) + 1j * rng.standard_normal(k.size)
    c = c * _decay_profile(rng, np.abs(k).astype(float))
    if real:
        c = 0.5 * (c + np.conj(c[::-1]))
    return c


# ---------------------------------------------------------------------------
# norms on the circle
# ---------------------------------------------------------------------------

def circle_norm(c, s):
    n = (c.shape[-1] - 1) // 2
    w = np.maximum(np.abs(np.arange(-n, n + 1)), 1.0) ** s
    return float(np.sqrt(np.sum(np.abs(c * w) ** 2)))


def circle_values(c, x):
    n = (c.shape[-1] - 1) // 2
    return np.exp(1j * np.outer(x, np.arange(-n, n + 1))) @ c


def winf_norm(c, s, grid=512, start=0):
    """``sum_{start <= a <= s} |D^a u|_inf`` on a fine grid."""
    n = (c.shape[-1] - 1) // 2
    k = np.arange(-n, n + 1)
    x = 2 * np.pi * np.arange(grid) / grid
    return float(sum(np.abs(circle_values(c * (1j * k) ** a, x)).max() for a in range(start, int(s) + 1)))


def compose_circle(u, p, grid=512, n_out=None):
    """Coefficients of ``u(x + p(x))`` (``p`` real) up to ``|k| <= n_out``."""
    x = 2 * np.pi * np.arange(grid) / grid
    shift = circle_values(p, x).real
    vals = circle_values(u, x + shift)
    full = np.fft.fftshift(np.fft.fft(vals)) / grid
    n_out = n_out or grid // 4
    mid = grid // 2
    return full[mid - n_out : mid + n_out + 1]


def _scale_w1(rng, p, lo=0.05, hi=0.5):
    """Rescale ``p`` so that ``|p|_{1,inf}`` is uniform in ``[lo, hi]``."""
    return p * (rng.uniform(lo, hi) / winf_norm(p, 1))


def _bracket_power(c, t):
    n = (c.shape[-1] - 1) // 2
    return c * np.maximum(np.abs(np.arange(-n, n + 1)), 1.0) ** t


def _times_one_plus(u, h):
    prod = np.convolve(u, h)
    nu, nh = (u.size - 1) // 2, (h.size - 1) // 2
    out = prod.copy()
    # h embedded at the centre of the longer product
    out[nu : nu + h.size] += h
    return out


# ---------------------------------------------------------------------------
# suites: each case returns lhs (S,) and the right-hand terms (S, 2)
# ---------------------------------------------------------------------------

def _case_interpolation(rng):
    t = Truncation(1, 3, 5)
    A = random_toeplitz(rng, t, int(rng.integers(1, 4)))
    B = random_toeplitz(rng, t, int(rng.integers(1, 4)))
    AB = A.matmul(B, lkeep=A.lmax + B.lmax)
    a0, b0 = decay_norm(A, S0_TORUS).value, decay_norm(B, S0_TORUS).value
    lhs, terms = [], []
    for s in TORUS_S:
        lhs.append(decay_norm(AB, s).value)
        terms.append((a0 * decay_norm(B, s).value, decay_norm(A, s).value * b0))
    return np.array(lhs), np.array(terms)


def _case_operator_field(rng):
    t = Truncation(1, 3, 5)
    A = random_toeplitz(rng, t, int(rng.integers(1, 4)))
    shape = (2 * t.nphi + 1,) * t.d + (2 * t.nx,)
    vec = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    ell = np.abs(np.arange(-t.nphi, t.nphi + 1))[:, None]
    j = np.tile(np.arange(1, t.nx + 1), 2)[None, :]
    vec = vec * _decay_profile(rng, np.maximum(ell, j).astype(float))
    h = A.vector_field(vec)
    Ah = A.vector_field(A.apply_vector(vec))
    h0 = sobolev_norm(h, S0_TORUS)
    a0 = decay_norm(A, S0_TORUS).value
    lhs, terms = [], []
    for s in TORUS_S:
        lhs.append(sobolev_norm(Ah, s))
        terms.append((a0 * sobolev_norm(h, s), decay_norm(A, s).value * h0))
    return np.array(lhs), np.array(terms)


def _case_tame_product(rng):
    t = Truncation(1, 5, 5)
    u, v = random_field(rng, t), random_field(rng, t)
    uv = multiply(u, v, Truncation(1, 10, 10))
    u0, v0 = sobolev_norm(u, S0_TORUS), sobolev_norm(v, S0_TORUS)
    lhs, terms = [], []
    for s in TORUS_S:
        lhs.append(sobolev_norm(uv, s))
        # C(s0) multiplies the first term, C(s) the second
        terms.append((sobolev_norm(u, s) * v0, u0 * sobolev_norm(v, s)))
    return np.array(lhs), np.array(terms)


def _circle_pair(rng):
    u = random_circle(rng, 12)
    p = _scale_w1(rng, random_circle(rng, 4, real=True))
    return u, p


def _case_change_a(rng):
    u, p = _circle_pair(rng)
    uf = compose_circle(u, p)
    lhs, terms = [], []
    for s in CIRCLE_S:
        lhs.append(circle_norm(uf, s))
        terms.append((circle_norm(u, s), winf_norm(p, s, start=1) * circle_norm(u, 1)))
    return np.array(lhs), np.array(terms)


def _case_change_b(rng):
    u, p = _circle_pair(rng)
    n = (compose_circle(u, p).size - 1) // 2
    diff = compose_circle(u, p) - np.pad(u, n - 12)
    pinf = winf_norm(p, 0)
    lhs, terms = [], []
    for s in CIRCLE_S:
        lhs.append(circle_norm(diff, s))
        terms.append((pinf * circle_norm(u, s + 1), winf_norm(p, s) * circle_norm(u, 2)))
    return np.array(lhs), np.array(terms)


def _lip(vals, lams):
    out = 0.0
    for a in range(len(lams)):
        for b in range(a + 1, len(lams)):
            out = max(out, vals[a][b] / abs(lams[a] - lams[b]))
    return out


def _case_change_c(rng):
    lams = np.array([0.0, 0.5, 1.0])
    u0, u1 = random_circle(rng, 12), random_circle(rng, 12)
    p0 = random_circle(rng, 4, real=True)
    p1 = random_circle(rng, 4, real=True)
    scale = rng.uniform(0.05, 0.5) / max(winf_norm(p0 + lam * p1, 1) for lam in lams)
    p0, p1 = p0 * scale, p1 * scale
    gamma = rng.uniform(0.01, 1.0)
    us = [u0 + lam * u1 for lam in lams]
    ps = [p0 + lam * p1 for lam in lams]
    ufs = [compose_circle(u, p) for u, p in zip(us, ps)]

    def wnorm(fam, norm):
        sup = max(norm(f) for f in fam)
        diffs = [[norm(fam[a] - fam[b]) if a != b else 0.0 for b in range(3)] for a in range(3)]
        return sup + gamma * _lip(diffs, lams)

    lhs, terms = [], []
    for s in CIRCLE_S:
        lhs.append(wnorm(ufs, lambda c: circle_norm(c, s)))
        terms.append((wnorm(us, lambda c: circle_norm(c, s + 1)),
                      wnorm(ps, lambda c: winf_norm(c, s)) * wnorm(us, lambda c: circle_norm(c, 2))))
    return np.array(lhs), np.array(terms)


def _case_composition(rng):
    t1, t2 = (int(x) for x in rng.integers(0, 3, 2))
    tau, mu = max(t1, t2), max(t1, t2)
    u = random_circle(rng, 6)
    u = u * (rng.uniform(0.05, 1.0) / circle_norm(u, S0_CIRCLE + tau + mu))
    h = random_circle(rng, 12)
    q2 = _bracket_power(_times_one_plus(u, h), t2)
    qh = _bracket_power(_times_one_plus(u, q2), t1)
    pad = (qh.size - h.size) // 2
    hp = np.pad(h, pad)
    lhs, terms = [], []
    for s in CIRCLE_S:
        lhs.append(circle_norm(qh, s))
        terms.append((circle_norm(hp, s + t1 + t2),
                      circle_norm(u, s + tau + mu) * circle_norm(hp, S0_CIRCLE + t1 + t2)))
    return np.array(lhs), np.array(terms)


SUITES = {
    "interpolation": ("|AB|_s", _case_interpolation, TORUS_S, "asym_first"),
    "operator_field": ("||Ah||_s", _case_operator_field, TORUS_S, "single"),
    "tame_product": ("||uv||_s", _case_tame_product, TORUS_S, "asym_second"),
    "change_a": ("||u o f||_s", _case_change_a, CIRCLE_S, "single"),
    "change_b": ("||u o f - u||_s", _case_change_b, CIRCLE_S, "single"),
    "change_c": ("lip ||u o f||_s", _case_change_c, CIRCLE_S, "single"),
    "composition": ("|Q1 Q2 h|_s", _case_composition, CIRCLE_S, "single"),
}


def _stream(name):
    """Fixed RNG stream per suite, independent of which suites run."""
    return list(SUITES).index(name)


def _rhs(kind, table, s_values, terms):
    """Right-hand side with constants; ``terms`` has shape (n, S, 2)."""
    c = np.array([K.constant(table, s) for s in s_values])
    if kind == "single":
        return c * (terms[..., 0] + terms[..., 1])
    c0 = K.constant(table, s_values[0])
    if kind == "asym_first":  # C(s) first term, C(s0) second
        return c * terms[..., 0] + c0 * terms[..., 1]
    return c0 * terms[..., 0] + c * terms[..., 1]


def _draw(name, rng, count):
    _, case, _, _ = SUITES[name]
    lhs, terms = zip(*(case(rng) for _ in range(count)))
    return np.array(lhs), np.array(terms)


@dataclass
class SuiteResult:
    name: str
    label: str
    s_values: tuple
    ratios: np.ndarray

    @property
    def worst(self):
        return dict(zip(self.s_values, self.ratios.max(axis=0).tolist()))

    @property
    def violations(self):
        return int(np.sum(self.ratios > 1.0))

    @property
    def passed(self):
        return self.violations == 0


@dataclass
class NormReport:
    seed: int
    count: int
    suites: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.suites)

    def rows(self):
        return [{"suite": r.name, "inequality": r.label, "cases": self.count, "worst_ratio": float(r.ratios.max()),
                 "violations": r.violations, "passed": r.passed} for r in self.suites]


def verify_norms(seed=0, count=1000, suites=None) -> NormReport:
    """Check ``count`` random cases per suite against the calibrated constants."""
    report = NormReport(int(seed), int(count))
    for name in suites or SUITES:
        label, _, s_values, kind = SUITES[name]
        rng = np.random.default_rng([int(seed), _stream(name)])
        lhs, terms = _draw(name, rng, count)
        ratios = lhs / _rhs(kind, K.TABLES[name], s_values, terms)
        report.suites.append(SuiteResult(name, label, s_values, ratios))
    return report


def calibrate(seed=K.CALIBRATION_SEED, count=2000, margin=K.SAFETY_MARGIN, suites=None):
    """Worst-case constants on a corpus, multiplied by ``margin``.

    For the asymmetric forms ``C(s0)`` is fixed first (both terms coincide at
    ``s = s0``) and ``C(s)`` is the smallest value covering the remainder.
    """
    out = {}
    for name in suites or SUITES:
        _, _, s_values, kind = SUITES[name]
        rng = np.random.default_rng([int(seed), _stream(name)])
        lhs, terms = _draw(name, rng, count)
        if kind == "single":
            worst = (lhs / (terms[..., 0] + terms[..., 1])).max(axis=0)
            out[name] = {s: float(margin * w) for s, w in zip(s_values, worst)}
            continue
        c0 = margin * float((lhs[:, 0] / (terms[:, 0, 0] + terms[:, 0, 1])).max())
        main, other = (0, 1) if kind == "asym_first" else (1, 0)
        table = {s_values[0]: c0}
        for k, s in enumerate(s_values[1:], start=1):
            need = ((lhs[:, k] - c0 * terms[:, k, other]) / terms[:, k, main]).max()
            table[s] = float(max(c0, margin * need))
        out[name] = table
    return out


def identity_ratios(s_values=TORUS_S):
    """``|I I|_s / (C(s)|I|_{s0}|I|_s + C(s0)|I|_s|I|_{s0})`` for each ``s``."""
    t = Truncation(1, 2, 4)
    one = OpMatrix.identity(t)
    lhs = np.array([[decay_norm(one.matmul(one), s).value for s in s_values]])
    terms = np.array([[[decay_norm(one, S0_TORUS).value * decay_norm(one, s).value] * 2 for s in s_values]])
    return (lhs / _rhs("asym_first", K.TABLES["interpolation"], s_values, terms))[0]


__all__ = [
    "NormReport",
    "SUITES",
    "SuiteResult",
    "calibrate",
    "circle_norm",
    "compose_circle",
    "identity_ratios",
    "verify_norms",
    "winf_norm",
]
