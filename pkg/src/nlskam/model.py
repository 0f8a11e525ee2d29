"""Polynomial nonlinearities and the doubled NLS field.

A nonlinearity is a finite sum of monomials

    c(phi, x) * z0^p0 * conj(z0)^q0 * z1^p1 * conj(z1)^q1 * z2^p2 * conj(z2)^q2

with ``z0 = u``, ``z1 = u_x``, ``z2 = u_xx`` and ``c`` a trigonometric
polynomial.  On doubled fields ``u = (u+, u-)`` the conjugated arguments are
replaced by the ``-`` component, which gives the holomorphic extension ``f1``;
``f2`` swaps the exponent pairs and conjugates the coefficient, so that on the
subspace ``u- = conj(u+)`` one has ``f2 = conj(f1)``.

The doubled field is

    F+(u) = omega.d_phi u+ + i (u+_xx + eps f1(u))
    F-(u) = omega.d_phi u- - i (u-_xx + eps f2(u)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .opmatrix import OpMatrix, coefficient_matrix
from .spectral import (
    SpectralField,
    Truncation,
    conj_reflect,
    multiply,
    project_parity,
    sobolev_norm,
)

POWER_KEYS = ("z0p", "z0m", "z1p", "z1m", "z2p", "z2m")


@dataclass(frozen=True)
class Monomial:
    """``coeff * prod z_i^{p_i} conj(z_i)^{q_i}``.

    ``powers`` is ordered as :data:`POWER_KEYS`: ``(p0, q0, p1, q1, p2, q2)``.
    """

    coeff: SpectralField
    powers: tuple

    def __post_init__(self):
        p = tuple(int(v) for v in self.powers)
        if len(p) != 6 or min(p) < 0:
            raise ValueError("powers must be six non-negative integers")
        if self.coeff.doubled:
            raise ValueError("monomial coefficients are scalar fields")
        object.__setattr__(self, "powers", p)

    @property
    def degree(self):
        return sum(self.powers)

    def swapped(self):
        """Monomial of ``f2``: exponents of each pair exchanged, coefficient conjugated."""
        p = self.powers
        return Monomial(self.coeff.conj_reflect(), (p[1], p[0], p[3], p[2], p[5], p[4]))

    def derivative(self, slot):
        """Holomorphic derivative in argument ``slot`` (index into POWER_KEYS)."""
        p = list(self.powers)
        if p[slot] == 0:
            return None
        n = p[slot]
        p[slot] -= 1
        return Monomial(self.coeff * float(n), tuple(p))

    def as_dict(self):
        return {"coefficient": coefficient_to_spec(self.coeff), "powers": dict(zip(POWER_KEYS, self.powers))}


@dataclass(frozen=True)
class Nonlinearity:
    terms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        ds = {t.coeff.trunc.d for t in self.terms}
        if len(ds) > 1:
            raise ValueError("monomials live on tori of different dimension")

    @property
    def d(self):
        return self.terms[0].coeff.trunc.d if self.terms else None

    @property
    def degree(self):
        return max((t.degree for t in self.terms), default=0)

    def combined(self):
        """Monomials with equal powers merged into one."""
        groups = {}
        for t in self.terms:
            groups[t.powers] = groups[t.powers] + t.coeff if t.powers in groups else t.coeff
        return Nonlinearity(tuple(Monomial(c, p) for p, c in groups.items()))

    def swapped(self):
        return Nonlinearity(tuple(t.swapped() for t in self.terms))

    def derivative(self, slot):
        return Nonlinearity(tuple(m for m in (t.derivative(slot) for t in self.terms) if m is not None))

    def to_dict(self):
        return {"terms": [t.as_dict() for t in self.terms]}

    @classmethod
    def from_dict(cls, obj, d=1):
        terms = []
        for item in obj["terms"]:
            powers = item.get("powers", {})
            unknown = set(powers) - set(POWER_KEYS)
            if unknown:
                raise ValueError(f"unknown power keys {sorted(unknown)}")
            p = tuple(int(powers.get(k, 0)) for k in POWER_KEYS)
            terms.append(Monomial(coefficient_from_spec(item["coefficient"], d), p))
        return cls(tuple(terms))


# ---------------------------------------------------------------------------
# coefficient specs
# ---------------------------------------------------------------------------

def _trig(kind, arg):
    if kind == "cos":
        return np.cos(arg)
    if kind == "sin":
        return np.sin(arg)
    if kind == "exp":
        return np.exp(1j * arg)
    raise ValueError(f"unknown trigonometric kind {kind!r}")


def coefficient_from_spec(spec, d=1):
    """Build a coefficient field from a config spec.

    Two forms are accepted:

    * a list of product terms ``{"amp": a, "phi": "cos", "ell": [1], "x": "sin", "k": 1}``,
      meaning ``a * cos(ell.phi) * sin(k x)``; missing factors are 1 and a
      complex amplitude is written ``[re, im]``;
    * ``{"modes": [[l_1, ..., l_d, k, re, im], ...]}`` of exponential coefficients.
    """
    if isinstance(spec, (int, float)):
        spec = [{"amp": spec}]
    if isinstance(spec, dict) and "modes" in spec:
        rows = spec["modes"]
        nphi = max([max(abs(int(v)) for v in r[:d]) for r in rows] + [0])
        nx = max([abs(int(r[d])) for r in rows] + [0])
        t = Truncation(d, nphi, nx)
        modes = {}
        for r in rows:
            key = tuple(int(v) for v in r[: d + 1])
            modes[key] = modes.get(key, 0) + complex(r[d + 1], r[d + 2])
        return SpectralField.from_modes(t, modes)
    if not isinstance(spec, list):
        raise ValueError("coefficient spec must be a number, a list of terms or {'modes': ...}")
    nphi, nx = 0, 0
    for term in spec:
        ell = term.get("ell", [0] * d)
        if len(ell) != d:
            raise ValueError(f"ell {ell} does not have length {d}")
        nphi = max(nphi, max(abs(int(e)) for e in ell) if "phi" in term else 0)
        nx = max(nx, abs(int(term.get("k", 0))) if "x" in term else 0)
    t = Truncation(d, nphi, nx)

    def func(*pts):
        phis, x = pts[:-1], pts[-1]
        total = np.zeros(x.shape, complex)
        for term in spec:
            amp = term.get("amp", 1.0)
            amp = complex(*amp) if isinstance(amp, (list, tuple)) else complex(amp)
            val = amp * np.ones(x.shape, complex)
            if "phi" in term:
                arg = sum(int(e) * p for e, p in zip(term.get("ell", [0] * d), phis))
                val = val * _trig(term["phi"], arg)
            if "x" in term:
                val = val * _trig(term["x"], int(term.get("k", 0)) * x)
            total += val
        return total

    c = SpectralField.from_function(func, t)
    return SpectralField(np.where(np.abs(c.coeffs) < 1e-15, 0, c.coeffs), t)


def coefficient_to_spec(c: SpectralField):
    rows = []
    for idx in zip(*np.nonzero(c.coeffs)):
        ell = [int(i) - c.trunc.nphi for i in idx[:-1]]
        k = int(idx[-1]) - c.trunc.nx
        v = c.coeffs[idx]
        rows.append(ell + [k, float(v.real), float(v.imag)])
    return {"modes": rows}


def desk_nonlinearity(d=1):
    """Reference nonlinearity satisfying all reversibility hypotheses.

    ``(1 + cos phi) sin x + (1 + cos phi cos x / 2) u_xx + 0.3 cos x conj(u_xx)
    + sin x u_x + 0.5 sin x conj(u_x) + cos phi cos x u + 0.2 conj(u) + |u|^2 u``
    with ``cos phi`` read as ``cos(phi_1)``.
    """
    e1 = [1] + [0] * (d - 1)
    spec = lambda *terms: coefficient_from_spec(list(terms), d)  # noqa: E731
    terms = [
        Monomial(spec({"amp": 1.0, "x": "sin", "k": 1}, {"amp": 1.0, "phi": "cos", "ell": e1, "x": "sin", "k": 1}), (0, 0, 0, 0, 0, 0)),
        Monomial(spec({"amp": 1.0}, {"amp": 0.5, "phi": "cos", "ell": e1, "x": "cos", "k": 1}), (0, 0, 0, 0, 1, 0)),
        Monomial(spec({"amp": 0.3, "x": "cos", "k": 1}), (0, 0, 0, 0, 0, 1)),
        Monomial(spec({"amp": 1.0, "x": "sin", "k": 1}), (0, 0, 1, 0, 0, 0)),
        Monomial(spec({"amp": 0.5, "x": "sin", "k": 1}), (0, 0, 0, 1, 0, 0)),
        Monomial(spec({"amp": 1.0, "phi": "cos", "ell": e1, "x": "cos", "k": 1}), (1, 0, 0, 0, 0, 0)),
        Monomial(spec({"amp": 0.2}), (0, 1, 0, 0, 0, 0)),
        Monomial(spec({"amp": 1.0}), (2, 1, 0, 0, 0, 0)),
    ]
    return Nonlinearity(tuple(terms))


# ---------------------------------------------------------------------------
# hypothesis checks
# ---------------------------------------------------------------------------

@dataclass
class HypothesisReport:
    """Outcome of the reversibility checks, one entry per clause."""

    passed: dict
    violations: dict
    warnings: list

    @property
    def ok(self):
        return all(self.passed.values())


def _odd_even_defect(c: SpectralField):
    """Relative size of the even and odd parts of ``c`` in x."""
    a = c.coeffs
    flip = np.flip(a, axis=-1)
    scale = max(np.abs(a).max(), 1e-300)
    return np.abs(a + flip).max() / scale, np.abs(a - flip).max() / scale


def validate_hypothesis(f: Nonlinearity, tol=1e-12, grid_check=True) -> HypothesisReport:
    """Check the reversibility hypotheses on the monomial representation.

    (i)   ``f(phi, -x, -z0, z1, -z2) = -f(phi, x, z0, z1, z2)``: a monomial of
          total ``z0, z2`` degree ``n`` needs ``c(phi, -x) = (-1)^{n+1} c``.
    (ii)  ``f(-phi, x, z) = conj(f(phi, x, conj z))``: ``c(-phi, x) = conj(c(phi, x))``.
    (iii) ``f(phi, x, 0)`` not identically zero, and the coefficient of the
          linear ``z2`` term real-valued and nonzero.

    A grid evaluation of both symmetries at random arguments backs up the
    symbolic verdict for (i) and (ii).
    """
    g = f.combined()
    violations = {"i": [], "ii": [], "iii": []}
    warnings = []
    for t in g.terms:
        p = t.powers
        n = p[0] + p[1] + p[4] + p[5]
        odd_def, even_def = _odd_even_defect(t.coeff)  # distance from odd / even
        need_odd = n % 2 == 0
        if np.abs(t.coeff.coeffs).max() == 0:
            continue
        if (need_odd and odd_def > tol) or (not need_odd and even_def > tol):
            violations["i"].append({"powers": dict(zip(POWER_KEYS, p)), "needs": "odd" if need_odd else "even"})
        c = t.coeff.coeffs
        # c(-phi, x) has coefficients c[-l, k]; conj(c(phi, x)) has conj(c[-l, -k])
        lhs = np.flip(c, axis=tuple(range(t.coeff.trunc.d)))
        rhs = conj_reflect(c, t.coeff.trunc.d + 1)
        if np.abs(lhs - rhs).max() > tol * max(1.0, np.abs(c).max()):
            violations["ii"].append({"powers": dict(zip(POWER_KEYS, p))})
    const = [t for t in g.terms if t.degree == 0 and np.abs(t.coeff.coeffs).max() > tol]
    if not const:
        violations["iii"].append({"clause": "f(phi, x, 0) vanishes identically"})
    lin = [t for t in g.terms if t.powers == (0, 0, 0, 0, 1, 0)]
    if not lin or np.abs(lin[0].coeff.coeffs).max() <= tol:
        violations["iii"].append({"clause": "d/dz2 f vanishes at z = 0"})
    else:
        vals = lin[0].coeff.grid()
        if np.abs(vals.imag).max() > tol * max(1.0, np.abs(vals).max()):
            violations["iii"].append({"clause": "d/dz2 f is not real", "powers": dict(zip(POWER_KEYS, lin[0].powers))})
        elif vals.real.min() <= 0 <= vals.real.max():
            warnings.append("d/dz2 f at z = 0 changes sign or vanishes on the grid")
    if grid_check and g.terms:
        _grid_symmetry_check(g, violations, tol)
    passed = {k: not v for k, v in violations.items()}
    return HypothesisReport(passed, violations, warnings)


def _eval_scalar(f: Nonlinearity, phis, x, z):
    """Evaluate ``f`` pointwise at complex arguments ``z = (z0, z1, z2)``."""
    total = np.zeros(np.broadcast(x, z[0]).shape, complex)
    for t in f.terms:
        c = _trig_eval(t.coeff, phis, x)
        p = t.powers
        val = c * z[0] ** p[0] * np.conj(z[0]) ** p[1] * z[1] ** p[2] * np.conj(z[1]) ** p[3]
        total += val * z[2] ** p[4] * np.conj(z[2]) ** p[5]
    return total


def _trig_eval(c: SpectralField, phis, x):
    """Evaluate a trigonometric polynomial at scattered points."""
    t = c.trunc
    out = np.zeros(np.shape(x), complex)
    for idx in zip(*np.nonzero(c.coeffs)):
        ell = [int(i) - t.nphi for i in idx[:-1]]
        k = int(idx[-1]) - t.nx
        arg = k * x + sum(e * p for e, p in zip(ell, phis))
        out = out + c.coeffs[idx] * np.exp(1j * arg)
    return out


def _grid_symmetry_check(f, violations, tol, npts=64, seed=0):
    rng = np.random.default_rng(seed)
    d = f.d
    phis = [rng.uniform(0, 2 * np.pi, npts) for _ in range(d)]
    x = rng.uniform(0, 2 * np.pi, npts)
    z = [0.3 * (rng.standard_normal(npts) + 1j * rng.standard_normal(npts)) for _ in range(3)]
    base = _eval_scalar(f, phis, x, z)
    scale = max(1.0, np.abs(base).max())
    refl = _eval_scalar(f, phis, -x, [-z[0], z[1], -z[2]])
    if np.abs(refl + base).max() > 1e3 * tol * scale and not violations["i"]:
        violations["i"].append({"clause": "grid evaluation of the x-reflection symmetry"})
    rev = _eval_scalar(f, [-p for p in phis], x, z)
    conj = np.conj(_eval_scalar(f, phis, x, [np.conj(w) for w in z]))
    if np.abs(rev - conj).max() > 1e3 * tol * scale and not violations["ii"]:
        violations["ii"].append({"clause": "grid evaluation of the time-reversal symmetry"})


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _arguments(u: SpectralField):
    """``[z0+, z0-, z1+, z1-, z2+, z2-]`` as scalar fields."""
    plus, minus = u.component(1), u.component(-1)
    return [plus, minus, plus.dx(1), minus.dx(1), plus.dx(2), minus.dx(2)]


def _power(base, n, cache):
    key = (id(base), n)
    if key not in cache:
        if n == 1:
            cache[key] = base
        else:
            cache[key] = multiply(_power(base, n - 1, cache), base)
    return cache[key]


def eval_polynomial(f: Nonlinearity, args, trunc=None):
    """Evaluate ``sum c prod args_i^{p_i}`` by exact convolution products.

    ``trunc`` crops the final result; without it the full product box is
    returned.
    """
    cache = {}
    total = None
    for t in f.terms:
        term = t.coeff
        for slot, n in enumerate(t.powers):
            if n:
                term = multiply(term, _power(args[slot], n, cache))
        total = term if total is None else total + term
    if total is None:
        base = args[0].trunc
        total = SpectralField.zeros(base)
    return total.retruncate(trunc) if trunc is not None else total


def eval_f_pair(f: Nonlinearity, u: SpectralField, trunc=None):
    """``(f1(u), f2(u))`` as a doubled field."""
    args = _arguments(u)
    trunc = trunc or u.trunc
    f1 = eval_polynomial(f, args, trunc)
    f2 = eval_polynomial(f.swapped(), args, trunc)
    return SpectralField(np.stack([f1.coeffs, f2.coeffs]), trunc)


def linear_part(u: SpectralField, lam, omega_bar):
    """``omega.d_phi u + i E u_xx`` with ``E = diag(1, -1)``."""
    sig = np.array([1.0, -1.0]).reshape((2,) + (1,) * (u.trunc.d + 1))
    c = u.omega_dphi(lam * np.asarray(omega_bar, float)).coeffs + 1j * sig * u.dx(2).coeffs
    return SpectralField(c, u.trunc)


def eval_F(f: Nonlinearity, u: SpectralField, eps, lam, omega_bar, trunc=None):
    """The doubled NLS field ``F(u)``, cropped to ``trunc`` (default ``u.trunc``)."""
    if not u.doubled:
        raise ValueError("eval_F needs a doubled field")
    trunc = trunc or u.trunc
    lin = linear_part(u, lam, omega_bar).retruncate(trunc)
    sig = np.array([1.0, -1.0]).reshape((2,) + (1,) * (trunc.d + 1))
    c = lin.coeffs
    if eps != 0 and f.terms:
        c = c + 1j * eps * sig * eval_f_pair(f, u, trunc).coeffs
    par = "Z" if u.parity == "X" else None
    return SpectralField(c, trunc, par)


# ---------------------------------------------------------------------------
# linearisation
# ---------------------------------------------------------------------------

@dataclass
class LinearizedCoefficients:
    """Coefficients of ``eps d_u f(u) = i sum_k A_k d_x^k``.

    ``a[k] = eps d_{z_k+} f1(u)``, ``b[k] = eps d_{z_k-} f1(u)`` and
    ``A_k = [[a_k, b_k], [-conj(b_k), -conj(a_k)]]``.
    """

    a: list
    b: list
    eps: float
    trunc: Truncation

    @property
    def a2(self):
        return self.a[2]

    @property
    def b2(self):
        return self.b[2]

    @property
    def a1(self):
        return self.a[1]

    @property
    def b1(self):
        return self.b[1]

    @property
    def a0(self):
        return self.a[0]

    @property
    def b0(self):
        return self.b[0]

    def matrix_on_grid(self, k, grid):
        """``A_k`` sampled on a grid, shape ``(2, 2) + grid``."""
        a = self.a[k].grid(grid)
        b = self.b[k].grid(grid)
        return np.array([[a, b], [-np.conj(b), -np.conj(a)]])

    def operator(self, grid=None, lmax=None, basis="sine"):
        """``i (E + A2) d_xx + i A1 d_x + i A0`` as a Toeplitz OpMatrix."""
        t = self.trunc
        grid = grid or _operator_grid(self)
        mats = [self.matrix_on_grid(k, grid) for k in range(3)]
        mats[2] = mats[2] + np.array([[1.0, 0.0], [0.0, -1.0]]).reshape(2, 2, *(1,) * (t.d + 1))
        total = None
        for k in range(3):
            m = coefficient_matrix(1j * mats[k], t, basis, lmax, derivative=k)
            total = m if total is None else total + m
        return total

    def apply(self, h: SpectralField, trunc=None):
        """``i sum_k A_k d_x^k h`` by exact products (no ``E d_xx`` term)."""
        trunc = trunc or h.trunc
        plus = minus = None
        hp, hm = h.component(1), h.component(-1)
        for k in range(3):
            dp, dm = hp.dx(k), hm.dx(k)
            a, b = self.a[k], self.b[k]
            tp = multiply(a, dp) + multiply(b, dm)
            tm = multiply(b.conj_reflect(), dp) + multiply(a.conj_reflect(), dm)
            plus = tp if plus is None else plus + tp
            minus = tm if minus is None else minus + tm
        plus, minus = plus.retruncate(trunc), minus.retruncate(trunc)
        return SpectralField(np.stack([1j * plus.coeffs, -1j * minus.coeffs]), trunc)


def omega_dphi_matrix(trunc, lam, omega_bar, basis="sine"):
    """Dense matrix of ``omega.d_phi`` over the truncation box."""
    J = OpMatrix.identity(trunc, basis).nmodes
    ells = np.array(list(np.ndindex(*((2 * trunc.nphi + 1,) * trunc.d)))) - trunc.nphi
    w = 1j * lam * ells @ np.atleast_1d(np.asarray(omega_bar, float))
    return OpMatrix.from_dense(np.diag(np.repeat(w, 2 * J)), trunc, basis)


def full_operator(lc, lam, omega_bar, basis="sine"):
    """Dense ``L(u) = omega.d_phi + i (E + A2) d_xx + i A1 d_x + i A0``."""
    return omega_dphi_matrix(lc.trunc, lam, omega_bar, basis) + lc.operator(basis=basis).as_dense()


def _operator_grid(lc):
    t = lc.trunc
    nphi = max(c.trunc.nphi for c in lc.a + lc.b)
    nx = max(c.trunc.nx for c in lc.a + lc.b)
    return (2 * max(nphi, 2 * t.nphi) + 2,) * t.d + (2 * (nx + t.nx) + 2,)


def linearize(f: Nonlinearity, u: SpectralField, eps, trunc=None, coeff_trunc=None) -> LinearizedCoefficients:
    """Coefficients ``a_k, b_k`` at ``u``.

    By default the coefficient fields keep their full product box so that
    :meth:`LinearizedCoefficients.apply` is the exact derivative of
    :func:`eval_F` before the final crop.
    """
    if not u.doubled:
        raise ValueError("linearize needs a doubled field")
    args = _arguments(u)
    a, b = [], []
    for k in range(3):
        for slot, out in ((2 * k, a), (2 * k + 1, b)):
            df = f.derivative(slot)
            if eps and df.terms:
                out.append(eval_polynomial(df, args, coeff_trunc) * eps)
            else:
                out.append(SpectralField.zeros(coeff_trunc or u.trunc))
    return LinearizedCoefficients(a, b, eps, trunc or u.trunc)


def directional_derivative_check(f, u, h, eps, lam=1.0, omega_bar=(1.0,), delta=1e-4, extrapolate=True, s=0.0):
    """Defect between the linearisation and a central finite difference.

    The linear part ``omega.d_phi + i E d_xx`` is exact in both and cancels;
    what remains compares ``i sum A_k d_x^k h`` with
    ``(F(u + delta h) - F(u - delta h)) / (2 delta)`` minus the linear part,
    Richardson-extrapolated in ``delta`` when ``extrapolate`` is set.
    """
    if eps == 0:
        return 0.0
    trunc = u.trunc

    def central(dl):
        up = eval_F(f, u + h * dl, eps, lam, omega_bar, trunc)
        um = eval_F(f, u - h * dl, eps, lam, omega_bar, trunc)
        return (up - um) * (1.0 / (2 * dl))

    fd = central(delta)
    if extrapolate:
        half = central(delta / 2)
        fd = SpectralField((4 * half.coeffs - fd.coeffs) / 3, trunc)
    fd = fd - linear_part(h, lam, omega_bar).retruncate(trunc)
    lin = linearize(f, u, eps).apply(h, trunc)
    return sobolev_norm(fd - lin, s)


def coefficient_parity_defects(lc: LinearizedCoefficients, s=0.0):
    """Distance of ``a0, b0, a2, b2`` from Y and of ``a1, b1`` from X."""
    out = {}
    for k, name in ((0, "0"), (1, "1"), (2, "2")):
        target = "X" if k == 1 else "Y"
        for lbl, c in (("a", lc.a[k]), ("b", lc.b[k])):
            out[lbl + name] = sobolev_norm(c - project_parity(c, target), s)
    return out


__all__ = [
    "Monomial",
    "Nonlinearity",
    "HypothesisReport",
    "LinearizedCoefficients",
    "coefficient_from_spec",
    "coefficient_to_spec",
    "desk_nonlinearity",
    "validate_hypothesis",
    "eval_polynomial",
    "eval_f_pair",
    "eval_F",
    "linear_part",
    "linearize",
    "omega_dphi_matrix",
    "full_operator",
    "directional_derivative_check",
    "coefficient_parity_defects",
]
