"""Reduction of the linearised operator to constant second-order coefficients.

The operator is carried in collocation form

    L = omega . d_phi + i (C2 d_xx + C1 d_x + C0)

with ``C_k`` 2x2 matrices of grid functions (index 0 is ``sigma = +1``).
Four changes of variables bring it to

    L4 = omega . d_phi + i (m E d_xx + C1' d_x + C0'),   E = diag(1, -1),

where ``C1'`` is off-diagonal (entry ``q1``) and ``C0'`` has diagonal entry
``q2`` and off-diagonal entry ``q3``.  The maps compose to
``L V2 = V1 L4`` with ``V1 = T1 T2 T3 rho T4`` and ``V2 = T1 T2 T3 T4``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .collocation import Collocation
from .exceptions import DegenerateCoefficientError, DiffeoInvalidError, NlsKamError
from .opmatrix import OpMatrix, basis_modes, coefficient_matrix
from .spectral import SpectralField

E = np.array([[1.0, 0.0], [0.0, -1.0]])


def _mm(a, b):
    return np.einsum("ab...,bc...->ac...", a, b)


def _mv(a, h):
    return np.einsum("ab...,b...->a...", a, h)


def _eye(grid):
    return np.broadcast_to(np.eye(2).reshape((2, 2) + (1,) * len(grid)), (2, 2) + tuple(grid)).astype(complex)


def _const(mat, grid):
    return np.broadcast_to(np.asarray(mat, complex).reshape((2, 2) + (1,) * len(grid)), (2, 2) + tuple(grid)).copy()


def _diag(p, q):
    z = np.zeros_like(p)
    return np.array([[p, z], [z, q]])


def _sup(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


# ---------------------------------------------------------------------------
# operators in collocation form
# ---------------------------------------------------------------------------

@dataclass
class GridOperator:
    """``omega . d_phi + i (C2 d_xx + C1 d_x + C0)`` on a collocation grid.

    ``coeffs[k]`` is ``C_k``, shape ``(2, 2) + grid``.
    """

    colloc: Collocation
    coeffs: list
    omega: np.ndarray

    @classmethod
    def from_linearization(cls, lc, lam, omega_bar, colloc):
        grid = colloc.shape
        C = [lc.matrix_on_grid(k, grid).astype(complex) for k in range(3)]
        C[2] = C[2] + _const(E, grid)
        return cls(colloc, C, lam * np.atleast_1d(np.asarray(omega_bar, float)))

    def apply_values(self, h):
        c = self.colloc
        out = c.omega_dphi(h, self.omega)
        C0, C1, C2 = self.coeffs
        return out + 1j * (_mv(C2, c.dx(h, 2)) + _mv(C1, c.dx(h)) + _mv(C0, h))

    def conjugate(self, M, Minv):
        """Coefficients of ``M^{-1} L M`` for a multiplication by ``M``."""
        c = self.colloc
        C0, C1, C2 = self.coeffs
        Mx, Mxx = c.dx(M), c.dx(M, 2)
        Mt = c.omega_dphi(M, self.omega)
        n2 = _mm(Minv, _mm(C2, M))
        n1 = _mm(Minv, 2 * _mm(C2, Mx) + _mm(C1, M))
        n0 = _mm(Minv, _mm(C2, Mxx) + _mm(C1, Mx) + _mm(C0, M) - 1j * Mt)
        return GridOperator(c, [n0, n1, n2], self.omega)

    def x_part(self, trunc, basis="sine", lmax=None):
        """``i (C2 d_xx + C1 d_x + C0)`` as a Toeplitz OpMatrix on ``trunc``."""
        total = None
        for k, C in enumerate(self.coeffs):
            m = coefficient_matrix(1j * C, trunc, basis, lmax, derivative=k)
            total = m if total is None else total + m
        return total


# ---------------------------------------------------------------------------
# diffeomorphisms of the torus
# ---------------------------------------------------------------------------

@dataclass
class TorusDiffeo:
    """``x -> x + xi(phi, x)`` (space) or ``phi -> phi + omega alpha(phi)`` (time).

    ``shift`` and ``inverse_shift`` live on the full collocation box, so
    they represent the grid values exactly.
    """

    direction: str
    shift: SpectralField
    inverse_shift: SpectralField
    colloc: Collocation
    omega: tuple | None = None
    iterations: int = 0

    @classmethod
    def build(cls, direction, values, colloc, omega=None, tol=1e-14, max_iter=200):
        if direction not in ("space", "time"):
            raise ValueError(f"unknown direction {direction!r}")
        values = np.real(np.asarray(values))
        values = np.broadcast_to(values, colloc.shape).astype(float)
        omega = None if omega is None else tuple(float(w) for w in np.atleast_1d(omega))
        shift = colloc.field(values)
        proto = cls(direction, shift, shift, colloc, omega)
        norm = proto.w1inf()
        if norm > 0.5:
            raise DiffeoInvalidError(f"{direction} shift has W^1,inf norm {norm:.3e} > 1/2")
        inv = -values
        for it in range(1, max_iter + 1):
            new = -np.real(proto._compose(values, inv))
            step = _sup(new - inv)
            inv = new
            if step <= tol * max(1.0, _sup(values)):
                break
        else:
            raise DiffeoInvalidError(f"inverse {direction} shift did not converge (last step {step:.2e})")
        return cls(direction, shift, colloc.field(inv), colloc, omega, it)

    @property
    def shift_values(self):
        return np.real(self.colloc.values(self.shift))

    @property
    def inverse_values(self):
        return np.real(self.colloc.values(self.inverse_shift))

    def _compose(self, values, shift):
        """Interpolant of ``values`` at the grid displaced by ``shift``."""
        c = self.colloc
        if self.direction == "space":
            return c.shift_x(values, shift)
        alpha = np.asarray(shift)[(Ellipsis,) + (0,)]
        disp = np.stack([w * alpha for w in self.omega])
        return c.shift_phi(values, disp)

    def apply_values(self, values, inverse=False):
        return self._compose(values, self.inverse_values if inverse else self.shift_values)

    def w1inf(self):
        """``max(|shift|_inf, |grad shift|_inf)``."""
        v = self.shift_values
        c = self.colloc
        parts = [_sup(v), _sup(c.dx(v))]
        parts += [_sup(c.dphi(v, a)) for a in range(c.d)]
        return max(parts)

    def roundtrip_defect(self, values):
        back = self.apply_values(self.apply_values(values, inverse=True))
        return _sup(back - values)


def compose_diffeo(g: TorusDiffeo, f: SpectralField, inverse=False, trunc=None):
    """``f`` evaluated at the displaced arguments and projected to ``trunc``.

    ``trunc`` defaults to the collocation box; ``f`` must fit inside it.
    """
    vals = g.colloc.values(f)
    out = g.apply_values(vals, inverse)
    return g.colloc.field(out, trunc or g.colloc.trunc, f.parity)


# ---------------------------------------------------------------------------
# transformation chains
# ---------------------------------------------------------------------------

@dataclass
class Transform:
    """A multiplication by a 2x2 matrix function or a change of variables."""

    name: str
    matrix: np.ndarray | None = None
    inverse_matrix: np.ndarray | None = None
    diffeo: TorusDiffeo | None = None

    def apply_values(self, h, inverse=False):
        if self.diffeo is not None:
            return self.diffeo.apply_values(h, inverse)
        return _mv(self.inverse_matrix if inverse else self.matrix, h)


@dataclass
class TransformChain:
    """Composition ``steps[0] o steps[1] o ...`` acting on doubled fields."""

    colloc: Collocation
    steps: list = field(default_factory=list)

    @property
    def names(self):
        return [s.name for s in self.steps]

    def apply_values(self, h, inverse=False):
        order = self.steps if inverse else self.steps[::-1]
        for s in order:
            h = s.apply_values(h, inverse)
        return h

    def apply(self, f: SpectralField, trunc=None, inverse=False):
        if not f.doubled:
            raise ValueError("transformations act on doubled fields")
        out = self.apply_values(self.colloc.values(f), inverse)
        return self.colloc.field(out, trunc or f.trunc)

    def matrix(self, trunc, basis="sine", inverse=False):
        """Dense OpMatrix on ``trunc``, assembled column by column."""
        proto = OpMatrix.identity(trunc, basis)
        J = proto.nmodes
        P = proto.nperiods
        shape = (2 * trunc.nphi + 1,) * trunc.d + (2 * J,)
        cols = []
        for n in range(P * 2 * J):
            vec = np.zeros(P * 2 * J, complex)
            vec[n] = 1.0
            f = proto.vector_field(vec.reshape(shape))
            cols.append(proto.field_vector(self.apply(f, trunc, inverse)).reshape(-1))
        return OpMatrix.from_dense(np.stack(cols, axis=1), trunc, basis)


# ---------------------------------------------------------------------------
# the four steps
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    step: str
    operator: GridOperator
    transforms: list
    data: dict
    defects: dict
    diffeo_norms: dict = field(default_factory=dict)
    m: float | None = None

    def diagnostics(self):
        return {
            "step": self.step,
            "defect_norms": self.defects,
            "diffeo_sup_norms": self.diffeo_norms,
            "m": self.m,
        }


def step1_diag_second_order(op: GridOperator):
    """Diagonalise ``E + A2`` pointwise.

    With ``p = 1 + a2``, ``lambda1 = sqrt(p^2 - |b2|^2)`` and
    ``c = p + lambda1`` the rows of ``[[c, b2], [conj b2, c]]`` are left
    eigenvectors for ``+-lambda1``.  Normalised to unit determinant this is
    ``T1^{-1}``; ``T1`` follows from the adjugate.
    """
    C2 = op.coeffs[2]
    p = C2[0, 0]
    b = C2[0, 1]
    if _sup(p.imag) > 1e-10 * max(1.0, _sup(p)):
        raise DegenerateCoefficientError("second-order diagonal coefficient is not real")
    p = p.real
    disc = p ** 2 - np.abs(b) ** 2
    if disc.min() <= 0:
        raise DegenerateCoefficientError(
            f"(1+a2)^2 - |b2|^2 reaches {disc.min():.3e}; eigenvalues are not real")
    lam1 = np.sqrt(disc)
    if (p + lam1).min() <= 0:
        raise DegenerateCoefficientError("1 + a2 is negative on the grid")
    c = p + lam1
    det = c ** 2 - np.abs(b) ** 2  # = 2 lam1 c > 0
    n = np.sqrt(det)
    Tinv = np.array([[c, b], [np.conj(b), c]]) / n
    T = np.array([[c, -b], [-np.conj(b), c]]) / n
    new = op.conjugate(T, Tinv)
    exact = _diag(lam1, -lam1).astype(complex)
    defect = _sup(new.coeffs[2] - exact)
    new.coeffs[2] = exact
    return StepResult(
        "diag_second_order", new, [Transform("T1", T, Tinv)],
        {"a2_1": lam1 - 1.0, "T1": T, "T1_inv": Tinv},
        {"second_order_offdiag": defect, "inverse": _sup(_mm(T, Tinv) - _eye(op.colloc.shape))},
    )


def step2_space_diffeo(op: GridOperator, tol=1e-14):
    """Make the second-order coefficient independent of ``x``."""
    c = op.colloc
    one_a21 = op.coeffs[2][0, 0].real
    if one_a21.min() <= 0:
        raise DegenerateCoefficientError(f"1 + a2^(1) reaches {one_a21.min():.3e}")
    r = one_a21 ** -0.5
    mean_r = c.x_mean(r)
    one_a22 = mean_r ** -2.0  # function of phi only
    rho0 = r / mean_r - 1.0
    xi = np.real(c.dx_inverse(rho0))
    g = TorusDiffeo.build("space", xi, c, tol=tol)
    xi_x = np.real(c.dx(xi))
    xi_xx = np.real(c.dx(xi, 2))
    xi_t = np.real(c.omega_dphi(xi, op.omega))
    C0, C1, C2 = op.coeffs
    jac = 1.0 + xi_x
    eq_defect = _sup(one_a21 * jac ** 2 - one_a22)
    I = _eye(c.shape)
    pre = [C0, C2 * xi_xx + C1 * jac - 1j * xi_t * I, C2 * jac ** 2]
    new = [g.apply_values(m, inverse=True) for m in pre]
    exact = _diag(one_a22 + 0 * xi, -(one_a22 + 0 * xi)).astype(complex)
    defect = _sup(new[2] - exact)
    new[2] = exact
    out = GridOperator(c, new, op.omega)
    return StepResult(
        "space_diffeo", out, [Transform("T2", diffeo=g)],
        {"xi": g, "a2_2": one_a22[..., 0] - 1.0},
        {"x_independence": defect, "eq_residual": eq_defect},
        {"xi": g.w1inf(), "xi_inverse": _sup(g.inverse_values)},
    )


def step3_time_reparam(op: GridOperator, a2_2=None, divisor_floor=0.0, tol=1e-14):
    """Reparametrise time so that the second-order coefficient is ``m``.

    Returns the step result; ``data`` holds the diffeo ``alpha``, ``m`` and
    ``rho`` (grid values) with ``T3^{-1} L2 T3 = rho L3``.
    """
    c = op.colloc
    if a2_2 is None:
        a2_2 = op.coeffs[2][0, 0].real[..., 0] - 1.0
    one = (1.0 + np.asarray(a2_2, float))[..., None] + np.zeros(c.shape)
    m = float(np.mean(one))
    if m <= 0:
        raise DegenerateCoefficientError(f"mean second-order coefficient {m:.3e} is not positive")
    alpha, min_div = c.omega_dphi_inverse(one - m, op.omega, divisor_floor)
    alpha = np.real(alpha) / m
    g = TorusDiffeo.build("time", alpha, c, omega=op.omega, tol=tol)
    rho = np.real(g.apply_values(1.0 + np.real(c.omega_dphi(alpha, op.omega)), inverse=True))
    if rho.min() <= 0:
        raise DiffeoInvalidError("time reparametrisation factor rho is not positive")
    new = [g.apply_values(C, inverse=True) / rho for C in op.coeffs]
    eq_defect = _sup(one - m * (1.0 + np.real(c.omega_dphi(alpha, op.omega))))
    exact = _const(m * E, c.shape)
    defect = _sup(new[2] - exact)
    new[2] = exact
    out = GridOperator(c, new, op.omega)
    return StepResult(
        "time_reparam", out,
        [Transform("T3", diffeo=g), Transform("rho", _diag(rho, rho).astype(complex), _diag(1 / rho, 1 / rho).astype(complex))],
        {"alpha": g, "m": m, "rho": rho, "min_divisor": min_div},
        {"constant_second_order": defect, "eq_residual": eq_defect},
        {"alpha": g.w1inf(), "alpha_inverse": _sup(g.inverse_values)},
        m,
    )


def step4_descent(op: GridOperator, m=None):
    """Remove the diagonal first-order coefficient with ``T4 = diag(e^s, e^conj(s))``."""
    c = op.colloc
    if m is None:
        m = float(op.coeffs[2][0, 0].real.mean())
    if m == 0:
        raise DegenerateCoefficientError("m vanishes")
    a1 = op.coeffs[1][0, 0]
    s = -c.dx_inverse(a1) / (2 * m)
    es = np.exp(s)
    T = _diag(es, np.conj(es))
    Tinv = _diag(1 / es, 1 / np.conj(es))
    new = op.conjugate(T, Tinv)
    # a diagonal T4 commutes with the constant second-order block
    drift = _sup(new.coeffs[2] - op.coeffs[2])
    new.coeffs[2] = op.coeffs[2]
    C1 = new.coeffs[1]
    defect = max(_sup(C1[0, 0]), _sup(C1[1, 1]))
    return StepResult(
        "descent", new, [Transform("T4", T, Tinv)],
        {"s": s, "z": es - 1.0, "q1": C1[0, 1], "q2": new.coeffs[0][0, 0], "q3": new.coeffs[0][0, 1]},
        {"a1_residual": defect, "x_mean_a1": _sup(c.x_mean(a1)), "second_order_drift": drift},
        m=m,
    )


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class RegularizedOperator:
    """Result of the four reductions.

    ``L4`` holds the spatial part ``i (m E d_xx + C1 d_x + C0)`` as a
    Toeplitz OpMatrix; :meth:`full_operator` adds ``omega . d_phi``.
    """

    m: float
    q1: SpectralField
    q2: SpectralField
    q3: SpectralField
    L4: OpMatrix
    V1: TransformChain
    V2: TransformChain
    lam: float
    omega_bar: tuple
    grid_operator: GridOperator
    steps: list
    residual: float | None = None

    @property
    def trunc(self):
        return self.L4.trunc

    def full_operator(self):
        from .model import omega_dphi_matrix
        return omega_dphi_matrix(self.trunc, self.lam, self.omega_bar, self.L4.basis) + self.L4.as_dense()

    def remainder(self):
        """``L4`` minus its diagonal part ``i m E d_xx``."""
        t, basis = self.trunc, self.L4.basis
        J = basis_modes(basis, t.nx)
        sig = np.concatenate([np.ones(J.size), -np.ones(J.size)])
        d2 = -np.concatenate([J ** 2.0, J ** 2.0])
        diag = OpMatrix.diagonal(1j * self.m * sig * d2, t, basis)
        return self.L4 - diag.with_lmax(self.L4.lmax)

    def diagnostics(self):
        return [s.diagnostics() for s in self.steps]

    def dump(self, path=None):
        text = json.dumps({"m": self.m, "lambda": self.lam, "residual": self.residual, "steps": self.diagnostics()}, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def probe_fields(trunc, basis="sine", count=20):
    """The ``count`` lowest basis fields ``e_(l, sigma, j)`` ordered by ``|l| + j``."""
    proto = OpMatrix.identity(trunc, basis)
    J = proto.nmodes
    modes = basis_modes(basis, trunc.nx)
    shape = (2 * trunc.nphi + 1,) * trunc.d + (2 * J,)
    keys = []
    for idx in np.ndindex(*shape):
        ell = np.array(idx[:-1]) - trunc.nphi
        j = modes[idx[-1] % J]
        keys.append((int(np.abs(ell).max(initial=0)) + abs(int(j)), idx))
    keys.sort()
    out = []
    for _, idx in keys[:count]:
        vec = np.zeros(shape, complex)
        vec[idx] = 1.0
        out.append(proto.vector_field(vec))
    return out


def conjugation_residual(L: GridOperator, L4: GridOperator, V1: TransformChain, V2: TransformChain, fields):
    """``max sup |L V2 h - V1 L4 h|`` over the test fields, on the grid."""
    c = L.colloc
    worst = 0.0
    for f in fields:
        h = c.values(f)
        lhs = L.apply_values(V2.apply_values(h))
        rhs = V1.apply_values(L4.apply_values(h))
        worst = max(worst, _sup(lhs - rhs))
    return worst


def regularize(lc, lam, omega_bar, trunc=None, basis="sine", oversample=4, test_modes=20,
               divisor_floor=0.0, lmax=None):
    """Run the four reductions on the operator with coefficients ``lc``.

    Parameters
    ----------
    lc : LinearizedCoefficients
    lam, omega_bar :
        Frequency ``omega = lam * omega_bar``.
    trunc : Truncation, optional
        Box of ``L4`` (default ``lc.trunc``).
    oversample : int
        Grid points per coefficient mode.
    test_modes : int
        Number of basis fields used for the semi-conjugation residual; 0
        skips the check.
    """
    trunc = trunc or lc.trunc
    colloc = Collocation.covering([trunc] + [c.trunc for c in lc.a + lc.b], oversample)
    L = GridOperator.from_linearization(lc, lam, omega_bar, colloc)
    steps = []
    op = L
    for name, fn in (("step1", step1_diag_second_order), ("step2", step2_space_diffeo),
                     ("step3", lambda o: step3_time_reparam(o, divisor_floor=divisor_floor)),
                     ("step4", step4_descent)):
        try:
            res = fn(op)
        except NlsKamError as exc:
            exc.module = f"regularizer.{name}"
            raise
        steps.append(res)
        op = res.operator
    m = steps[2].m
    ts = {t.name: t for s in steps for t in s.transforms}
    V1 = TransformChain(colloc, [ts["T1"], ts["T2"], ts["T3"], ts["rho"], ts["T4"]])
    V2 = TransformChain(colloc, [ts["T1"], ts["T2"], ts["T3"], ts["T4"]])
    data = steps[3].data
    q1, q2, q3 = (colloc.field(data[k]) for k in ("q1", "q2", "q3"))
    L4 = op.x_part(trunc, basis, lmax)
    out = RegularizedOperator(m, q1, q2, q3, L4, V1, V2, float(lam),
                              tuple(np.atleast_1d(omega_bar).astype(float)), op, steps)
    if test_modes:
        out.residual = conjugation_residual(L, op, V1, V2, probe_fields(trunc, basis, test_modes))
    return out


__all__ = [
    "GridOperator",
    "RegularizedOperator",
    "StepResult",
    "TorusDiffeo",
    "Transform",
    "TransformChain",
    "compose_diffeo",
    "conjugation_residual",
    "regularize",
    "step1_diag_second_order",
    "step2_space_diffeo",
    "step3_time_reparam",
    "step4_descent",
    "probe_fields",
]
