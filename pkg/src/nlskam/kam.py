"""KAM diagonalization of the regularized operator.

The operator is carried as ``L = omega . d_phi + D + R`` with a diagonal
``D = diag(mu)``, ``mu_{sigma,j} = -i sigma m j^2 + r_{sigma,j}`` and a
remainder ``R = E1 |D_x| + E0``, where ``|D_x| = diag(j)`` and ``E1`` has no
blocks diagonal in ``sigma``.  Each step solves the homological equation
for a Toeplitz ``Psi`` and conjugates by ``Phi = 1 + Psi``.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConvergenceError, NotDiagonallyDominantError, SmallDivisorError, StepRejectedError
from .opmatrix import (
    OpMatrix,
    basis_modes,
    coefficient_matrix,
    decay_norm,
    neumann_invert,
    project_reversible,
    smooth_truncate,
)
from .spectral import ParamGrid, ell_vectors

log = logging.getLogger(__name__)

DIVISOR_FLOOR = 1e3 * np.finfo(float).eps


def truncation_schedule(nu, n0, cap):
    """``N_nu = round(N0^{(3/2)^nu})`` capped at ``cap``."""
    if n0 <= 1:
        return int(min(max(n0, 0), cap))
    if 1.5 ** nu * np.log(n0) >= np.log(cap + 1):
        return int(cap)
    return int(min(round(n0 ** (1.5 ** nu)), cap))


def default_s0(d):
    return (d + 2) / 2


def default_beta(tau):
    return 7 * tau + 5


def _signs_modes(basis, nx):
    modes = basis_modes(basis, nx).astype(float)
    sig = np.concatenate([np.ones(modes.size), -np.ones(modes.size)])
    return sig, np.concatenate([modes, modes])


def _ell_grid(d, L):
    """Frequency vector of every slab position of band ``L``, shape ``(...,d)``."""
    return np.stack(np.meshgrid(*[np.arange(-L, L + 1)] * d, indexing="ij"), axis=-1)


def sigma_diagonal(A: OpMatrix) -> OpMatrix:
    """The ``sigma = sigma'`` blocks of ``A``."""
    J = A.nmodes
    s = np.zeros_like(A.slabs)
    s[..., :J, :J] = A.slabs[..., :J, :J]
    s[..., J:, J:] = A.slabs[..., J:, J:]
    return OpMatrix(A.trunc, A.basis, slabs=s)


def entry_diagonal(A: OpMatrix) -> OpMatrix:
    """The ``(sigma, j) = (sigma', j')`` entries of every slab."""
    idx = np.arange(2 * A.nmodes)
    s = np.zeros_like(A.slabs)
    s[..., idx, idx] = A.slabs[..., idx, idx]
    return OpMatrix(A.trunc, A.basis, slabs=s)


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass
class EigenvalueTable:
    """Eigenvalue corrections over ``(sigma, j, sample, iteration)``.

    ``r`` has shape ``(2, J, S, V)``; ``mu(nu)`` returns
    ``-i sigma m j^2 + r[..., nu]`` with shape ``(2, J, S)``.
    """

    m: np.ndarray
    r: np.ndarray
    modes: np.ndarray
    samples: np.ndarray

    def __post_init__(self):
        self.m = np.atleast_1d(np.asarray(self.m, float))
        self.r = np.asarray(self.r, complex)
        self.modes = np.asarray(self.modes)
        self.samples = np.atleast_1d(np.asarray(self.samples, float))
        if self.r.ndim != 4 or self.r.shape[:3] != (2, self.modes.size, self.samples.size):
            raise ValueError(f"r must have shape (2, J, S, V), got {self.r.shape}")
        if self.m.size != self.samples.size:
            raise ValueError("one m per sample")

    @classmethod
    def initial(cls, m, modes, samples):
        m = np.atleast_1d(np.asarray(m, float))
        return cls(m, np.zeros((2, len(modes), m.size, 1), complex), modes, samples)

    @property
    def iterations(self):
        return self.r.shape[-1]

    def base(self):
        sig = np.array([1.0, -1.0])[:, None, None]
        return -1j * sig * self.m[None, None, :] * (self.modes.astype(float) ** 2)[None, :, None]

    def mu(self, nu=-1):
        return self.base() + self.r[..., nu]

    def mu_sample(self, sample, nu=-1):
        """``mu`` of one sample flattened to ``(sigma, j)`` order (length 2J)."""
        return self.mu(nu)[:, :, sample].reshape(-1)

    def real_part_defect(self):
        return float(np.abs(self.r.real).max()) if self.r.size else 0.0

    def antisymmetry_defect(self):
        return float(np.abs(self.r[0] + self.r[1]).max()) if self.r.size else 0.0

    def to_dict(self):
        return {
            "samples": self.samples.tolist(),
            "m": self.m.tolist(),
            "modes": self.modes.tolist(),
            "r_imag": self.r.imag.tolist(),
            "r_real": self.r.real.tolist(),
        }


@dataclass
class MelnikovMask:
    """Second Melnikov admissibility over the parameter samples.

    ``margin[i]`` is the smallest ratio ``|divisor| / bound`` over the tested
    triples (``mask = margin >= 1``); ``witness[i]`` records the worst triple.
    ``stratum_failures`` counts samples rejected only by the first-order
    bound on the ``sigma j = sigma' j'`` stratum.
    """

    mask: np.ndarray
    margin: np.ndarray
    witness: list
    gamma: float
    tau: float
    n: int
    stratum_failures: int = 0

    @property
    def parameters(self):
        return {"gamma": self.gamma, "tau": self.tau, "N": self.n}


def _melnikov_sample(mu, lam, omega_bar, sig, modes, gamma, tau, n):
    """Divisor sweep for one sample; returns (margin, witness, stratum_only)."""
    d = omega_bar.size
    ells = ell_vectors(d, n, include_zero=True)
    size = np.maximum(np.max(np.abs(ells), axis=1), 1).astype(float)
    w = lam * (ells @ omega_bar)
    sj2 = sig * modes ** 2
    div = np.abs(1j * w[:, None, None] + mu[None, :, None] - mu[None, None, :])
    bound = gamma * np.abs(sj2[:, None] - sj2[None, :])[None] / size[:, None, None] ** tau
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, div / bound, np.inf)
    # first-order bound on the h = h' stratum, l != 0
    nonzero = np.any(ells != 0, axis=1)
    first = np.where(nonzero, np.abs(w) / (gamma / size ** tau), np.inf)
    i = np.unravel_index(np.argmin(ratio), ratio.shape)
    margin2 = float(ratio[i])
    k = int(np.argmin(first))
    margin1 = float(first[k])
    if margin2 <= margin1:
        a, b = i[1], i[2]
        witness = {"ell": ells[i[0]].tolist(), "sigma": int(sig[a]), "j": int(modes[a]),
                   "sigma_p": int(sig[b]), "j_p": int(modes[b]), "divisor": float(div[i]),
                   "bound": float(bound[i])}
    else:
        witness = {"ell": ells[k].tolist(), "sigma": 1, "j": int(modes[0]), "sigma_p": 1,
                   "j_p": int(modes[0]), "divisor": float(abs(w[k])),
                   "bound": float(gamma / size[k] ** tau), "stratum": True}
    margin = min(margin2, margin1)
    stratum_only = margin1 < 1.0 <= margin2
    return margin, witness, stratum_only


def second_melnikov_mask(table: EigenvalueTable, grid: ParamGrid, gamma, tau, n, nu=-1) -> MelnikovMask:
    """Test ``|i lam omega_bar . l + mu_h - mu_h'| >= gamma |sj^2 - s'j'^2| / <l>^tau``.

    Every ``|l|_inf <= n`` and every pair of modes is swept; the sweep is
    exhaustive, so no sufficiency bound is used to prune it.  On the
    ``h = h'`` stratum the first-order bound ``|lam omega_bar . l| >=
    gamma <l>^{-tau}`` (``l != 0``) is enforced in addition.
    """
    if table.samples.size != grid.samples.size:
        raise ValueError("table and grid have different samples")
    sig = np.repeat([1.0, -1.0], table.modes.size)
    modes = np.concatenate([table.modes, table.modes]).astype(float)
    margins, witnesses, stratum = [], [], 0
    for i, lam in enumerate(grid.samples):
        mu = table.mu_sample(i, nu)
        mg, wt, st = _melnikov_sample(mu, lam, grid.omega_bar, sig, modes, gamma, tau, n)
        margins.append(mg)
        witnesses.append(wt)
        stratum += int(st)
    margin = np.array(margins)
    return MelnikovMask(margin >= 1.0, margin, witnesses, float(gamma), float(tau), int(n), stratum)


@dataclass
class KamState:
    """One parameter sample at iteration ``nu``.

    ``r`` is the eigenvalue correction (length ``2J``); ``E1`` and ``E0``
    are reversible Toeplitz operators with ``E1`` free of ``sigma``-diagonal
    blocks.  ``stack`` holds the ``(Psi, Phi^{-1})`` pairs applied so far.
    """

    lam: float
    omega_bar: np.ndarray
    m: float
    r: np.ndarray
    E1: OpMatrix
    E0: OpMatrix
    nu: int = 0
    n0: int = 2
    s0: float = 1.5
    beta: float = 19.0
    lkeep: int | None = None
    stack: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    @classmethod
    def from_regularized(cls, reg, n0=2, s0=None, beta=None, tau=2.0, lkeep=None):
        """Split the remainder of a :class:`RegularizedOperator`."""
        t, basis = reg.trunc, reg.L4.basis
        C = reg.grid_operator.coeffs
        lmax = reg.L4.lmax
        _, jd = _signs_modes(basis, t.nx)
        E1D = coefficient_matrix(1j * C[1], t, basis, lmax, derivative=1)
        E0 = coefficient_matrix(1j * C[0], t, basis, lmax)
        E1 = E1D.right_diagonal(1.0 / jd)
        E1, E0 = _resplit(E1, E0, jd)
        E1, E0 = project_reversible(E1), project_reversible(E0)
        state = cls(float(reg.lam), np.atleast_1d(np.asarray(reg.omega_bar, float)), float(reg.m),
                    np.zeros(jd.size, complex), E1, E0, 0, n0,
                    default_s0(t.d) if s0 is None else s0, default_beta(tau) if beta is None else beta, lkeep)
        return state

    @classmethod
    def from_remainder(cls, lam, omega_bar, m, E1, E0, r=None, **kw):
        """Build a state from explicit operators (used by tests and tools)."""
        _, jd = _signs_modes(E0.basis, E0.trunc.nx)
        r = np.zeros(jd.size, complex) if r is None else np.asarray(r, complex)
        E1, E0 = _resplit(E1, E0, jd)
        kw.setdefault("s0", default_s0(E0.trunc.d))
        return cls(float(lam), np.atleast_1d(np.asarray(omega_bar, float)), float(m), r, E1, E0, **kw)

    @property
    def trunc(self):
        return self.E0.trunc

    @property
    def basis(self):
        return self.E0.basis

    @property
    def cap(self):
        return 2 * self.trunc.nphi

    @property
    def n(self):
        return truncation_schedule(self.nu, self.n0, self.cap)

    @property
    def jd(self):
        return _signs_modes(self.basis, self.trunc.nx)[1]

    @property
    def mu(self):
        sig, jd = _signs_modes(self.basis, self.trunc.nx)
        return -1j * sig * self.m * jd ** 2 + self.r

    def remainder(self):
        return self.E1.right_diagonal(self.jd) + self.E0

    def delta(self, s):
        """``|E1|_s + |E0|_s``."""
        return decay_norm(self.E1, s).value + decay_norm(self.E0, s).value

    def operator(self):
        """Spatial part ``D + R`` as a Toeplitz OpMatrix."""
        D = OpMatrix.diagonal(self.mu, self.trunc, self.basis)
        R = self.remainder()
        return D.with_lmax(R.lmax) + R

    def phi(self, lkeep=None):
        """Composed ``Phi_0 Phi_1 ... Phi_nu`` (identity when empty)."""
        out = OpMatrix.identity(self.trunc, self.basis)
        one = OpMatrix.identity(self.trunc, self.basis)
        for psi, _ in self.stack:
            out = out.matmul(one + psi, lkeep)
        return out

    def phi_inverse(self, lkeep=None):
        """Composed ``Phi_nu^{-1} ... Phi_0^{-1}``."""
        out = OpMatrix.identity(self.trunc, self.basis)
        for _, pinv in self.stack:
            out = pinv.matmul(out, lkeep)
        return out

    def apply_phi(self, vec, inverse=False):
        """Apply the composed map (or its inverse) on the box.

        Each factor acts on the truncated box, so the two directions agree
        only up to the box-edge error ``O(|Psi|^2)``.
        """
        v = np.asarray(vec, complex)
        if inverse:
            for _, pinv in self.stack:
                v = pinv.apply_vector(v)
            return v
        for psi, _ in reversed(self.stack):
            v = v + psi.apply_vector(v)
        return v


def _resplit(E1, E0, jd):
    """Move the ``sigma``-diagonal blocks of ``E1`` into ``E0``."""
    diag = sigma_diagonal(E1)
    L = max(E1.lmax, E0.lmax)
    return (E1 - diag).with_lmax(L), (E0 + diag.right_diagonal(jd)).with_lmax(L)


# ---------------------------------------------------------------------------
# homological equation and one step
# ---------------------------------------------------------------------------

@dataclass
class HomologicalSolution:
    psi: OpMatrix
    bracket: np.ndarray
    residual: float
    min_divisor: float


def divisors(state: KamState, L):
    """``d(l)_{h h'} = i lam omega_bar . l + mu_h - mu_h'`` on the band ``L``."""
    ells = _ell_grid(state.trunc.d, L)
    w = state.lam * (ells @ state.omega_bar)
    mu = state.mu
    return 1j * w[..., None, None] + mu[:, None] - mu[None, :]


def solve_homological(state: KamState, floor=DIVISOR_FLOOR, n=None) -> HomologicalSolution:
    """Solve ``omega.d_phi Psi + [D, Psi] + Pi_N R = [R]``.

    ``Psi(l)_{h h'} = -R(l)_{h h'} / d(l)_{h h'}`` for ``|l|_inf <= N`` and
    ``(l, h) != (0, h')``; ``[R]`` is the diagonal of ``E0(0)``.

    Raises
    ------
    SmallDivisorError
        If a divisor multiplying a nonzero entry is below ``floor``.
    """
    n = state.n if n is None else n
    R = state.remainder()
    L = min(n, R.lmax)
    Rn = R.with_lmax(L)
    d = state.trunc.d
    div = divisors(state, L)
    zero = (L,) * d
    idx = np.arange(div.shape[-1])
    active = np.ones(div.shape, bool)
    active[zero + (idx, idx)] = False
    active &= Rn.slabs != 0
    small = active & (np.abs(div) < floor)
    if small.any():
        pos = tuple(int(p) for p in np.argwhere(small)[0])
        sig, jd = _signs_modes(state.basis, state.trunc.nx)
        triple = {"ell": [p - L for p in pos[:d]], "h": (int(sig[pos[-2]]), int(jd[pos[-2]])),
                  "h_p": (int(sig[pos[-1]]), int(jd[pos[-1]]))}
        raise SmallDivisorError(f"divisor {abs(div[pos]):.3e} below floor at {triple}", index=triple,
                                divisor=float(abs(div[pos])))
    psi = np.zeros_like(Rn.slabs)
    psi[active] = -Rn.slabs[active] / div[active]
    bracket = np.asarray(np.diag(R.slabs[(R.lmax,) * d]), complex).copy()
    Psi = OpMatrix(state.trunc, state.basis, slabs=psi)
    # residual: d(l) Psi(l) + R(l) on the band, minus the bracket at l = 0
    res = div * psi + Rn.slabs
    res[zero + (idx, idx)] -= bracket
    resid = decay_norm(OpMatrix(state.trunc, state.basis, slabs=res), state.s0).value
    mind = float(np.abs(div[active]).min()) if active.any() else np.inf
    return HomologicalSolution(Psi, bracket, resid, mind)


def kam_step(state: KamState, floor=DIVISOR_FLOOR, tol=1e-12) -> KamState:
    """Conjugate by ``Phi = 1 + Psi`` and return the next state.

    ``E1+ = Phi^{-1}(Pi_N^perp E1 + E1 A)`` and
    ``E0+ = Phi^{-1}(Pi_N^perp E0 + E0 Psi - Psi [R] + E1 |D_x| (Psi - A))``
    with ``A`` the entry-diagonal part of ``Psi``; the ``sigma``-diagonal
    part of ``E1+`` is moved into ``E0+`` and both are projected onto
    reversible operators.

    Raises
    ------
    StepRejectedError
        If ``1 + Psi`` cannot be inverted by a Neumann series.
    """
    n = state.n
    sol = solve_homological(state, floor)
    Psi = sol.psi
    try:
        Phi_inv = neumann_invert(Psi, state.s0, tol=max(tol, 10 * sol.residual), lkeep=state.lkeep)
    except (NotDiagonallyDominantError, ConvergenceError) as exc:
        err = StepRejectedError(f"step {state.nu}: {exc}")
        err.module = "kam.kam_step"
        raise err from exc
    lk = state.lkeep
    jd = state.jd
    A = entry_diagonal(Psi)
    E1, E0 = state.E1, state.E0
    perp1 = E1 - smooth_truncate(E1, n)
    perp0 = E0 - smooth_truncate(E0, n)
    E1D = E1.right_diagonal(jd)
    new1 = Phi_inv.matmul(perp1 + E1.matmul(A, lk), lk)
    inner = perp0 + E0.matmul(Psi, lk) - Psi.right_diagonal(sol.bracket) + E1D.matmul(Psi - A, lk)
    new0 = Phi_inv.matmul(inner, lk)
    defect = new1.defect + new0.defect
    new1, new0 = _resplit(new1, new0, jd)
    rev_defect = max(decay_norm(new1 - project_reversible(new1), 0.0).value,
                     decay_norm(new0 - project_reversible(new0), 0.0).value)
    new1, new0 = project_reversible(new1), project_reversible(new0)
    r = state.r + 1j * np.imag(sol.bracket)
    nxt = KamState(state.lam, state.omega_bar, state.m, r, new1, new0, state.nu + 1, state.n0, state.s0,
                   state.beta, state.lkeep, state.stack + [(Psi, Phi_inv)], list(state.trace))
    nxt.trace.append({
        "nu": state.nu, "N": n,
        "psi_norm": decay_norm(Psi, state.s0).value,
        "homological_residual": sol.residual,
        "min_divisor": sol.min_divisor,
        "bracket_real": float(np.abs(np.real(sol.bracket)).max()),
        "truncation_defect": defect,
        "reversibility_defect": rev_defect,
    })
    return nxt


def conjugation_defect(before: KamState, after: KamState, lkeep=None) -> float:
    """``|L_nu Phi - Phi L_{nu+1}|_0`` at the level of Toeplitz symbols.

    ``omega . d_phi`` contributes ``i omega . l Psi(l)``; with ``lkeep`` wide
    enough for every product the residual only sees the Neumann tolerance.
    """
    Psi = after.stack[-1][0]
    one = OpMatrix.identity(Psi.trunc, Psi.basis)
    Phi = one + Psi
    L = Psi.lmax
    w = before.lam * (_ell_grid(Psi.trunc.d, L) @ before.omega_bar)
    comm = OpMatrix(Psi.trunc, Psi.basis, slabs=1j * w[..., None, None] * Psi.slabs)
    lhs = comm + before.operator().matmul(Phi, lkeep)
    rhs = Phi.matmul(after.operator(), lkeep)
    return decay_norm(lhs - rhs, 0.0).value


# ---------------------------------------------------------------------------
# full reduction
# ---------------------------------------------------------------------------

@dataclass
class KamResult:
    """Outcome of :func:`reduce` over a parameter grid.

    ``mask`` is the intersection over iterations of the per-sample second
    Melnikov masks; excluded samples get ``mu`` by piecewise-linear
    interpolation between surviving samples.  ``trace`` rows are
    ``(nu, N_nu, delta_s0, delta_s0_beta, max|r|, surviving)``.
    """

    table: EigenvalueTable
    mask: np.ndarray
    masks: list
    states: list
    trace: list
    empty: bool
    phi_norms: np.ndarray
    smallness: float
    tail_bound: np.ndarray
    grid: ParamGrid
    gamma: float
    tau: float

    def mu_inf(self):
        return self.table.mu(-1)

    def write_trace_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["nu", "N_nu", "delta_s0", "delta_s0_beta", "max_abs_r", "surviving"])
            for row in self.trace:
                w.writerow(row)

    def summary(self):
        return {
            "samples": self.grid.samples.tolist(),
            "mask": self.mask.tolist(),
            "empty": self.empty,
            "iterations": self.table.iterations - 1,
            "phi_minus_one": self.phi_norms.tolist(),
            "smallness": self.smallness,
            "tail_bound": self.tail_bound.tolist(),
            "gamma": self.gamma,
            "tau": self.tau,
        }


def _run_sample(state: KamState, gamma, tau, nu_max, stop_tol, floor):
    """Iterate one sample; returns (history, admissible, margins)."""
    sig, jd = _signs_modes(state.basis, state.trunc.nx)
    history = [state]
    admissible = True
    margins = []
    while True:
        if state.delta(state.s0) < stop_tol or state.nu >= nu_max:
            break
        margin, witness, _ = _melnikov_sample(state.mu, state.lam, state.omega_bar, sig, jd, gamma, tau, state.n)
        margins.append((margin, witness))
        if margin < 1.0:
            admissible = False
            break
        try:
            state = kam_step(state, floor)
        except (SmallDivisorError, StepRejectedError) as exc:
            # a failed step excludes the sample, like a failed mask
            log.info("sample lambda=%.6g excluded: %s", state.lam, exc)
            admissible = False
            break
        history.append(state)
    return history, admissible, margins


def reduce(regs, grid: ParamGrid, gamma, tau, nu_max=8, stop_tol=1e-13, n0=2, s0=None, beta=None,
           c0=1.0, lkeep=None, threads=1, floor=DIVISOR_FLOOR) -> KamResult:
    """Run the KAM iteration at every sample of ``grid``.

    Parameters
    ----------
    regs : sequence of RegularizedOperator or KamState
        One per sample of ``grid``.
    gamma, tau :
        Melnikov constants.
    nu_max, stop_tol :
        Iteration cap and the ``delta_{s0}`` stopping threshold.
    c0 :
        Exponent in the smallness check ``N0^{c0} delta_{s0+beta} / gamma <= 1``,
        reported and not enforced.
    threads :
        Worker threads over samples.
    """
    regs = list(regs)
    if len(regs) != grid.samples.size:
        raise ValueError("one regularized operator per sample is required")
    states = [r if isinstance(r, KamState) else KamState.from_regularized(r, n0, s0, beta, tau, lkeep) for r in regs]
    s0v, betav = states[0].s0, states[0].beta

    def run(st):
        return _run_sample(st, gamma, tau, nu_max, stop_tol, floor)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            runs = list(ex.map(run, states))
    else:
        runs = [run(st) for st in states]

    S = len(states)
    V = max(len(h) for h, _, _ in runs)
    J = basis_modes(states[0].basis, states[0].trunc.nx).size
    r = np.zeros((2, J, S, V), complex)
    for i, (hist, _, _) in enumerate(runs):
        for v in range(V):
            r[:, :, i, v] = hist[min(v, len(hist) - 1)].r.reshape(2, J)
    mask = np.array([ok for _, ok, _ in runs], bool) & grid.mask
    masks = [[mg for mg in margins] for _, _, margins in runs]

    # eigenvalues of excluded samples: piecewise-linear in lambda
    empty = not mask.any()
    if not empty and not mask.all():
        xs = grid.samples[mask]
        for v in range(V):
            for a in range(2):
                for j in range(J):
                    vals = r[a, j, mask, v]
                    r[a, j, ~mask, v] = (np.interp(grid.samples[~mask], xs, vals.real)
                                         + 1j * np.interp(grid.samples[~mask], xs, vals.imag))
    if empty:
        log.warning("no sample survives the second Melnikov masks")
    table = EigenvalueTable([st.m for st in states], r, basis_modes(states[0].basis, states[0].trunc.nx),
                            grid.samples)

    # a sample excluded at iteration k has k + 1 states and leaves the count after k
    def alive(i, v):
        return mask[i] or v < len(runs[i][0]) - 1

    trace = []
    for v in range(V):
        idx = [i for i in range(S) if alive(i, v)] or list(range(S))
        hs = [runs[i][0][min(v, len(runs[i][0]) - 1)] for i in idx]
        d_s0 = max(h.delta(s0v) for h in hs)
        d_sb = max(h.delta(s0v + betav) for h in hs)
        lip = 0.0
        for (a, ha), (b, hb) in zip(zip(idx[:-1], hs[:-1]), zip(idx[1:], hs[1:])):
            diff = decay_norm(ha.E1 - hb.E1, s0v).value + decay_norm(ha.E0 - hb.E0, s0v).value
            lip = max(lip, diff / abs(grid.samples[a] - grid.samples[b]))
        d_s0 += gamma * lip
        n_v = truncation_schedule(v, states[0].n0, states[0].cap)
        trace.append((v, n_v, float(d_s0), float(d_sb), float(np.abs(r[..., v]).max()),
                      sum(1 for i in range(S) if alive(i, v))))

    finals = [h[-1] for h, _, _ in runs]
    phi_norms = np.array([decay_norm(st.phi() - OpMatrix.identity(st.trunc, st.basis), s0v).value for st in finals])
    for i, val in enumerate(phi_norms):
        log.info("sample %d: |Phi_inf - 1|_s0 = %.3e", i, val)
    smallness = float(n0 ** c0 * trace[0][3] / gamma)
    if smallness > 1:
        log.warning("smallness condition N0^C0 delta/gamma = %.3e exceeds 1", smallness)
    # tail estimate: the last correction, sum of a geometric tail
    if V > 1:
        last = np.abs(r[..., -1] - r[..., -2]).max(axis=(0, 1))
    else:
        last = np.zeros(S)
    tail = np.array([st.delta(s0v) for st in finals]) + last
    return KamResult(table, mask, masks, finals, trace, empty, phi_norms, smallness, tail, grid,
                     float(gamma), float(tau))


def eigenvalue_variation(table_u: EigenvalueTable, table_v: EigenvalueTable, distance, eps=1.0):
    """Compare corrections of two tables at their last iteration.

    Returns ``max_h |r_h(u) - r_h(v)|`` and its ratio to ``eps * distance``
    (``nan`` when the denominator vanishes and the difference is zero).
    """
    if table_u.r.shape[:3] != table_v.r.shape[:3]:
        raise ValueError(f"table shapes differ: {table_u.r.shape} vs {table_v.r.shape}")
    diff = float(np.abs(table_u.r[..., -1] - table_v.r[..., -1]).max()) if table_u.r.size else 0.0
    denom = eps * distance
    if denom > 0:
        ratio = diff / denom
    else:
        ratio = 0.0 if diff == 0 else np.inf
    return {"max_diff": diff, "ratio": ratio, "distance": float(distance), "eps": float(eps)}


__all__ = [
    "DIVISOR_FLOOR",
    "EigenvalueTable",
    "HomologicalSolution",
    "KamResult",
    "KamState",
    "MelnikovMask",
    "conjugation_defect",
    "divisors",
    "eigenvalue_variation",
    "entry_diagonal",
    "kam_step",
    "reduce",
    "second_melnikov_mask",
    "sigma_diagonal",
    "solve_homological",
    "truncation_schedule",
]
