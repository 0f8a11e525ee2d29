"""Block matrices for linear operators on doubled spectral fields.

An operator is indexed by ``i = (p, sigma, j)`` with ``p`` a time-frequency
vector in the truncation box, ``sigma = +1, -1`` and ``j`` an x-mode of the
chosen basis:

* ``"sine"``: ``sin jx`` with ``j = 1..nx``;
* ``"cosine"``: ``cos jx`` with ``j = 0..nx``;
* ``"exp"``: ``exp(ikx)`` with ``k = -nx..nx``.

Toeplitz-in-time operators store one ``(2J, 2J)`` slab per difference
``l = p - p'`` with ``|l|_inf <= lmax``; rows and columns are ordered
``(sigma, j)`` with ``sigma = +1`` first.  The slab convention is that
``slab(l)`` maps the coefficient at ``p'`` to the coefficient at ``p' + l``,
i.e. ``(A u)(p) = sum_l slab(l) u(p - l)``.  Other operators fall back to a
dense ``(P 2J, P 2J)`` matrix over the box of ``P = (2 nphi + 1)^d`` times.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .constants import interp_constant
from .exceptions import ConvergenceError, NotDiagonallyDominantError
from .spectral import SpectralField, Truncation, grid_to_coeffs

BASES = ("sine", "cosine", "exp")


def basis_modes(basis, nx):
    """x-mode labels of a basis."""
    if basis == "sine":
        return np.arange(1, nx + 1)
    if basis == "cosine":
        return np.arange(0, nx + 1)
    if basis == "exp":
        return np.arange(-nx, nx + 1)
    raise ValueError(f"unknown basis {basis!r}")


def _project_basis(w, nx, basis):
    """Basis coefficients from exponential coefficients on the last axis."""
    pos = w[..., nx:]
    neg = w[..., : nx + 1][..., ::-1]
    if basis == "sine":
        return (1j * (pos - neg))[..., 1:]
    if basis == "cosine":
        out = pos + neg
        out[..., 0] = w[..., nx]
        return out
    return w


def basis_function(basis, j, x, derivative=0):
    """``d_x^derivative`` of the basis function of mode ``j`` at ``x``."""
    if basis == "sine":
        return float(j) ** derivative * np.sin(j * x + derivative * np.pi / 2)
    if basis == "cosine":
        return float(j) ** derivative * np.cos(j * x + derivative * np.pi / 2)
    return (1j * j) ** derivative * np.exp(1j * j * x)


def _box_slices(ell, n_out, n_in):
    """Slices ``out[p]`` and ``inp[p - ell]`` for ``|p| <= n_out``, ``|p - ell| <= n_in``."""
    out_sl, in_sl = [], []
    for e in ell:
        lo, hi = max(-n_out, e - n_in), min(n_out, e + n_in)
        if lo > hi:
            return None
        out_sl.append(slice(lo + n_out, hi + n_out + 1))
        in_sl.append(slice(lo - e + n_in, hi - e + n_in + 1))
    return tuple(out_sl), tuple(in_sl)


@dataclass(frozen=True)
class DecayProfile:
    """Off-diagonal decay norm at index ``s``; ``lip_value`` for families."""

    s: float
    value: float
    lip_value: float | None = None

    def weighted(self, gamma):
        return self.value + gamma * (self.lip_value or 0.0)


@dataclass(frozen=True)
class ReversibilityClass:
    tag: str
    witness: dict | None = None


@dataclass(frozen=True)
class OpMatrix:
    """Operator on doubled fields, Toeplitz slabs or a dense matrix.

    Parameters
    ----------
    trunc : Truncation
        Box of the fields the operator acts on.
    basis : {"sine", "cosine", "exp"}
    slabs : ndarray, optional
        Shape ``(2 lmax + 1,) * d + (2J, 2J)``.
    dense : ndarray, optional
        Shape ``(P 2J, P 2J)``, row index ``(p, sigma, j)`` in C order.
    defect : float
        Decay norm (s = 0) of the convolution tail dropped when this matrix
        was produced by a truncated product.
    """

    trunc: Truncation
    basis: str = "sine"
    slabs: np.ndarray | None = None
    dense: np.ndarray | None = None
    defect: float = 0.0

    def __post_init__(self):
        if self.basis not in BASES:
            raise ValueError(f"unknown basis {self.basis!r}")
        if (self.slabs is None) == (self.dense is None):
            raise ValueError("exactly one of slabs and dense must be given")
        n2 = 2 * self.nmodes
        if self.slabs is not None:
            s = np.asarray(self.slabs, complex)
            if s.ndim != self.trunc.d + 2 or s.shape[-2:] != (n2, n2) or len(set(s.shape[:-2])) != 1 or s.shape[0] % 2 != 1:
                raise ValueError(f"bad slab shape {s.shape}")
            s = s.copy()
            s.setflags(write=False)
            object.__setattr__(self, "slabs", s)
        else:
            m = np.asarray(self.dense, complex)
            size = self.nperiods * n2
            if m.shape != (size, size):
                raise ValueError(f"dense shape {m.shape} != {(size, size)}")
            m = m.copy()
            m.setflags(write=False)
            object.__setattr__(self, "dense", m)

    # shape helpers -------------------------------------------------------------
    @property
    def modes(self):
        return basis_modes(self.basis, self.trunc.nx)

    @property
    def nmodes(self):
        return self.modes.size

    @property
    def nperiods(self):
        return (2 * self.trunc.nphi + 1) ** self.trunc.d

    @property
    def toeplitz_in_time(self):
        return self.slabs is not None

    @property
    def lmax(self):
        if not self.toeplitz_in_time:
            return 2 * self.trunc.nphi
        return (self.slabs.shape[0] - 1) // 2

    def slab(self, ell):
        """Slab at ``ell`` (zero outside the stored band)."""
        ell = np.atleast_1d(ell)
        if np.max(np.abs(ell)) > self.lmax:
            return np.zeros((2 * self.nmodes,) * 2, complex)
        return self.slabs[tuple(int(e) + self.lmax for e in ell)]

    def block(self, sigma, sigma_p):
        """The ``(sigma, sigma')`` block of every slab, shape ``(..., J, J)``."""
        J = self.nmodes
        r = slice(0, J) if sigma == 1 else slice(J, 2 * J)
        c = slice(0, J) if sigma_p == 1 else slice(J, 2 * J)
        if self.toeplitz_in_time:
            return self.slabs[..., r, c]
        P = self.nperiods
        m = self.dense.reshape(P, 2, J, P, 2, J)
        return m[:, 0 if sigma == 1 else 1, :, :, 0 if sigma_p == 1 else 1, :]

    # constructors ----------------------------------------------------------------
    @classmethod
    def zeros(cls, trunc, basis="sine", lmax=0):
        J = basis_modes(basis, trunc.nx).size
        return cls(trunc, basis, slabs=np.zeros((2 * lmax + 1,) * trunc.d + (2 * J, 2 * J), complex))

    @classmethod
    def identity(cls, trunc, basis="sine"):
        return cls.diagonal(np.ones(2 * basis_modes(basis, trunc.nx).size), trunc, basis)

    @classmethod
    def diagonal(cls, values, trunc, basis="sine"):
        """Time-independent diagonal operator; ``values`` has length 2J or shape (2, J)."""
        v = np.asarray(values, complex).reshape(-1)
        J = basis_modes(basis, trunc.nx).size
        if v.size != 2 * J:
            raise ValueError("diagonal needs 2J values")
        slabs = np.zeros((1,) * trunc.d + (2 * J, 2 * J), complex)
        slabs[(0,) * trunc.d] = np.diag(v)
        return cls(trunc, basis, slabs=slabs)

    @classmethod
    def from_dense(cls, matrix, trunc, basis="sine"):
        return cls(trunc, basis, dense=matrix)

    # conversion --------------------------------------------------------------------
    def to_dense(self):
        """Dense matrix over the truncation box."""
        if not self.toeplitz_in_time:
            return self.dense
        n, d, J2, L = self.trunc.nphi, self.trunc.d, 2 * self.nmodes, self.lmax
        ps = list(itertools.product(range(-n, n + 1), repeat=d))
        P = len(ps)
        out = np.zeros((P, J2, P, J2), complex)
        for a, p in enumerate(ps):
            for b, q in enumerate(ps):
                ell = [pi - qi for pi, qi in zip(p, q)]
                if max(abs(e) for e in ell) <= L:
                    out[a, :, b, :] = self.slabs[tuple(e + L for e in ell)]
        return out.reshape(P * J2, P * J2)

    def as_dense(self):
        return OpMatrix(self.trunc, self.basis, dense=self.to_dense())

    def with_lmax(self, lmax):
        """Crop or zero-pad the stored band."""
        if not self.toeplitz_in_time:
            raise ValueError("dense matrix has no slab band")
        L, d = self.lmax, self.trunc.d
        if lmax == L:
            return self
        J2 = 2 * self.nmodes
        out = np.zeros((2 * lmax + 1,) * d + (J2, J2), complex)
        m = min(L, lmax)
        src = tuple(slice(L - m, L + m + 1) for _ in range(d))
        dst = tuple(slice(lmax - m, lmax + m + 1) for _ in range(d))
        out[dst] = self.slabs[src]
        return OpMatrix(self.trunc, self.basis, slabs=out)

    # algebra ------------------------------------------------------------------------
    def _check_compatible(self, other):
        if self.trunc != other.trunc or self.basis != other.basis:
            raise ValueError("operators act on different spaces")

    def _combine(self, other, op):
        self._check_compatible(other)
        if self.toeplitz_in_time and other.toeplitz_in_time:
            L = max(self.lmax, other.lmax)
            return OpMatrix(self.trunc, self.basis, slabs=op(self.with_lmax(L).slabs, other.with_lmax(L).slabs))
        return OpMatrix(self.trunc, self.basis, dense=op(self.to_dense(), other.to_dense()))

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, c):
        if self.toeplitz_in_time:
            return OpMatrix(self.trunc, self.basis, slabs=self.slabs * c, defect=abs(c) * self.defect)
        return OpMatrix(self.trunc, self.basis, dense=self.dense * c)

    def __mul__(self, c):
        if isinstance(c, OpMatrix):
            return NotImplemented
        return self.scale(c)

    __rmul__ = __mul__

    def sigma_mix(self, m):
        """Left-multiply by the constant 2x2 matrix ``m`` acting on ``sigma``."""
        J = self.nmodes
        big = np.kron(np.asarray(m, complex), np.eye(J))
        if self.toeplitz_in_time:
            return OpMatrix(self.trunc, self.basis, slabs=big @ self.slabs)
        P = self.nperiods
        return OpMatrix(self.trunc, self.basis, dense=np.kron(np.eye(P), big) @ self.dense)

    def right_diagonal(self, values):
        """``A @ diag(values)`` for a time-independent diagonal (length 2J)."""
        v = np.asarray(values, complex).reshape(-1)
        if self.toeplitz_in_time:
            return OpMatrix(self.trunc, self.basis, slabs=self.slabs * v)
        return OpMatrix(self.trunc, self.basis, dense=self.dense * np.tile(v, self.nperiods))

    def left_diagonal(self, values):
        """``diag(values) @ A`` for a time-independent diagonal (length 2J)."""
        v = np.asarray(values, complex).reshape(-1)
        if self.toeplitz_in_time:
            return OpMatrix(self.trunc, self.basis, slabs=v[:, None] * self.slabs)
        return OpMatrix(self.trunc, self.basis, dense=np.tile(v, self.nperiods)[:, None] * self.dense)

    def matmul(self, other, lkeep=None):
        """Operator product ``self @ other``.

        Toeplitz products convolve slabs over ``l`` and keep
        ``|l|_inf <= lkeep`` (default ``2 nphi``, the widest band that acts
        inside the box).  The decay norm at ``s = 0`` of the dropped tail is
        stored in ``defect``.
        """
        self._check_compatible(other)
        if not (self.toeplitz_in_time and other.toeplitz_in_time):
            return OpMatrix(self.trunc, self.basis, dense=self.to_dense() @ other.to_dense())
        d, LA, LB = self.trunc.d, self.lmax, other.lmax
        lkeep = 2 * self.trunc.nphi if lkeep is None else lkeep
        J2 = 2 * self.nmodes
        LC = LA + LB
        full = np.zeros((2 * LC + 1,) * d + (J2, J2), complex)
        B = other.slabs
        for a in np.ndindex(*((2 * LA + 1,) * d)):
            sa = self.slabs[a]
            if not sa.any():
                continue
            dst = tuple(slice(ai, ai + 2 * LB + 1) for ai in a)
            full[dst] += sa @ B
        out = OpMatrix(self.trunc, self.basis, slabs=full)
        if LC <= lkeep:
            return out
        kept = out.with_lmax(lkeep)
        tail = out - kept.with_lmax(LC)
        defect = decay_norm(tail, 0.0).value
        return OpMatrix(self.trunc, self.basis, slabs=kept.slabs, defect=defect)

    def __matmul__(self, other):
        if isinstance(other, OpMatrix):
            return self.matmul(other)
        if isinstance(other, SpectralField):
            return self.apply(other)
        return NotImplemented

    # action on fields -----------------------------------------------------------
    def field_vector(self, f):
        """Basis coefficients of a doubled field, shape ``(2n+1,)*d + (2J,)``."""
        if not f.doubled:
            f = SpectralField.doubled_from(f)
        f = f.retruncate(self.trunc)
        comps = [_project_basis(np.asarray(c), self.trunc.nx, self.basis) for c in f.coeffs]
        return np.concatenate(comps, axis=-1)

    def vector_field(self, vec, parity=None):
        """Inverse of :meth:`field_vector`."""
        J, nx = self.nmodes, self.trunc.nx
        comps = []
        for half in (vec[..., :J], vec[..., J:]):
            if self.basis == "sine":
                c = np.concatenate([np.zeros(half.shape[:-1] + (1,), complex), half], axis=-1)
                comps.append(SpectralField.from_sine(c, self.trunc).coeffs)
            elif self.basis == "cosine":
                comps.append(SpectralField.from_cosine(half, self.trunc).coeffs)
            else:
                comps.append(half)
        assert len(comps) == 2 and comps[0].shape[-1] == 2 * nx + 1
        return SpectralField(np.stack(comps), self.trunc, parity)

    def apply_vector(self, vec):
        n, d = self.trunc.nphi, self.trunc.d
        if not self.toeplitz_in_time:
            flat = vec.reshape(-1)
            return (self.dense @ flat).reshape(vec.shape)
        out = np.zeros(vec.shape, complex)
        L = self.lmax
        for idx in np.ndindex(*((2 * L + 1,) * d)):
            sl = self.slabs[idx]
            if not sl.any():
                continue
            ell = [i - L for i in idx]
            pair = _box_slices(ell, n, n)
            if pair is None:
                continue
            o, i = pair
            out[o] += vec[i] @ sl.T
        return out

    def apply(self, f, parity=None):
        """Action on a doubled field, projected back onto the basis."""
        return self.vector_field(self.apply_vector(self.field_vector(f)), parity)

    # serialisation -----------------------------------------------------------------
    def to_dict(self):
        J = self.nmodes
        base = {
            "toeplitz": self.toeplitz_in_time,
            "basis": self.basis,
            "d": self.trunc.d,
            "Nphi": self.trunc.nphi,
            "Nx": self.trunc.nx,
            "lmax": self.lmax,
            "defect": self.defect,
            "blocks": [],
        }
        for a, sigma in enumerate((1, -1)):
            for b, sigma_p in enumerate((1, -1)):
                blk = self.block(sigma, sigma_p)
                if self.toeplitz_in_time:
                    for idx in np.ndindex(*blk.shape[:-2]):
                        m = blk[idx]
                        if m.any():
                            base["blocks"].append({
                                "sigma": sigma, "sigma_p": sigma_p,
                                "ell": [i - self.lmax for i in idx],
                                "re": m.real.tolist(), "im": m.imag.tolist(),
                            })
                else:
                    P = self.nperiods
                    for p in range(P):
                        for q in range(P):
                            m = blk[p, :, q, :]
                            if m.any():
                                base["blocks"].append({
                                    "sigma": sigma, "sigma_p": sigma_p, "p": p, "p_prime": q,
                                    "re": m.real.tolist(), "im": m.imag.tolist(),
                                })
        assert J == self.nmodes
        return base

    @classmethod
    def from_dict(cls, obj):
        trunc = Truncation(int(obj["d"]), int(obj["Nphi"]), int(obj["Nx"]))
        basis = obj["basis"]
        J = basis_modes(basis, trunc.nx).size
        off = {1: 0, -1: J}
        if obj["toeplitz"]:
            L = int(obj["lmax"])
            slabs = np.zeros((2 * L + 1,) * trunc.d + (2 * J, 2 * J), complex)
            for blk in obj["blocks"]:
                idx = tuple(e + L for e in blk["ell"])
                r, c = off[blk["sigma"]], off[blk["sigma_p"]]
                slabs[idx][r:r + J, c:c + J] = np.array(blk["re"]) + 1j * np.array(blk["im"])
            return cls(trunc, basis, slabs=slabs, defect=float(obj.get("defect", 0.0)))
        P = (2 * trunc.nphi + 1) ** trunc.d
        m = np.zeros((P, 2 * J, P, 2 * J), complex)
        for blk in obj["blocks"]:
            r, c = off[blk["sigma"]], off[blk["sigma_p"]]
            m[blk["p"], r:r + J, blk["p_prime"], c:c + J] = np.array(blk["re"]) + 1j * np.array(blk["im"])
        return cls(trunc, basis, dense=m.reshape(P * 2 * J, P * 2 * J))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# assembly of multiplication operators
# ---------------------------------------------------------------------------

def coefficient_matrix(values, trunc, basis="sine", lmax=None, derivative=0):
    """Toeplitz matrix of multiplication by a 2x2 matrix of grid functions.

    Parameters
    ----------
    values : array_like
        Shape ``(2, 2) + grid``; entry ``[a, b]`` multiplies component ``b``
        into component ``a`` (index 0 is ``sigma = +1``).  ``None`` entries of
        a nested list are treated as zero.
    trunc : Truncation
        Box the operator acts on.
    lmax : int, optional
        Stored band, default ``2 nphi`` capped by the grid resolution.
    derivative : int
        Compose with ``d_x^derivative`` on the right (the basis function is
        differentiated before multiplication).
    """
    if isinstance(values, (list, tuple)):
        grid = next(np.shape(v) for row in values for v in row if v is not None)
        values = np.array([[np.zeros(grid) if v is None else v for v in row] for row in values], complex)
    values = np.asarray(values, complex)
    grid = values.shape[2:]
    d = trunc.d
    if len(grid) != d + 1:
        raise ValueError("grid dimension mismatch")
    lmax = 2 * trunc.nphi if lmax is None else lmax
    lmax = min(lmax, min((m - 1) // 2 for m in grid[:-1]))
    modes = basis_modes(basis, trunc.nx)
    J = modes.size
    x = 2 * np.pi * np.arange(grid[-1]) / grid[-1]
    shape = (-1,) + (1,) * d + (grid[-1],)
    funcs = np.stack([basis_function(basis, j, x, derivative) for j in modes]).reshape(shape)
    box = Truncation(d, lmax, trunc.nx)
    slabs = np.zeros((2 * lmax + 1,) * d + (2 * J, 2 * J), complex)
    for a in range(2):
        for b in range(2):
            v = values[a, b]
            if not v.any():
                continue
            w = grid_to_coeffs(v[None] * funcs, box)
            proj = _project_basis(w, trunc.nx, basis)
            # proj[j', l..., j] -> slab[l..., j, j']
            blk = np.moveaxis(proj, 0, -1)
            slabs[..., a * J:(a + 1) * J, b * J:(b + 1) * J] = blk
    return OpMatrix(trunc, basis, slabs=slabs)


def multiplication_matrix(a, basis="sine", trunc=None, lmax=None):
    """Matrix of pointwise multiplication by ``a`` on doubled fields.

    A scalar field acts as ``(u, v) -> (a u, conj(a) v)`` so that the subspace
    ``v = conj(u)`` is preserved; a doubled field ``(a+, a-)`` acts
    componentwise.
    """
    trunc = trunc or a.trunc
    lmax = a.trunc.nphi if lmax is None else lmax
    nphi = max(a.trunc.nphi, lmax)
    grid = (2 * nphi + 2,) * trunc.d + (2 * (a.trunc.nx + trunc.nx) + 2,)
    if a.doubled:
        plus, minus = a.component(1).grid(grid), a.component(-1).grid(grid)
    else:
        plus = a.grid(grid)
        minus = a.conj_reflect().grid(grid)
    zero = np.zeros(grid, complex)
    return coefficient_matrix(np.array([[plus, zero], [zero, minus]]), trunc, basis, lmax)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def _offsets(modes, signed):
    diff = modes[:, None] - modes[None, :]
    return diff if signed else np.abs(diff)


def _offset_sup(abs2, J, modes, signed=False):
    """Per ``(sigma, sigma', h_x)`` sup over entries with x-offset ``h_x``.

    ``abs2`` has trailing shape ``(2J, 2J)``; the result has trailing shape
    ``(2, 2, M)`` together with the offset labels of its last axis.  The
    offset is ``|j - j'|`` for sine/cosine and the signed ``k - k'`` for the
    exponential basis.
    """
    lead = abs2.shape[:-2]
    a = abs2.reshape(lead + (2, J, 2, J))
    a = np.moveaxis(a, -2, -3)  # (..., 2, 2, J, J)
    diff = _offsets(modes, signed)
    labels = np.unique(diff)
    out = np.zeros(lead + (2, 2, labels.size))
    for i, m in enumerate(labels):
        out[..., i] = np.max(np.where(diff == m, a, 0.0), axis=(-1, -2))
    return out, labels


def decay_norm(A: OpMatrix, s) -> DecayProfile:
    """Off-diagonal decay norm ``|A|_s``.

    For each block ``(sigma, sigma')``, the sup of ``|entry|^2`` is taken over
    entries sharing the difference ``h = (|j - j'|, l - l')`` and weighted by
    ``<h>^{2s}`` with ``<h> = max(|l - l'|_inf, |j - j'|, 1)``; the result is
    the square root of the largest block sum.  In the exponential basis the
    x-offset ``k - k'`` keeps its sign.
    """
    if s < 0:
        raise ValueError("decay index must be non-negative")
    J, modes, d = A.nmodes, A.modes, A.trunc.d
    signed = A.basis == "exp"
    if A.toeplitz_in_time:
        sup, labels = _offset_sup(np.abs(A.slabs) ** 2, J, modes, signed)  # (ells..., 2, 2, M)
        L = A.lmax
    else:
        n = A.trunc.nphi
        L = 2 * n
        P = A.nperiods
        blocks = np.abs(A.dense.reshape(P, 2 * J, P, 2 * J)) ** 2
        per, labels = _offset_sup(np.moveaxis(blocks, 2, 1), J, modes, signed)  # (P, P, 2, 2, M)
        ps = np.array(list(itertools.product(range(-n, n + 1), repeat=d))).reshape(P, d)
        ell = ps[:, None, :] - ps[None, :, :] + L
        flat = np.ravel_multi_index(tuple(np.moveaxis(ell, -1, 0)), (2 * L + 1,) * d)
        sup = np.zeros(((2 * L + 1) ** d,) + per.shape[2:])
        np.maximum.at(sup, flat.reshape(-1), per.reshape((-1,) + per.shape[2:]))
        sup = sup.reshape((2 * L + 1,) * d + per.shape[2:])
    ells = np.meshgrid(*[np.arange(-L, L + 1)] * d, indexing="ij")
    lsize = np.zeros(ells[0].shape, int)
    for e in ells:
        lsize = np.maximum(lsize, np.abs(e))
    w = np.maximum(np.maximum(lsize[..., None], np.abs(labels)), 1).astype(float) ** (2 * s)
    totals = np.sum(sup * w[..., None, None, :], axis=tuple(range(d)) + (d + 2,))
    return DecayProfile(float(s), float(np.sqrt(totals.max())))


def decay_norm_lip(family, samples, s) -> DecayProfile:
    """Sup and Lipschitz decay norms of a parameter family (all sample pairs)."""
    family = list(family)
    samples = np.asarray(samples, float)
    if not family or len(family) != samples.size:
        raise ValueError("family and samples must be non-empty and aligned")
    sup = max(decay_norm(A, s).value for A in family)
    lip = 0.0
    for a, b in itertools.combinations(range(len(family)), 2):
        lip = max(lip, decay_norm(family[a] - family[b], s).value / abs(samples[a] - samples[b]))
    return DecayProfile(float(s), sup, lip)


# ---------------------------------------------------------------------------
# structural operations
# ---------------------------------------------------------------------------

def phase_slice(A: OpMatrix, phi) -> np.ndarray:
    """``A(phi) = sum_l A(l) exp(i l.phi)`` as a ``(2J, 2J)`` matrix."""
    if not A.toeplitz_in_time:
        raise ValueError("phase slice needs a Toeplitz-in-time matrix")
    d, L = A.trunc.d, A.lmax
    phi = np.broadcast_to(np.atleast_1d(np.asarray(phi, float)), (d,))
    ells = np.meshgrid(*[np.arange(-L, L + 1)] * d, indexing="ij")
    phase = np.exp(1j * sum(e * p for e, p in zip(ells, phi)))
    return np.tensordot(phase, A.slabs, axes=(tuple(range(d)), tuple(range(d))))


def phase_decay_norm(M, modes, s, signed=False):
    """Decay norm of a phase-space matrix over ``(sigma, j)``."""
    J = len(modes)
    sup, labels = _offset_sup(np.abs(M) ** 2, J, np.asarray(modes), signed)
    w = np.maximum(np.abs(labels), 1).astype(float) ** (2 * s)
    return float(np.sqrt(np.max(np.sum(sup * w, axis=-1))))


def smooth_truncate(A: OpMatrix, n) -> OpMatrix:
    """Zero every entry with ``|l - l'|_inf > n``."""
    d = A.trunc.d
    if A.toeplitz_in_time:
        L = A.lmax
        if n >= L:
            return A
        ells = np.meshgrid(*[np.arange(-L, L + 1)] * d, indexing="ij")
        keep = np.ones(ells[0].shape, bool)
        for e in ells:
            keep &= np.abs(e) <= n
        return OpMatrix(A.trunc, A.basis, slabs=A.slabs * keep[..., None, None])
    P, J2, m = A.nperiods, 2 * A.nmodes, A.trunc.nphi
    ps = np.array(list(itertools.product(range(-m, m + 1), repeat=d))).reshape(P, d)
    dist = np.max(np.abs(ps[:, None, :] - ps[None, :, :]), axis=-1)
    keep = np.kron(dist <= n, np.ones((J2, J2), bool))
    return OpMatrix(A.trunc, A.basis, dense=A.dense * keep)


def neumann_invert(psi: OpMatrix, s0, tol=1e-12, max_terms=200, c_s0=None, lkeep=None) -> OpMatrix:
    """``(1 + psi)^{-1}`` by the Neumann series ``sum_k (-psi)^k``.

    The series stops once the geometric tail bound
    ``(C q)^{n+1} / (C (1 - C q))`` with ``q = |psi|_{s0}`` drops below
    ``tol``; terms are then added while the residual
    ``|(1 + psi) result - 1|_{s0}`` is above ``tol`` and still decreasing.

    Raises
    ------
    NotDiagonallyDominantError
        If ``C(s0) |psi|_{s0} > 1/2``.
    ConvergenceError
        If ``max_terms`` is reached or the residual exceeds ``tol``.
    """
    c = interp_constant(s0) if c_s0 is None else c_s0
    q = decay_norm(psi, s0).value
    if c * q > 0.5:
        raise NotDiagonallyDominantError(f"C(s0)|psi|_s0 = {c * q:.3e} > 1/2")
    one = OpMatrix.identity(psi.trunc, psi.basis)
    if not psi.toeplitz_in_time:
        one = one.as_dense()
    total, term = one, one
    neg = psi.scale(-1.0)
    n = 0
    while True:
        if q == 0 or (c * q) ** (n + 1) / (c * (1 - c * q)) <= tol:
            break
        if n >= max_terms:
            raise ConvergenceError(f"Neumann series not converged in {max_terms} terms")
        term = neg.matmul(term, lkeep) if neg.toeplitz_in_time else neg.matmul(term)
        total = total + term
        n += 1
        if decay_norm(term, s0).value == 0:
            break
    resid = decay_norm((one + psi).matmul(total, lkeep) - one, s0).value
    # the tail bound uses a calibrated constant; keep adding terms while that helps
    while resid > tol and n < max_terms:
        term = neg.matmul(term, lkeep) if neg.toeplitz_in_time else neg.matmul(term)
        total = total + term
        n += 1
        new = decay_norm((one + psi).matmul(total, lkeep) - one, s0).value
        if new >= resid:
            break
        resid = new
    if resid > tol:
        raise ConvergenceError(f"Neumann residual {resid:.3e} above tolerance {tol:.1e}")
    return total


def _swap_sigma(m, J):
    """Exchange ``sigma -> -sigma`` on rows and columns of ``(..., 2J, 2J)``."""
    perm = np.r_[J:2 * J, 0:J]
    return m[..., perm, :][..., :, perm]


def classify_reversibility(A: OpMatrix, rtol=1e-12) -> ReversibilityClass:
    """Check the reality/sign conditions entrywise.

    Reversibility preserving: real entries and
    ``conj(A_{sigma,j}^{sigma',j'}(-l)) = A_{-sigma,j}^{-sigma',j'}(l)``.
    Reversible: imaginary entries and the same conjugation relation.
    """
    J = A.nmodes
    if A.toeplitz_in_time:
        m = A.slabs
        flipped = np.conj(_swap_sigma(np.flip(m, axis=tuple(range(A.trunc.d))), J))
    else:
        m = A.dense
        P = A.nperiods
        blocks = m.reshape(P, 2 * J, P, 2 * J)
        blocks = np.moveaxis(blocks, 2, 1)[::-1, ::-1]
        flipped = np.conj(_swap_sigma(blocks, J))
        flipped = np.moveaxis(flipped, 1, 2).reshape(m.shape)
    scale = max(1.0, float(np.abs(m).max()) if m.size else 1.0)
    atol = rtol * scale
    rel = np.abs(flipped - m) > atol
    for tag, part in (("reversibility_preserving", np.imag(m)), ("reversible", np.real(m))):
        if not rel.any() and not (np.abs(part) > atol).any():
            return ReversibilityClass(tag)
    if rel.any():
        bad = rel
    else:
        bad = (np.abs(np.imag(m)) > atol) & (np.abs(np.real(m)) > atol)
        if not bad.any():
            bad = np.abs(np.imag(m)) > atol
    idx = tuple(int(i) for i in np.argwhere(bad)[0])
    return ReversibilityClass("neither", _witness(A, idx, m[idx]))


def project_reversible(A: OpMatrix) -> OpMatrix:
    """Nearest reversible operator: imaginary part averaged with its mirror.

    The mirror ``conj(A_{-sigma,-sigma'}(-l))`` is an involution, so the
    average satisfies the conjugation relation exactly; taking ``i Im``
    commutes with it.
    """
    if not A.toeplitz_in_time:
        raise ValueError("reversible projection needs a Toeplitz-in-time operator")
    J = A.nmodes
    m = 1j * np.imag(A.slabs)
    mirror = np.conj(_swap_sigma(np.flip(m, axis=tuple(range(A.trunc.d))), J))
    return OpMatrix(A.trunc, A.basis, slabs=0.5 * (m + mirror), defect=A.defect)


def _witness(A, idx, value):
    J, modes = A.nmodes, A.modes
    if A.toeplitz_in_time:
        ell = [i - A.lmax for i in idx[:-2]]
        r, c = idx[-2:]
    else:
        P = A.nperiods
        pr, r = divmod(idx[0], 2 * J)
        pc, c = divmod(idx[1], 2 * J)
        return {"p": int(pr), "p_prime": int(pc), "sigma": 1 if r < J else -1, "j": int(modes[r % J]),
                "sigma_p": 1 if c < J else -1, "j_p": int(modes[c % J]), "value": complex(value)}
    return {
        "ell": ell,
        "sigma": 1 if r < J else -1,
        "j": int(modes[r % J]),
        "sigma_p": 1 if c < J else -1,
        "j_p": int(modes[c % J]),
        "value": complex(value),
    }
