"""Truncated Fourier fields on T^d x T.

A field is stored by its exponential coefficients ``u[l, k]`` of
``exp(i l.phi + i k x)`` on a rectangular box ``|l|_inf <= nphi``,
``|k| <= nx``.  Parity-tagged scalar fields can be converted to and from the
sine or cosine basis.  Doubled fields carry a leading axis of length 2 holding
the ``sigma = +1`` and ``sigma = -1`` components.

Parity subspaces (odd/even in x plus a time-reversal reality condition):

* ``X``: odd in x, ``u(-phi, x) = conj(u(phi, x))``; real sine coefficients.
* ``Y``: even in x, same time condition; real cosine coefficients.
* ``Z``: odd in x, ``u(-phi, x) = -conj(u(phi, x))``; imaginary sine coefficients.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import convolve

from .exceptions import SmallDivisorError

PARITIES = ("X", "Y", "Z")


@dataclass(frozen=True)
class Truncation:
    """Box truncation ``|l|_inf <= nphi``, ``|k| <= nx`` on ``T^d x T``."""

    d: int
    nphi: int
    nx: int

    def __post_init__(self):
        if self.d < 1 or self.nphi < 0 or self.nx < 0:
            raise ValueError(f"invalid truncation {self}")

    @property
    def shape(self):
        return (2 * self.nphi + 1,) * self.d + (2 * self.nx + 1,)

    def ell_axes(self):
        """Integer frequency vectors along each phi axis."""
        return [np.arange(-self.nphi, self.nphi + 1)] * self.d

    def k_axis(self):
        return np.arange(-self.nx, self.nx + 1)

    def mesh(self):
        """Broadcastable (ell_1, ..., ell_d, k) integer meshes."""
        return np.meshgrid(*self.ell_axes(), self.k_axis(), indexing="ij")

    def union(self, other):
        return Truncation(self.d, max(self.nphi, other.nphi), max(self.nx, other.nx))


def bracket_weights(trunc: Truncation):
    """``<i> = max(|l|_inf, |k|, 1)`` on the truncation box."""
    mesh = trunc.mesh()
    w = np.abs(mesh[-1])
    for m in mesh[:-1]:
        w = np.maximum(w, np.abs(m))
    return np.maximum(w, 1)


def _resize(arr, old_n, new_n, axis):
    """Crop or zero-pad a centred axis from half-width old_n to new_n."""
    if new_n == old_n:
        return arr
    if new_n < old_n:
        cut = old_n - new_n
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(cut, arr.shape[axis] - cut)
        return arr[tuple(sl)]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (new_n - old_n, new_n - old_n)
    return np.pad(arr, pad)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Truncated Fourier coefficients with an optional parity tag.

    Parameters
    ----------
    coeffs : ndarray
        Complex exponential coefficients, shape ``trunc.shape`` for a scalar
        field or ``(2,) + trunc.shape`` for a doubled field.
    trunc : Truncation
    parity : {"X", "Y", "Z", None}
    """

    coeffs: np.ndarray
    trunc: Truncation
    parity: str | None = None

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape not in (self.trunc.shape, (2,) + self.trunc.shape):
            raise ValueError(f"coeff shape {c.shape} does not match {self.trunc}")
        if self.parity not in PARITIES + (None,):
            raise ValueError(f"unknown parity {self.parity!r}")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    # construction -----------------------------------------------------------
    @classmethod
    def zeros(cls, trunc, doubled=False, parity=None):
        shape = ((2,) if doubled else ()) + trunc.shape
        return cls(np.zeros(shape, complex), trunc, parity)

    @classmethod
    def from_modes(cls, trunc, modes, parity=None):
        """Build a scalar field from ``{(l_1..l_d, k): value}``."""
        c = np.zeros(trunc.shape, complex)
        for key, val in modes.items():
            idx = tuple(int(i) + trunc.nphi for i in key[:-1]) + (int(key[-1]) + trunc.nx,)
            c[idx] += val
        return cls(c, trunc, parity)

    @classmethod
    def from_sine(cls, coeffs, trunc, parity="X"):
        """From sine coefficients ``c[l..., j]`` (j = 0..nx, j=0 ignored)."""
        c = np.asarray(coeffs, complex)
        out = np.zeros(c.shape[:-1] + (2 * trunc.nx + 1,), complex)
        half = c[..., 1:] / 2j
        out[..., trunc.nx + 1:] = half
        out[..., :trunc.nx] = -half[..., ::-1]
        return cls(out, trunc, parity)

    @classmethod
    def from_cosine(cls, coeffs, trunc, parity="Y"):
        """From cosine coefficients ``c[l..., j]`` (j = 0..nx)."""
        c = np.asarray(coeffs, complex)
        out = np.zeros(c.shape[:-1] + (2 * trunc.nx + 1,), complex)
        out[..., trunc.nx] = c[..., 0]
        half = c[..., 1:] / 2
        out[..., trunc.nx + 1:] = half
        out[..., :trunc.nx] = half[..., ::-1]
        return cls(out, trunc, parity)

    @classmethod
    def from_grid(cls, values, trunc, parity=None):
        """Project collocation values on a uniform grid to the truncation box."""
        return cls(grid_to_coeffs(values, trunc), trunc, parity)

    @classmethod
    def from_function(cls, func, trunc, grid=None, parity=None, doubled=False):
        """Sample ``func(phi, x)`` (broadcast arrays) on a grid and project."""
        grid = grid or default_grid(trunc)
        pts = grid_points(trunc.d, grid)
        vals = np.asarray(func(*pts), complex)
        if doubled:
            vals = np.broadcast_to(vals, (2,) + tuple(grid))
        else:
            vals = np.broadcast_to(vals, tuple(grid))
        return cls.from_grid(vals, trunc, parity)

    @classmethod
    def doubled_from(cls, u, parity=None):
        """Doubled field ``(u, conj(u))`` on the subspace U."""
        c = np.stack([u.coeffs, conj_reflect(u.coeffs, u.trunc.d + 1)])
        return cls(c, u.trunc, parity if parity is not None else u.parity)

    # basic views --------------------------------------------------------------
    @property
    def doubled(self):
        return self.coeffs.ndim == self.trunc.d + 2

    def component(self, sigma):
        if not self.doubled:
            raise ValueError("scalar field has no components")
        return SpectralField(self.coeffs[0 if sigma == 1 else 1], self.trunc, self.parity)

    def with_parity(self, parity):
        return replace(self, parity=parity)

    def mode(self, ell, k):
        ell = np.atleast_1d(ell)
        idx = tuple(int(i) + self.trunc.nphi for i in ell) + (int(k) + self.trunc.nx,)
        return self.coeffs[(Ellipsis,) + idx]

    def sine(self):
        """Sine-projection coefficients ``i (u_j - u_{-j})`` for j = 0..nx."""
        n = self.trunc.nx
        pos = self.coeffs[..., n:]
        neg = self.coeffs[..., : n + 1][..., ::-1]
        out = 1j * (pos - neg)
        out[..., 0] = 0.0
        return out

    def cosine(self):
        """Cosine-projection coefficients ``u_j + u_{-j}`` (j>=1), ``u_0``."""
        n = self.trunc.nx
        pos = self.coeffs[..., n:]
        neg = self.coeffs[..., : n + 1][..., ::-1]
        out = pos + neg
        out[..., 0] = self.coeffs[..., n]
        return out

    def retruncate(self, trunc):
        """Crop or zero-pad to another truncation (same d)."""
        if trunc.d != self.trunc.d:
            raise ValueError("dimension mismatch")
        c = self.coeffs
        off = 1 if self.doubled else 0
        for ax in range(trunc.d):
            c = _resize(c, self.trunc.nphi, trunc.nphi, ax + off)
        c = _resize(c, self.trunc.nx, trunc.nx, trunc.d + off)
        return SpectralField(c, trunc, self.parity)

    def grid(self, grid=None):
        """Values on a uniform collocation grid."""
        grid = grid or default_grid(self.trunc)
        return coeffs_to_grid(self.coeffs, self.trunc, grid)

    # algebra ------------------------------------------------------------------
    def _binary(self, other, op):
        if isinstance(other, SpectralField):
            t = self.trunc.union(other.trunc)
            a, b = self.retruncate(t), other.retruncate(t)
            par = self.parity if self.parity == other.parity else None
            return SpectralField(op(a.coeffs, b.coeffs), t, par)
        return NotImplemented

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __neg__(self):
        return SpectralField(-self.coeffs, self.trunc, self.parity)

    def __mul__(self, scalar):
        if isinstance(scalar, SpectralField):
            return multiply(self, scalar)
        par = self.parity if np.isreal(scalar) else None
        return SpectralField(self.coeffs * scalar, self.trunc, par)

    __rmul__ = __mul__

    def conj_reflect(self):
        """Coefficients of ``conj(u)``: ``c[l, k] -> conj(c[-l, -k])``."""
        return SpectralField(conj_reflect(self.coeffs, self.trunc.d + 1), self.trunc, self.parity)

    def dx(self, order=1):
        k = self.trunc.k_axis()
        return SpectralField(self.coeffs * (1j * k) ** order, self.trunc, None)

    def omega_dphi(self, omega):
        return SpectralField(self.coeffs * (1j * omega_dot_ell(self.trunc, omega)), self.trunc, None)

    # serialisation ------------------------------------------------------------
    def to_json(self):
        return json.dumps(field_to_dict(self))

    @classmethod
    def from_json(cls, text):
        return field_from_dict(json.loads(text))


def conj_reflect(c, naxes=None):
    """``c[l, k] -> conj(c[-l, -k])`` on the trailing ``naxes`` mode axes."""
    c = np.asarray(c)
    naxes = c.ndim if naxes is None else naxes
    return np.conj(np.flip(c, axis=tuple(range(c.ndim - naxes, c.ndim))))


def omega_dot_ell(trunc, omega):
    """Array ``omega . l`` broadcast on the truncation box (constant in k)."""
    omega = np.atleast_1d(np.asarray(omega, float))
    if omega.size != trunc.d:
        raise ValueError("omega has wrong dimension")
    mesh = trunc.mesh()
    return sum(w * m for w, m in zip(omega, mesh[:-1]))


# ---------------------------------------------------------------------------
# collocation grids
# ---------------------------------------------------------------------------

def default_grid(trunc, factor=4):
    """Grid sizes at least ``factor`` times the mode count, rounded to even."""
    def size(n):
        m = factor * (2 * n + 1)
        return m + (m % 2)
    return (size(trunc.nphi),) * trunc.d + (size(trunc.nx),)


def grid_points(d, grid):
    axes = [2 * np.pi * np.arange(m) / m for m in grid]
    return np.meshgrid(*axes, indexing="ij")


def coeffs_to_grid(coeffs, trunc, grid):
    """Evaluate the trigonometric polynomial on a uniform grid (exact)."""
    c = np.asarray(coeffs, complex)
    lead = c.ndim - (trunc.d + 1)
    halfs = [trunc.nphi] * trunc.d + [trunc.nx]
    for ax, (n, m) in enumerate(zip(halfs, grid)):
        if m < 2 * n + 1:
            raise ValueError(f"grid size {m} too small for half width {n}")
        left = m // 2 - n
        pad = [(0, 0)] * c.ndim
        pad[lead + ax] = (left, m - (2 * n + 1) - left)
        c = np.pad(c, pad)
    axes = tuple(range(lead, c.ndim))
    c = np.fft.ifftshift(c, axes=axes)
    return np.fft.ifftn(c, axes=axes) * np.prod(grid)


def grid_to_coeffs(values, trunc, grid=None):
    """Discrete Fourier coefficients of grid values, cropped to ``trunc``."""
    v = np.asarray(values, complex)
    lead = v.ndim - (trunc.d + 1)
    grid = v.shape[lead:]
    axes = tuple(range(lead, v.ndim))
    c = np.fft.fftshift(np.fft.fftn(v, axes=axes), axes=axes) / np.prod(grid)
    halfs = [trunc.nphi] * trunc.d + [trunc.nx]
    sl = [slice(None)] * lead
    for n, m in zip(halfs, grid):
        if m < 2 * n + 1:
            raise ValueError(f"grid size {m} too small for half width {n}")
        sl.append(slice(m // 2 - n, m // 2 + n + 1))
    return c[tuple(sl)]


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def sobolev_norm(f: SpectralField, s: float) -> float:
    """``(sum |u_i|^2 <i>^{2s})^{1/2}``; max over components for doubled fields."""
    if s < 0:
        raise ValueError("Sobolev index must be non-negative")
    w = bracket_weights(f.trunc).astype(float) ** (2 * s)
    if f.doubled:
        return max(float(np.sqrt(np.sum(np.abs(c) ** 2 * w))) for c in f.coeffs)
    return float(np.sqrt(np.sum(np.abs(f.coeffs) ** 2 * w)))


def lipschitz_norm(family, samples, s, gamma):
    """Weighted Lipschitz norm ``sup_lambda |f|_s + gamma * lip`` on a grid.

    The Lipschitz seminorm is the maximum difference quotient over all sample
    pairs.

    Parameters
    ----------
    family : sequence of SpectralField
        One field per parameter sample.
    samples : sequence of float
        Parameter values, same length as ``family``.
    """
    family = list(family)
    samples = np.asarray(samples, float)
    if len(family) < 1:
        raise ValueError("need at least one sample")
    if len(family) != samples.size:
        raise ValueError("family and samples differ in length")
    sup = max(sobolev_norm(f, s) for f in family)
    lip = 0.0
    for a, b in itertools.combinations(range(len(family)), 2):
        q = sobolev_norm(family[a] - family[b], s) / abs(samples[a] - samples[b])
        lip = max(lip, q)
    return sup + gamma * lip


# ---------------------------------------------------------------------------
# parity
# ---------------------------------------------------------------------------

def _flip_k(c):
    return np.flip(c, axis=-1)


def _project_scalar(c, target):
    if target == "Y":
        return np.real(0.5 * (c + _flip_k(c))).astype(complex)
    odd = 0.5 * (c - _flip_k(c))
    if target == "X":
        return 1j * np.imag(odd)
    if target == "Z":
        return np.real(odd).astype(complex)
    raise ValueError(f"unknown parity {target!r}")


def project_parity(f: SpectralField, target: str) -> SpectralField:
    """Orthogonal projection onto X, Y or Z (and onto U for doubled fields)."""
    if f.doubled:
        plus = 0.5 * (f.coeffs[0] + conj_reflect(f.coeffs[1]))
        plus = _project_scalar(plus, target)
        c = np.stack([plus, conj_reflect(plus)])
    else:
        c = _project_scalar(f.coeffs, target)
    return SpectralField(c, f.trunc, target)


def parity_defect(f: SpectralField, target: str, s: float = 0.0) -> float:
    """Sobolev distance from ``f`` to its projection on ``target``."""
    return sobolev_norm(SpectralField(f.coeffs - project_parity(f, target).coeffs, f.trunc), s)


# ---------------------------------------------------------------------------
# primitive operators
# ---------------------------------------------------------------------------

def multiply(a: SpectralField, b: SpectralField, trunc: Truncation | None = None) -> SpectralField:
    """Exact product by direct convolution of coefficient arrays.

    The full product lives on the sum of both truncations; ``trunc`` crops it.
    """
    if a.trunc.d != b.trunc.d:
        raise ValueError("dimension mismatch")
    full = Truncation(a.trunc.d, a.trunc.nphi + b.trunc.nphi, a.trunc.nx + b.trunc.nx)
    if a.doubled or b.doubled:
        ca = a.coeffs if a.doubled else np.stack([a.coeffs, a.coeffs])
        cb = b.coeffs if b.doubled else np.stack([b.coeffs, b.coeffs])
        c = np.stack([convolve(x, y, method="direct") for x, y in zip(ca, cb)])
    else:
        c = convolve(a.coeffs, b.coeffs, method="direct")
    out = SpectralField(c, full)
    return out.retruncate(trunc) if trunc is not None else out


def dx_inverse(f: SpectralField) -> SpectralField:
    """Zero-average primitive in x: divide mode k by ``ik``, drop ``k = 0``."""
    k = f.trunc.k_axis().astype(complex)
    inv = np.zeros_like(k)
    inv[k != 0] = 1.0 / (1j * k[k != 0])
    par = {"X": "Y", "Y": "X"}.get(f.parity)
    return SpectralField(f.coeffs * inv, f.trunc, par)


def omega_dphi_inverse(f: SpectralField, lam, omega_bar, divisor_floor=0.0):
    """Invert ``omega . d_phi`` with ``omega = lam * omega_bar`` on ``l != 0``.

    Returns
    -------
    field : SpectralField
        Mode ``l`` divided by ``i lam omega_bar . l``; ``l = 0`` mapped to 0.
    min_divisor : float
        Smallest ``|lam omega_bar . l|`` over ``l != 0`` in the box.
    """
    w = lam * omega_dot_ell(f.trunc, omega_bar)
    mesh = f.trunc.mesh()
    nonzero = np.zeros(w.shape, bool)
    for m in mesh[:-1]:
        nonzero |= m != 0
    absw = np.abs(w)
    min_div = float(absw[nonzero].min()) if nonzero.any() else np.inf
    if min_div < divisor_floor:
        pos = np.argwhere(nonzero & (absw == min_div))[0]
        ell = tuple(int(p) - f.trunc.nphi for p in pos[:-1])
        raise SmallDivisorError(f"small divisor {min_div:.3e} at l={ell}", index=ell, divisor=min_div)
    inv = np.zeros(w.shape, complex)
    inv[nonzero] = 1.0 / (1j * w[nonzero])
    return SpectralField(f.coeffs * inv, f.trunc, None), min_div


def field_truncate(f: SpectralField, n: int) -> SpectralField:
    """Smoothing projector: zero all modes with ``max(|l|, |k|) > n``."""
    size = np.zeros(f.trunc.shape, int)
    for m in f.trunc.mesh():
        size = np.maximum(size, np.abs(m))
    return SpectralField(f.coeffs * (size <= n), f.trunc, f.parity)


def x_average(f: SpectralField) -> SpectralField:
    """Keep only the ``k = 0`` modes."""
    c = np.zeros_like(f.coeffs)
    c[..., f.trunc.nx] = f.coeffs[..., f.trunc.nx]
    return SpectralField(c, f.trunc, None)


# ---------------------------------------------------------------------------
# parameter grid
# ---------------------------------------------------------------------------

def ell_vectors(d, n, include_zero=False):
    """All integer vectors with ``|l|_inf <= n`` in lexicographic order."""
    out = np.array(list(itertools.product(range(-n, n + 1), repeat=d)), dtype=int).reshape(-1, d)
    if not include_zero:
        out = out[np.any(out != 0, axis=1)]
    return out


def diophantine_margin(omega_bar, gamma0, n):
    """Smallest ``|omega_bar . l| |l|^d / gamma0`` over ``0 < |l|_inf <= n``."""
    omega_bar = np.atleast_1d(np.asarray(omega_bar, float))
    d = omega_bar.size
    ells = ell_vectors(d, n)
    if ells.size == 0:
        return np.inf
    size = np.max(np.abs(ells), axis=1).astype(float)
    return float(np.min(np.abs(ells @ omega_bar) * size ** d / gamma0))


@dataclass
class ParamGrid:
    """Finite parameter samples in ``[1/2, 3/2]`` with an admissibility mask.

    The base frequency is checked against ``|omega_bar . l| >= gamma0 |l|^{-d}``
    for ``0 < |l|_inf <= nphi`` at construction.
    """

    samples: np.ndarray
    gamma0: float
    tau: float
    omega_bar: np.ndarray
    nphi: int
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, float)
        self.omega_bar = np.atleast_1d(np.asarray(self.omega_bar, float))
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("samples must be a non-empty 1-d array")
        if np.any(np.diff(self.samples) <= 0):
            raise ValueError("samples must be strictly increasing")
        if self.samples[0] < 0.5 or self.samples[-1] > 1.5:
            raise ValueError("samples must lie in [1/2, 3/2]")
        if self.gamma0 <= 0:
            raise ValueError("gamma0 must be positive")
        if self.tau <= self.omega_bar.size:
            raise ValueError("tau must exceed d")
        if diophantine_margin(self.omega_bar, self.gamma0, self.nphi) < 1.0:
            raise ValueError("omega_bar fails the diophantine check")
        if self.mask is None:
            self.mask = np.ones(self.samples.size, bool)
        self.mask = np.asarray(self.mask, bool)

    @property
    def d(self):
        return self.omega_bar.size

    def with_mask(self, mask):
        return ParamGrid(self.samples, self.gamma0, self.tau, self.omega_bar, self.nphi, np.asarray(mask, bool))

    def surviving(self):
        return self.samples[self.mask]


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def _scalar_entries(f: SpectralField):
    t = f.trunc
    if f.parity in ("X", "Z"):
        arr, jmin = f.sine(), 0
    elif f.parity == "Y":
        arr, jmin = f.cosine(), 0
    else:
        arr, jmin = f.coeffs, -t.nx
    rows = []
    for idx in zip(*np.nonzero(arr)):
        ell = [int(i) - t.nphi for i in idx[:-1]]
        j = int(idx[-1]) + jmin
        v = arr[idx]
        rows.append(ell + [j, float(v.real), float(v.imag)])
    return rows


def field_to_dict(f: SpectralField):
    t = f.trunc
    out = {"d": t.d, "Nphi": t.nphi, "Nx": t.nx, "parity": f.parity}
    if f.doubled:
        out["doubled"] = True
        out["components"] = [_scalar_entries(f.component(s)) for s in (1, -1)]
    else:
        out["coeffs"] = _scalar_entries(f)
    return out


def _scalar_from_rows(rows, t, parity):
    if parity in ("X", "Z"):
        arr = np.zeros((2 * t.nphi + 1,) * t.d + (t.nx + 1,), complex)
        jmin = 0
    elif parity == "Y":
        arr = np.zeros((2 * t.nphi + 1,) * t.d + (t.nx + 1,), complex)
        jmin = 0
    else:
        arr = np.zeros(t.shape, complex)
        jmin = -t.nx
    for row in rows:
        ell, j, re, im = row[: t.d], row[t.d], row[t.d + 1], row[t.d + 2]
        idx = tuple(int(e) + t.nphi for e in ell) + (int(j) - jmin,)
        arr[idx] = complex(re, im)
    if parity in ("X", "Z"):
        return SpectralField.from_sine(arr, t, parity)
    if parity == "Y":
        return SpectralField.from_cosine(arr, t, parity)
    return SpectralField(arr, t, None)


def field_from_dict(obj):
    t = Truncation(int(obj["d"]), int(obj["Nphi"]), int(obj["Nx"]))
    parity = obj.get("parity")
    if obj.get("doubled"):
        comps = [_scalar_from_rows(rows, t, parity).coeffs for rows in obj["components"]]
        return SpectralField(np.stack(comps), t, parity)
    return _scalar_from_rows(obj["coeffs"], t, parity)
