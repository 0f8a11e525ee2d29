"""Odd-sized collocation grids on the torus ``T^d x T``.

An odd grid of size ``2N+1`` per axis is in bijection with the truncation
box of half width ``N``, so grid values and :class:`SpectralField` objects on
:attr:`Collocation.trunc` carry the same information.  Derivatives, the
inverses of ``d_x`` and ``omega . d_phi`` and evaluation at shifted
arguments are all spectral.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import SmallDivisorError
from .spectral import SpectralField, Truncation, coeffs_to_grid, grid_points


@dataclass(frozen=True)
class Collocation:
    d: int
    nphi: int
    nx: int

    @classmethod
    def covering(cls, truncs, factor=4):
        """Grid with at least ``factor`` points per mode of every truncation."""
        d = truncs[0].d
        nphi = max(t.nphi for t in truncs)
        nx = max(t.nx for t in truncs)

        def half(n):
            return (factor * (2 * max(n, 1) + 1)) // 2

        return cls(d, half(nphi), half(nx))

    @property
    def trunc(self):
        return Truncation(self.d, self.nphi, self.nx)

    @property
    def shape(self):
        return (2 * self.nphi + 1,) * self.d + (2 * self.nx + 1,)

    @property
    def naxes(self):
        return self.d + 1

    def points(self):
        return grid_points(self.d, self.shape)

    # conversion --------------------------------------------------------------
    def values(self, f: SpectralField):
        if f.trunc.nphi > self.nphi or f.trunc.nx > self.nx:
            raise ValueError(f"field box {f.trunc} exceeds the collocation grid")
        return coeffs_to_grid(f.coeffs, f.trunc, self.shape)

    def field(self, values, trunc=None, parity=None):
        return SpectralField.from_grid(values, trunc or self.trunc, parity)

    # spectral helpers ----------------------------------------------------------
    def _axes(self, values):
        lead = np.ndim(values) - self.naxes
        return lead, tuple(range(lead, lead + self.naxes))

    def _wavenumbers(self):
        return [np.fft.fftfreq(m, 1.0 / m) for m in self.shape]

    def _spectral(self, values, factor):
        lead, axes = self._axes(values)
        c = np.fft.fftn(values, axes=axes)
        return np.fft.ifftn(c * factor, axes=axes)

    def _mesh(self):
        return np.meshgrid(*self._wavenumbers(), indexing="ij")

    def dx(self, values, order=1):
        k = self._mesh()[-1]
        return self._spectral(values, (1j * k) ** order)

    def omega_dphi(self, values, omega):
        mesh = self._mesh()
        w = sum(o * m for o, m in zip(np.atleast_1d(omega), mesh[:-1]))
        return self._spectral(values, 1j * w)

    def dphi(self, values, axis):
        return self._spectral(values, 1j * self._mesh()[axis])

    def dx_inverse(self, values):
        k = self._mesh()[-1]
        inv = np.zeros(k.shape, complex)
        inv[k != 0] = 1.0 / (1j * k[k != 0])
        return self._spectral(values, inv)

    def omega_dphi_inverse(self, values, omega, divisor_floor=0.0):
        """Invert ``omega . d_phi`` on ``l != 0``; returns values and min divisor."""
        mesh = self._mesh()
        w = sum(o * m for o, m in zip(np.atleast_1d(omega), mesh[:-1]))
        nonzero = np.zeros(w.shape, bool)
        for m in mesh[:-1]:
            nonzero |= m != 0
        absw = np.abs(w)
        min_div = float(absw[nonzero].min()) if nonzero.any() else np.inf
        if min_div <= divisor_floor:
            pos = np.argwhere(nonzero & (absw == min_div))[0]
            ell = tuple(int(mesh[i][tuple(pos)]) for i in range(self.d))
            raise SmallDivisorError(f"small divisor {min_div:.3e} at l={ell}", index=ell, divisor=min_div)
        inv = np.zeros(w.shape, complex)
        inv[nonzero] = 1.0 / (1j * w[nonzero])
        return self._spectral(values, inv), min_div

    def x_mean(self, values):
        return np.mean(values, axis=-1, keepdims=True)

    def phi_mean(self, values):
        lead, _ = self._axes(values)
        axes = tuple(range(lead, lead + self.d))
        return np.mean(values, axis=axes, keepdims=True)

    # evaluation at displaced arguments ---------------------------------------------
    def shift_x(self, values, shift):
        """Values of the interpolant at ``(phi, x + shift(phi, x))``."""
        lead, _ = self._axes(values)
        vals = np.asarray(values, complex)
        M = self.shape[-1]
        k = np.fft.fftfreq(M, 1.0 / M)
        c = np.fft.fft(vals, axis=-1) / M
        x = 2 * np.pi * np.arange(M) / M
        arg = x + np.asarray(shift, float)
        phase = np.exp(1j * arg[..., None] * k)  # grid + (K,)
        # c[..., phi, K] against phase[phi, x, K]
        out = np.einsum("...k,...xk->...x", c, phase)
        return out

    def shift_phi(self, values, disp, chunk=4096):
        """Values of the interpolant at ``(phi + disp(phi), x)``.

        ``disp`` has shape ``(d,) + phi-grid`` (no ``x`` dependence).
        """
        lead, _ = self._axes(values)
        vals = np.asarray(values, complex)
        d = self.d
        phi_shape = self.shape[:-1]
        M = self.shape[-1]
        P = int(np.prod(phi_shape))
        c = np.fft.fftn(vals, axes=tuple(range(lead, lead + d))) / P
        c = c.reshape(vals.shape[:lead] + (P, M))
        ks = np.stack([m.reshape(-1) for m in np.meshgrid(*self._wavenumbers()[:-1], indexing="ij")])
        pts = np.stack([p.reshape(-1) for p in np.meshgrid(*[2 * np.pi * np.arange(m) / m for m in phi_shape], indexing="ij")])
        pts = pts + np.asarray(disp, float).reshape(d, P)
        out = np.empty_like(c)
        for start in range(0, P, chunk):
            sl = slice(start, start + chunk)
            phase = np.exp(1j * pts[:, sl].T @ ks)  # (chunk, P)
            out[..., sl, :] = np.einsum("pq,...qx->...px", phase, c)
        return out.reshape(vals.shape)


__all__ = ["Collocation"]
