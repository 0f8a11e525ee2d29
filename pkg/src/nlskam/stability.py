"""Linear stability of the reduced dynamics.

The reduced system ``d_t v + D v = 0`` with ``D = diag(mu)`` purely imaginary
is solved exactly, and solutions of the linearized equation are recovered by
transporting through the transformation chain at ``phi = omega t``.  The time
change ``phi -> phi + omega alpha(phi)`` becomes ``tau = t + alpha(omega t)``;
the remaining transformations act on functions of ``x`` at fixed ``phi``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .exceptions import ChainError, StabilityViolatedError
from .kam import KamState
from .opmatrix import phase_slice
from .regularizer import RegularizedOperator

IMAG_TOL = 1e-13


def sobolev_weights(modes, s):
    return np.maximum(np.abs(np.asarray(modes, float)), 1.0) ** s


def phase_norm(v, modes, s):
    """``H^s_x`` norm of a vector over ``(sigma, j)`` (both components)."""
    v = np.asarray(v)
    w = np.tile(sobolev_weights(modes, s), v.shape[-1] // len(modes))
    return np.sqrt(np.sum(np.abs(v * w) ** 2, axis=-1))


def _check_imaginary(mu, tol):
    mu = np.asarray(mu, complex)
    bad = np.abs(mu.real)
    if bad.size and bad.max() > tol * max(1.0, np.abs(mu).max()):
        k = int(np.argmax(bad))
        raise StabilityViolatedError(f"eigenvalue {k} has real part {mu.real.flat[k]:.3e}")
    return mu


def evolve_diagonal(v0, mu, times, tol=IMAG_TOL):
    """``v_j(t) = exp(-mu_j t) v_j(0)`` for each ``t``; shape ``(T,) + v0.shape``.

    Raises
    ------
    StabilityViolatedError
        If some ``mu_j`` is not purely imaginary (relative tolerance ``tol``).
    """
    mu = _check_imaginary(mu, tol)
    v0 = np.asarray(v0, complex)
    if mu.shape != v0.shape[-mu.ndim:]:
        raise ValueError(f"mu shape {mu.shape} does not match v0 shape {v0.shape}")
    t = np.asarray(times, float)
    # a purely imaginary exponent keeps every modulus exactly
    phase = np.exp(-1j * np.multiply.outer(t, mu.imag))
    return phase * v0


# ---------------------------------------------------------------------------
# phase-space slices of the chain
# ---------------------------------------------------------------------------

def _phi_interp(values, colloc, phi):
    """Trigonometric interpolant of grid ``values`` at the angle ``phi``; keeps the ``x`` axis."""
    vals = np.asarray(values)
    d = colloc.d
    lead = vals.ndim - colloc.naxes
    axes = tuple(range(lead, lead + d))
    P = int(np.prod(colloc.shape[:-1]))
    c = np.fft.fftn(vals, axes=axes) / P
    ks = np.meshgrid(*[np.fft.fftfreq(m, 1.0 / m) for m in colloc.shape[:-1]], indexing="ij")
    phase = np.exp(1j * sum(k * p for k, p in zip(ks, np.atleast_1d(phi))))
    out = np.tensordot(c, phase, axes=(axes, tuple(range(d))))
    # tensordot moves the x axis in front of nothing: result is lead + (Mx,)
    return out.real if np.isrealobj(vals) else out


def _to_values(c):
    M = c.shape[-1]
    return np.fft.ifft(np.fft.ifftshift(c, axes=-1), axis=-1) * M


def _to_coeffs(v):
    M = v.shape[-1]
    return np.fft.fftshift(np.fft.fft(v, axis=-1), axes=-1) / M


def _shift_row(vals, xi):
    """Interpolant of ``vals`` (last axis on the x-grid) at ``x + xi(x)``."""
    M = vals.shape[-1]
    k = np.fft.fftfreq(M, 1.0 / M)
    c = np.fft.fft(vals, axis=-1) / M
    x = 2 * np.pi * np.arange(M) / M
    return np.einsum("...k,xk->...x", c, np.exp(1j * np.outer(x + xi, k)))


@dataclass
class PhaseChain:
    """The chain ``T1 T2 [T3] T4 Phi`` sliced at fixed angles.

    States are exponential coefficients of shape ``(2, K)`` over the
    collocation ``x``-grid.  ``Phi`` acts on the sine coefficients of modes
    ``1..nx``; beyond the box it is the identity and the flow uses
    ``mu = -i sigma m j^2``.
    """

    reg: RegularizedOperator
    phi_op: object
    mu_box: np.ndarray

    @classmethod
    def build(cls, reg: RegularizedOperator, state: KamState | None = None, lkeep=None):
        if state is None:
            state = KamState.from_regularized(reg)
        if reg.L4.basis != "sine":
            raise ValueError("phase-space transport supports the sine basis")
        phi = state.phi(lkeep if lkeep is not None else 4 * state.cap)
        return cls(reg, phi, np.asarray(state.mu, complex))

    @property
    def colloc(self):
        return self.reg.V2.colloc

    @property
    def omega(self):
        return self.reg.lam * np.asarray(self.reg.omega_bar, float)

    @property
    def nx(self):
        return self.reg.L4.trunc.nx

    @property
    def K(self):
        return self.colloc.shape[-1]

    def _step(self, name):
        return next(s for s in self.reg.V2.steps if s.name == name)

    def mu_full(self):
        """Eigenvalue per ``(sigma, k)`` on the collocation ``x``-box."""
        n = (self.K - 1) // 2
        k = np.abs(np.arange(-n, n + 1))
        sig = np.array([1.0, -1.0])[:, None]
        mu = -1j * sig * self.reg.m * k[None, :] ** 2.0
        J = self.nx
        box = self.mu_box.reshape(2, J)
        for j in range(1, min(J, n) + 1):
            mu[:, n + j] = box[:, j - 1]
            mu[:, n - j] = box[:, j - 1]
        return mu

    def alpha(self, phi):
        g = self._step("T3").diffeo
        vals = g.shift_values[(Ellipsis, 0)][..., None]
        return float(_phi_interp(vals, self.colloc, phi)[0])

    def _matrix(self, name, phi, inverse):
        t = self._step(name)
        mat = t.inverse_matrix if inverse else t.matrix
        return _phi_interp(mat, self.colloc, phi)

    def _space(self, vals, phi, inverse):
        g = self._step("T2").diffeo
        xi = _phi_interp(g.inverse_values if inverse else g.shift_values, self.colloc, phi)
        return _shift_row(vals, xi)

    def _phi_block(self, c, phi, inverse):
        n, J = (self.K - 1) // 2, self.nx
        P = phase_slice(self.phi_op, phi)
        if inverse:
            P = np.linalg.inv(P)
        pos, neg = c[:, n + 1 : n + J + 1], c[:, n - J : n][:, ::-1]
        b = (1j * (pos - neg)).reshape(-1)
        nb = (P @ b).reshape(2, J)
        delta = (nb - b.reshape(2, J)) / (2j)
        out = c.copy()
        out[:, n + 1 : n + J + 1] += delta
        out[:, n - J : n] -= delta[:, ::-1]
        return out

    def outer(self, c, phi, inverse=False):
        """``T1 T2`` at ``phi`` (or ``T2^{-1} T1^{-1}``)."""
        v = _to_values(c)
        if inverse:
            v = np.einsum("abx,bx->ax", self._matrix("T1", phi, True), v)
            v = self._space(v, phi, True)
        else:
            v = self._space(v, phi, False)
            v = np.einsum("abx,bx->ax", self._matrix("T1", phi, False), v)
        return _to_coeffs(v)

    def inner(self, c, phi, inverse=False):
        """``T4 Phi`` at ``phi`` (or ``Phi^{-1} T4^{-1}``)."""
        if inverse:
            v = np.einsum("abx,bx->ax", self._matrix("T4", phi, True), _to_values(c))
            return self._phi_block(_to_coeffs(v), phi, True)
        c = self._phi_block(c, phi, False)
        v = np.einsum("abx,bx->ax", self._matrix("T4", phi, False), _to_values(c))
        return _to_coeffs(v)


def _embed(h0: np.ndarray, K):
    """Pad exponential coefficients ``(2, 2n+1)`` to ``(2, K)``."""
    h0 = np.asarray(h0, complex)
    n, N = (h0.shape[-1] - 1) // 2, (K - 1) // 2
    if n > N:
        raise ValueError("initial datum exceeds the collocation box")
    out = np.zeros((2, K), complex)
    out[:, N - n : N + n + 1] = h0
    return out


def random_datum(rng, n=8, top=4):
    """X-parity phase-space datum ``(2, 2n+1)`` on modes ``1..top`` with exponentially decaying amplitudes."""
    h = np.zeros((2, 2 * n + 1), complex)
    b = rng.standard_normal(top) * np.exp(-np.arange(1, top + 1))
    h[0, n + 1 : n + top + 1] = 1j * b
    h[0, n - top : n] = -1j * b[::-1]
    # the second component is the conjugate reflection of the first
    h[1] = np.conj(h[0][::-1])
    return h


def coeff_norm(c, s):
    """``H^s_x`` norm of exponential coefficients ``(2, K)``; both components."""
    n = (c.shape[-1] - 1) // 2
    w = sobolev_weights(np.arange(-n, n + 1), s)
    return float(np.sqrt(np.sum(np.abs(c * w) ** 2)))


@dataclass
class FlowTrace:
    times: np.ndarray
    norms: np.ndarray
    h0_norm: float
    roundtrip: float

    @property
    def ratios(self):
        return self.norms / self.h0_norm

    @property
    def K_upper(self):
        """``sup_t |h(t)| / |h(0)|``."""
        return float(self.ratios.max())

    @property
    def K_lower(self):
        return float(self.ratios.min())

    @property
    def amplitude(self):
        """``max_t | |h(t)| / |h(0)| - 1 |``."""
        return float(np.abs(self.ratios - 1).max())

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "norm"])
            for t, n in zip(self.times, self.norms):
                w.writerow([float(t), float(n)])


def conjugated_flow_norms(h0, chain: PhaseChain, times, s, tol=1e-10) -> FlowTrace:
    """Norm trace of the linearized flow started at ``h0``.

    ``h0`` holds exponential coefficients of shape ``(2, 2n+1)`` (the two
    components of a doubled phase-space field).  ``h0`` is mapped to reduced
    coordinates at ``t = 0``, evolved by ``exp(-D tau)`` and mapped back at
    every ``t`` with ``tau = t + alpha(omega t)``.

    Raises
    ------
    ChainError
        If transporting ``h0`` there and back at ``t = 0`` misses by more
        than ``tol`` (relative).
    """
    K = chain.K
    c0 = _embed(h0, K)
    om = chain.omega
    mu = _check_imaginary(chain.mu_full(), 1e-10)
    tau0 = chain.alpha(np.zeros_like(om))
    w0 = chain.outer(c0, np.zeros_like(om), inverse=True)
    v0 = chain.inner(w0, om * tau0, inverse=True)
    back = chain.outer(chain.inner(v0, om * tau0), np.zeros_like(om))
    h0n = coeff_norm(c0, s)
    rt = coeff_norm(back - c0, s) / max(h0n, np.finfo(float).tiny)
    if rt > tol:
        raise ChainError(f"round trip at t=0 misses by {rt:.3e} (tol {tol:.1e})")
    norms = []
    for t in np.asarray(times, float):
        phi = np.mod(om * t, 2 * np.pi)
        tau = t + chain.alpha(phi)
        v = np.exp(-1j * mu.imag * (tau - tau0)) * v0
        h = chain.outer(chain.inner(v, np.mod(om * tau, 2 * np.pi)), phi)
        norms.append(coeff_norm(h, s))
    return FlowTrace(np.asarray(times, float), np.array(norms), h0n, rt)


def amplitude_exponent(eps_pair, amp_pair):
    """Slope of ``log amplitude`` against ``log eps`` from two runs."""
    (e1, e2), (a1, a2) = eps_pair, amp_pair
    return float(np.log(a2 / a1) / np.log(e2 / e1))


__all__ = [
    "FlowTrace",
    "PhaseChain",
    "amplitude_exponent",
    "coeff_norm",
    "conjugated_flow_norms",
    "evolve_diagonal",
    "phase_norm",
    "random_datum",
]
