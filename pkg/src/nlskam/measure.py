"""Resonance sets in the parameter and the measure of excluded parameters.

For a triple ``(l, h, h')`` the divisor ``i lam omega_bar . l + mu_h - mu_h'``
is ``i psi(lam)`` with the real function
``psi(lam) = lam omega_bar . l + Im(mu_h - mu_h')``.  The resonance set is
the sub-level set ``|psi| < 2 gamma |sj^2 - s'j'^2| <l>^{-tau}``.  Between
table samples ``psi`` is taken piecewise linear, the same extension used for
the eigenvalues of excluded samples, so sub-level sets are exact unions of
intervals.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .kam import EigenvalueTable, reduce, truncation_schedule
from .spectral import ParamGrid, ell_vectors

log = logging.getLogger(__name__)

PRUNE_FACTOR = 8.0
SLOPE_FACTOR = 9.0
# |psi'| >= |Delta| / 9 gives interval length <= 2 thr / (|Delta| / 9) = 36 gamma <l>^{-tau}
INTERVAL_CONSTANT = 4.0 * SLOPE_FACTOR


@dataclass
class ResonanceSet:
    """Sub-level set of one triple.

    ``triple = (l, (sigma, j), (sigma', j'))``; a first-Melnikov set has
    ``h' = None``.  ``certified`` is false when the slope lower bound
    ``|Delta| / 9`` failed on a segment that produced an interval.
    """

    triple: tuple
    intervals: list
    method: str
    threshold: float
    pruned: bool = False
    certified: bool = True

    @property
    def length(self):
        return float(sum(b - a for a, b in self.intervals))

    @property
    def empty(self):
        return not self.intervals


def _delta(triple):
    _, (s, j), hp = triple
    if hp is None:
        return float(j * j)
    sp, jp = hp
    return float(s * j * j - sp * jp * jp)


def _index(table, sigma, j):
    k = int(np.nonzero(table.modes == j)[0][0])
    return (0 if sigma > 0 else 1), k


def psi_values(table: EigenvalueTable, triple, omega_bar, nu=-1):
    """``psi`` at the table samples."""
    ell, (s, j), hp = triple
    w = table.samples * float(np.dot(ell, omega_bar))
    mu = table.mu(nu)
    a = mu[_index(table, s, j)]
    if hp is None:
        return w + a.imag
    b = mu[_index(table, *hp)]
    return w + (a - b).imag


def _sublevel_linear(x0, x1, y0, y1, thr):
    """``{x in [x0, x1] : |y| < thr}`` for linear ``y``; one interval or None."""
    lo, hi = x0, x1
    if y1 == y0:
        return (x0, x1) if abs(y0) < thr else None
    # y(x) in (-thr, thr) <=> x between the two crossings
    ta = (-thr - y0) / (y1 - y0)
    tb = (thr - y0) / (y1 - y0)
    t_lo, t_hi = max(min(ta, tb), 0.0), min(max(ta, tb), 1.0)
    if t_lo >= t_hi:
        return None
    return (lo + t_lo * (hi - lo), lo + t_hi * (hi - lo))


def merge_intervals(intervals, tol=0.0):
    """Union of closed intervals by endpoint sorting."""
    out = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1] + tol:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def union_length(intervals):
    return float(sum(b - a for a, b in merge_intervals(intervals)))


def resonance_intervals(table: EigenvalueTable, triple, gamma, tau, omega_bar, method="interval-sweep",
                        mu_fn=None, xtol=1e-12, nu=-1) -> ResonanceSet:
    """Resonance set of ``triple`` over the sample range of ``table``.

    ``method="interval-sweep"`` solves the piecewise-linear sub-level set
    exactly.  ``method="root-bracketing"`` evaluates ``psi`` through
    ``mu_fn(lam) -> mu`` (length ``2J``, ``(sigma, j)`` order) and locates
    each crossing of ``|psi| = threshold`` with Brent's method, bracketed
    by the table samples.
    """
    omega_bar = np.atleast_1d(np.asarray(omega_bar, float))
    ell, h, hp = triple
    ell = np.atleast_1d(np.asarray(ell, int))
    size = max(int(np.max(np.abs(ell))), 1)
    delta = _delta(triple)
    thr = 2 * gamma * abs(delta) / size ** tau
    key = (tuple(int(e) for e in ell), tuple(h), None if hp is None else tuple(hp))
    if hp is not None and tuple(h) == tuple(hp):
        return ResonanceSet(key, [], method, 0.0)
    wl = float(np.dot(ell, omega_bar))
    if hp is not None and abs(delta) > PRUNE_FACTOR * abs(wl):
        return ResonanceSet(key, [], method, thr, pruned=True)
    x = table.samples
    if method == "interval-sweep":
        y = psi_values(table, (ell, h, hp), omega_bar, nu)
    elif method == "root-bracketing":
        if mu_fn is None:
            raise ValueError("root-bracketing needs mu_fn")
        y = np.array([_psi_from_mu(mu_fn(lam), table, lam, wl, h, hp) for lam in x])
    else:
        raise ValueError(f"unknown method {method!r}")
    slope_min = abs(delta) / SLOPE_FACTOR
    certified = True
    pieces = []
    for i in range(x.size - 1):
        seg = _sublevel_linear(x[i], x[i + 1], y[i], y[i + 1], thr)
        if seg is None:
            continue
        if abs(y[i + 1] - y[i]) / (x[i + 1] - x[i]) < slope_min:
            certified = False
        if method == "root-bracketing":
            seg = _refine(seg, x[i], x[i + 1], y[i], y[i + 1], thr, mu_fn, table, wl, h, hp, xtol)
        pieces.append((float(seg[0]), float(seg[1])))
    if not certified:
        log.warning("unreliable bracketing for triple %s: slope below |Delta|/9", key)
    return ResonanceSet(key, merge_intervals(pieces), method, thr, certified=certified)


def _psi_from_mu(mu, table, lam, wl, h, hp):
    J = table.modes.size
    a = mu[(0 if h[0] > 0 else J) + int(np.nonzero(table.modes == h[1])[0][0])]
    if hp is None:
        return lam * wl + a.imag
    b = mu[(0 if hp[0] > 0 else J) + int(np.nonzero(table.modes == hp[1])[0][0])]
    return lam * wl + (a - b).imag


def _refine(seg, x0, x1, y0, y1, thr, mu_fn, table, wl, h, hp, xtol):
    """Move interior crossings of the linear model onto roots of the true ``psi``."""
    def g(lam):
        return abs(_psi_from_mu(mu_fn(lam), table, lam, wl, h, hp)) - thr

    a, b = seg
    mid = 0.5 * (a + b)
    gm = g(mid)
    if gm >= 0:
        return seg
    if a > x0 and g(x0) > 0:
        a = brentq(g, x0, mid, xtol=xtol)
    if b < x1 and g(x1) > 0:
        b = brentq(g, mid, x1, xtol=xtol)
    return (a, b)


def resonance_triples(d, n, modes, include_first=True):
    """Triples with one representative per ``(l, h, h') ~ (-l, h', h)`` pair."""
    ells = ell_vectors(d, n)
    canon = []
    for ell in ells:
        nz = ell[np.nonzero(ell)[0][0]]
        if nz > 0:
            canon.append(tuple(int(e) for e in ell))
    hs = [(s, int(j)) for s in (1, -1) for j in modes]
    out = []
    for ell in canon:
        for h in hs:
            for hp in hs:
                if h != hp:
                    out.append((ell, h, hp))
            if include_first:
                out.append((ell, h, None))
                out.append((tuple(-e for e in ell), h, None))
    return out


@dataclass
class MeasureRow:
    gamma: float
    excluded: float
    triple_count: int
    per_ell: dict
    max_constant: float
    uncertified: int


@dataclass
class MeasureTable:
    rows: list
    tau: float
    domain: tuple
    fit_exponent: float

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gamma", "excluded_measure", "triple_count", "fit_exponent"])
            for r in self.rows:
                w.writerow([r.gamma, r.excluded, r.triple_count, self.fit_exponent])


def fit_exponent(gammas, measures):
    """Least-squares slope of ``log measure`` against ``log gamma``."""
    g = np.log(np.asarray(gammas, float))
    m = np.log(np.asarray(measures, float))
    if g.size < 2:
        return float("nan")
    return float(np.polyfit(g, m, 1)[0])


def cantor_measure_sweep(table: EigenvalueTable, gammas, tau, omega_bar, n, include_first=True,
                         method="interval-sweep", mu_fn=None) -> MeasureTable:
    """Excluded measure over the sample range for each ``gamma``.

    All triples with ``0 < |l|_inf <= n`` and modes of ``table`` are swept;
    lengths are merged by endpoint sorting before summing.
    """
    omega_bar = np.atleast_1d(np.asarray(omega_bar, float))
    triples = resonance_triples(omega_bar.size, n, table.modes, include_first)
    rows = []
    for gamma in gammas:
        pieces, per_ell, count, cmax, bad = [], {}, 0, 0.0, 0
        for tr in triples:
            rs = resonance_intervals(table, tr, gamma, tau, omega_bar, method, mu_fn)
            if rs.empty:
                continue
            count += 1
            bad += int(not rs.certified)
            pieces.extend(rs.intervals)
            key = rs.triple[0]
            per_ell[key] = per_ell.get(key, 0.0) + rs.length
            size = max(max(abs(e) for e in key), 1)
            cmax = max(cmax, rs.length / (gamma * size ** (-tau)))
        rows.append(MeasureRow(float(gamma), union_length(pieces), count, per_ell, cmax, bad))
    exps = fit_exponent([r.gamma for r in rows], [r.excluded for r in rows]) if all(r.excluded > 0 for r in rows) else float("nan")
    return MeasureTable(rows, float(tau), (float(table.samples[0]), float(table.samples[-1])), exps)


def monte_carlo_measure(table: EigenvalueTable, gamma, tau, omega_bar, n, count=20000, seed=0, include_first=True):
    """Cross-check: fraction of uniform ``lam`` that fall in some resonance set."""
    rng = np.random.default_rng(seed)
    a, b = table.samples[0], table.samples[-1]
    lam = np.sort(rng.uniform(a, b, count))
    hit = np.zeros(count, bool)
    omega_bar = np.atleast_1d(np.asarray(omega_bar, float))
    for tr in resonance_triples(omega_bar.size, n, table.modes, include_first):
        ell, h, hp = tr
        delta = _delta(tr)
        if hp is not None and abs(delta) > PRUNE_FACTOR * abs(np.dot(ell, omega_bar)):
            continue
        thr = 2 * gamma * abs(delta) / max(max(abs(e) for e in ell), 1) ** tau
        y = np.interp(lam, table.samples, psi_values(table, tr, omega_bar))
        hit |= np.abs(y) < thr
    return float(hit.mean() * (b - a))


def unperturbed_table(samples, nx, m=1.0):
    """``mu = -i sigma m j^2`` at every sample (no corrections)."""
    samples = np.asarray(samples, float)
    return EigenvalueTable(np.full(samples.size, m), np.zeros((2, nx, samples.size, 1), complex),
                           np.arange(1, nx + 1), samples)


# ---------------------------------------------------------------------------
# stability of the admissible set under perturbation
# ---------------------------------------------------------------------------

def gamma_schedule(gamma, n):
    """``gamma_n = gamma (1 + 2^{-n})``."""
    return gamma * (1 + 2.0 ** (-n))


def iteration_for(n_target, n0, cap):
    """Smallest ``nu`` with ``N_nu >= n_target`` (``N_{nu-1} <= N <= N_nu``)."""
    nu = 0
    while truncation_schedule(nu, n0, cap) < min(n_target, cap):
        nu += 1
    return nu


def sample_mask(table: EigenvalueTable, gamma, tau, omega_bar, n, include_first=True, nu=-1):
    """Samples outside every resonance set with ``0 < |l|_inf <= n``."""
    omega_bar = np.atleast_1d(np.asarray(omega_bar, float))
    x = table.samples
    keep = np.ones(x.size, bool)
    for tr in resonance_triples(omega_bar.size, n, table.modes, include_first):
        ell, h, hp = tr
        delta = _delta(tr)
        if hp is not None and abs(delta) > PRUNE_FACTOR * abs(np.dot(ell, omega_bar)):
            continue
        thr = 2 * gamma * abs(delta) / max(max(abs(e) for e in ell), 1) ** tau
        keep &= np.abs(psi_values(table, tr, omega_bar, nu)) >= thr
    return keep


@dataclass
class SetChain:
    """Masks ``G_0 superset G_1 superset ...`` and the logged boundary events.

    ``masks[n]`` intersects the previous mask with the conditions at
    ``gamma_n`` up to ``ns[n]``; ``direct[n]`` is the same condition without
    the intersection.  ``events`` lists samples where the two differ.
    """

    gammas: list
    ns: list
    masks: list
    direct: list
    events: list


def set_chain(table: EigenvalueTable, gamma, tau, omega_bar, ns, include_first=True) -> SetChain:
    """Nested sample masks for ``gamma_n = gamma (1 + 2^{-n})`` and truncations ``ns``."""
    gammas, masks, direct, events = [], [], [], []
    prev = np.ones(table.samples.size, bool)
    for k, n in enumerate(ns):
        g = gamma_schedule(gamma, k)
        m = sample_mask(table, g, tau, omega_bar, n, include_first)
        cur = prev & m
        for i in np.nonzero(cur != m)[0]:
            ev = {"n": k, "sample": int(i), "lambda": float(table.samples[i])}
            log.info("set chain: direct mask admits lambda=%.6g at n=%d but an earlier set excluded it", ev["lambda"], k)
            events.append(ev)
        gammas.append(g)
        masks.append(cur)
        direct.append(m)
        prev = cur
    return SetChain(gammas, list(ns), masks, direct, events)


@dataclass
class ReducibilityReport:
    inclusion: bool
    counterexamples: list
    mask_u: np.ndarray
    mask_v: np.ndarray
    drift: float
    drift_ratio: float
    remainder: list
    distance: float
    precondition: bool
    nu: int
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "inclusion": self.inclusion,
            "counterexamples": self.counterexamples,
            "mask_u": self.mask_u.tolist(),
            "mask_v": self.mask_v.tolist(),
            "drift": self.drift,
            "drift_ratio": self.drift_ratio,
            "remainder": self.remainder,
            "distance": self.distance,
            "precondition": self.precondition,
            "nu": self.nu,
        }


def approximate_reducibility(regs_u, regs_v, grid: ParamGrid, gamma, tau, n, rho, eps, distance,
                             c_bound=1.0, n0=2, nu_max=12, stop_tol=1e-14) -> ReducibilityReport:
    """Check ``Lambda_inf^{2 gamma}(u) subset Lambda_N^{gamma - rho}(v)`` sample by sample.

    ``regs_u`` and ``regs_v`` are the regularized operators at ``u`` and
    ``v`` (one per sample); ``distance`` is ``|u - v|`` in the norm used by
    the caller.  The reduction at ``v`` stops at the first iteration ``nu``
    whose truncation reaches ``n``.  Eigenvalue drift is taken between the
    two tables at iteration ``nu`` and compared with ``eps * distance``.
    """
    if not 0 < rho < gamma:
        raise ValueError("need 0 < rho < gamma")
    res_u = reduce(regs_u, grid, 2 * gamma, tau, nu_max=nu_max, stop_tol=stop_tol, n0=n0)
    cap = 2 * grid.nphi
    nu = iteration_for(n, n0, cap)
    res_v = reduce(regs_v, grid, gamma - rho, tau, nu_max=nu, stop_tol=stop_tol, n0=n0)
    mu_, mv = res_u.mask, res_v.mask
    bad = [{"sample": int(i), "lambda": float(grid.samples[i])} for i in np.nonzero(mu_ & ~mv)[0]]
    for c in bad:
        log.warning("mask inclusion fails at lambda=%.6g", c["lambda"])
    both = mu_ & mv
    if both.any():
        ru = res_u.table.r[..., min(nu, res_u.table.iterations - 1)][..., both]
        rv = res_v.table.r[..., min(nu, res_v.table.iterations - 1)][..., both]
        drift = float(np.abs(ru - rv).max())
    else:
        drift = 0.0
    ratio = drift / (eps * distance) if eps * distance > 0 else (0.0 if drift == 0 else np.inf)
    remainder = [float(st.delta(st.s0)) for st in res_v.states]
    pre = distance <= (1 + 1e-12) * eps * c_bound * rho * n ** (-tau)
    return ReducibilityReport(not bad, bad, mu_, mv, drift, float(ratio), remainder, float(distance), bool(pre), nu)


__all__ = [
    "INTERVAL_CONSTANT",
    "MeasureRow",
    "MeasureTable",
    "ReducibilityReport",
    "ResonanceSet",
    "SetChain",
    "approximate_reducibility",
    "cantor_measure_sweep",
    "fit_exponent",
    "gamma_schedule",
    "iteration_for",
    "merge_intervals",
    "monte_carlo_measure",
    "psi_values",
    "resonance_intervals",
    "resonance_triples",
    "sample_mask",
    "set_chain",
    "unperturbed_table",
    "union_length",
]
