"""Newton iteration for the truncated NLS with the reducibility-based inverse.

The linearized operator is inverted as
``L^{-1} = V2 Phi (omega.d_phi + D_inf)^{-1} Phi^{-1} V1^{-1}``: the four
regularizing transformations ``V1, V2`` bring ``L`` to ``L4`` and the KAM
map ``Phi`` diagonalizes ``L4``.  A parameter sample is good while every
stage of this pipeline succeeds.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, DivergenceError, NlsKamError, SmallDivisorError
from .kam import DIVISOR_FLOOR, KamState, MelnikovMask, _run_sample, default_s0, truncation_schedule
from .model import eval_F, linear_part, linearize, validate_hypothesis
from .opmatrix import OpMatrix
from .regularizer import regularize
from .spectral import (
    ParamGrid,
    SpectralField,
    Truncation,
    ell_vectors,
    field_to_dict,
    field_truncate,
    parity_defect,
    project_parity,
    sobolev_norm,
)

log = logging.getLogger(__name__)


@dataclass
class NashMoserConfig:
    """Parameters of the Newton scheme.

    ``mu_loss`` and ``nu_loss`` are the loss exponents from which the
    exponents ``kappa1, kappa2, kappa3`` are derived on access.
    """

    eps: float
    gamma: float = 0.01
    tau: float = 2.0
    mu_loss: float = 1.0
    nu_loss: int = 2
    n0: int = 2
    n_max: int = 10
    s0: float | None = None
    target: float = 1e-12
    gamma0: float = 0.1
    eps_gamma_max: float = 1.0
    kam_nu_max: int = 12
    kam_stop: float = 1e-14
    kam_n0: int = 2
    refine: int = 0
    inversion_rtol: float = 1e-3
    oversample: int = 4

    @property
    def kappa1(self):
        return 6 * self.mu_loss + 12 * self.nu_loss

    @property
    def kappa2(self):
        return 11 * self.mu_loss + 25 * self.nu_loss

    @property
    def kappa3(self):
        return 9 * self.nu_loss + 2 * self.mu_loss

    def sobolev_index(self, d):
        return default_s0(d) if self.s0 is None else self.s0

    def validate(self, d):
        problems = []
        if self.gamma <= 0 or self.gamma > self.gamma0:
            problems.append(f"gamma={self.gamma} must lie in (0, gamma0={self.gamma0}]")
        if self.tau <= d:
            problems.append(f"tau={self.tau} must exceed d={d}")
        if self.eps < 0:
            problems.append("eps must be non-negative")
        if self.eps / self.gamma > self.eps_gamma_max:
            problems.append(f"eps/gamma={self.eps / self.gamma:.3g} above {self.eps_gamma_max}")
        if self.n0 < 1 or self.n_max < 0:
            problems.append("n0 must be positive and n_max non-negative")
        if problems:
            raise ConfigError("invalid Newton configuration", problems)

    def to_dict(self):
        out = asdict(self)
        out.update(kappa1=self.kappa1, kappa2=self.kappa2, kappa3=self.kappa3)
        return out


# ---------------------------------------------------------------------------
# first Melnikov condition and the diagonal inverse
# ---------------------------------------------------------------------------

def _first_melnikov_sample(mu, lam, omega_bar, modes, gamma, tau, n):
    ells = ell_vectors(omega_bar.size, n, include_zero=True)
    size = np.maximum(np.max(np.abs(ells), axis=1), 1).astype(float)
    div = np.abs(1j * lam * (ells @ omega_bar)[:, None] + mu[None, :])
    bound = 2 * gamma * modes[None, :] ** 2 / size[:, None] ** tau
    ratio = div / bound
    i = np.unravel_index(np.argmin(ratio), ratio.shape)
    J = modes.size // 2
    witness = {"ell": ells[i[0]].tolist(), "sigma": 1 if i[1] < J else -1, "j": int(modes[i[1]]),
               "divisor": float(div[i]), "bound": float(bound[i])}
    return float(ratio[i]), witness


def first_melnikov_mask(table, grid: ParamGrid, gamma, tau, n=None, nu=-1) -> MelnikovMask:
    """Test ``|i lam omega_bar . l + mu_{sigma,j}| >= 2 gamma j^2 <l>^{-tau}``.

    The sweep covers ``|l|_inf <= n`` (default ``grid.nphi``), both signs
    ``sigma`` and every mode of the table.
    """
    n = grid.nphi if n is None else n
    modes = np.concatenate([table.modes, table.modes]).astype(float)
    margins, witnesses = [], []
    for i, lam in enumerate(grid.samples):
        m, w = _first_melnikov_sample(table.mu_sample(i, nu), lam, grid.omega_bar, modes, gamma, tau, n)
        margins.append(m)
        witnesses.append(w)
    margin = np.array(margins)
    return MelnikovMask(margin >= 1.0, margin, witnesses, float(gamma), float(tau), int(n))


def diagonal_divisors(mu, lam, omega_bar, trunc):
    """``i lam omega_bar . p + mu_h`` over the box, shape ``(2n+1,)*d + (2J,)``."""
    ells = np.stack(np.meshgrid(*[np.arange(-trunc.nphi, trunc.nphi + 1)] * trunc.d, indexing="ij"), axis=-1)
    w = lam * (ells @ np.atleast_1d(np.asarray(omega_bar, float)))
    return 1j * w[..., None] + np.asarray(mu)[(None,) * trunc.d]


def invert_diagonal(mu, g: SpectralField, lam, omega_bar, basis="sine", floor=DIVISOR_FLOOR):
    """Solve ``(omega . d_phi + diag(mu)) h = g`` mode by mode.

    ``mu`` is the length-``2J`` eigenvalue vector ordered ``(sigma, j)``.

    Raises
    ------
    SmallDivisorError
        If a divisor acting on a nonzero coefficient is below ``floor``.
    """
    proto = OpMatrix.identity(g.trunc, basis)
    vec = proto.field_vector(g)
    div = diagonal_divisors(mu, lam, omega_bar, g.trunc)
    small = (np.abs(div) < floor) & (vec != 0)
    if small.any():
        pos = tuple(int(p) for p in np.argwhere(small)[0])
        raise SmallDivisorError(f"diagonal divisor {abs(div[pos]):.3e} below floor", index=pos,
                                divisor=float(abs(div[pos])))
    out = np.zeros_like(vec)
    nz = vec != 0
    out[nz] = vec[nz] / div[nz]
    return proto.vector_field(out)


def apply_diagonal(mu, h: SpectralField, lam, omega_bar, basis="sine"):
    """Forward ``(omega . d_phi + diag(mu)) h`` on the box."""
    proto = OpMatrix.identity(h.trunc, basis)
    return proto.vector_field(proto.field_vector(h) * diagonal_divisors(mu, lam, omega_bar, h.trunc))


# ---------------------------------------------------------------------------
# the inversion pipeline at one sample
# ---------------------------------------------------------------------------

@dataclass
class Pipeline:
    """Regularization and KAM data of ``L(u)`` at one parameter value."""

    lam: float
    omega_bar: np.ndarray
    u: SpectralField
    eps: float
    lc: object
    reg: object
    kam: KamState
    admissible: bool
    second_margin: float
    first_margin: float
    gamma: float
    tau: float

    @property
    def mu(self):
        return self.kam.mu

    @property
    def ok(self):
        return self.admissible and self.first_margin >= 1.0

    def apply_L(self, h: SpectralField):
        """``L(u) h`` cropped to the box of ``u``."""
        t = self.u.trunc
        return linear_part(h, self.lam, self.omega_bar).retruncate(t) + self.lc.apply(h, t)


def build_pipeline(model, u: SpectralField, eps, lam, omega_bar, gamma, tau, kam_nu_max=12, kam_stop=1e-14,
                   kam_n0=2, oversample=4, basis="sine") -> Pipeline:
    """Linearize at ``u``, regularize and run the KAM reduction."""
    omega_bar = np.atleast_1d(np.asarray(omega_bar, float))
    lc = linearize(model, u, eps)
    reg = regularize(lc, lam, omega_bar, basis=basis, oversample=oversample, test_modes=0)
    state = KamState.from_regularized(reg, n0=kam_n0, tau=tau)
    hist, admissible, margins = _run_sample(state, gamma, tau, kam_nu_max, kam_stop, DIVISOR_FLOOR)
    second = min([m for m, _ in margins], default=np.inf)
    final = hist[-1]
    modes = np.concatenate([final.jd[: final.jd.size // 2]] * 2)
    first, _ = _first_melnikov_sample(final.mu, lam, omega_bar, modes, gamma, tau, u.trunc.nphi)
    return Pipeline(float(lam), omega_bar, u, eps, lc, reg, final, admissible, second, first, gamma, tau)


@dataclass
class Inversion:
    h: SpectralField
    residual: float
    relative: float
    discarded: float
    refinements: int = 0


def _pipeline_inverse(pipe: Pipeline, g: SpectralField, floor):
    t = g.trunc
    reg, st = pipe.reg, pipe.kam
    proto = OpMatrix.identity(t, reg.L4.basis)
    v = reg.V1.apply(g, t, inverse=True)
    vec = st.apply_phi(proto.field_vector(v), inverse=True)
    div = diagonal_divisors(st.mu, pipe.lam, pipe.omega_bar, t)
    if np.abs(div).min() < floor:
        pos = tuple(int(p) for p in np.argwhere(np.abs(div) < floor)[0])
        raise SmallDivisorError("diagonal divisor below floor in the inverse", index=pos,
                                divisor=float(np.abs(div).min()))
    vec = st.apply_phi(vec / div)
    h = reg.V2.apply(proto.vector_field(vec), t)
    return project_parity(h, "X")


def invert_L(u: SpectralField, g: SpectralField, lam, pipe: Pipeline, refine=0, rtol=1e-6,
             floor=DIVISOR_FLOOR, s0=None) -> Inversion:
    """``h = V2 Phi L_inf^{-1} Phi^{-1} V1^{-1} g`` with a forward check.

    ``g`` is first projected onto the Z parity (the discarded norm is
    reported).  ``refine`` extra defect-correction passes
    ``h += L^{-1}(g - L h)`` remove the box-truncation error of the
    formula.  A relative forward residual above ``rtol`` is logged.
    """
    if pipe.u is not u and not np.array_equal(pipe.u.coeffs, u.coeffs):
        raise ValueError("pipeline was built at a different u")
    s0 = default_s0(u.trunc.d) if s0 is None else s0
    g = g.retruncate(u.trunc)
    gz = project_parity(g, "Z")
    discarded = sobolev_norm(g - gz, s0)
    h = _pipeline_inverse(pipe, gz, floor)
    gnorm = sobolev_norm(gz, s0)
    res = sobolev_norm(pipe.apply_L(h) - gz, s0)
    k = 0
    while k < refine and res > 0:
        corr = _pipeline_inverse(pipe, project_parity(gz - pipe.apply_L(h), "Z"), floor)
        h = h + corr
        res = sobolev_norm(pipe.apply_L(h) - gz, s0)
        k += 1
    rel = res / gnorm if gnorm > 0 else 0.0
    if rel > rtol:
        log.warning("inversion defect: relative forward residual %.3e at lambda=%.6g", rel, lam)
    return Inversion(SpectralField(h.coeffs, h.trunc, "X"), res, rel, discarded, k)


# ---------------------------------------------------------------------------
# Newton loop
# ---------------------------------------------------------------------------

@dataclass
class IterateRecord:
    n: int
    N: int
    u: dict
    residual_s0: dict
    residual_high: dict
    good: np.ndarray
    wall_time: float

    def summary(self, timings=True):
        alive = [k for k, ok in enumerate(self.good) if ok]
        r0 = [self.residual_s0[k] for k in alive if k in self.residual_s0]
        rh = [self.residual_high[k] for k in alive if k in self.residual_high]
        out = {
            "n": self.n,
            "N_n": self.N,
            "residual_s0": max(r0) if r0 else None,
            "residual_high": max(rh) if rh else None,
            "surviving_samples": int(np.sum(self.good)),
        }
        if timings:
            out["wall_time"] = self.wall_time
        return out


@dataclass
class NashMoserResult:
    records: list
    solutions: dict
    good_history: list
    grid: ParamGrid
    config: NashMoserConfig
    pipelines: dict = field(default_factory=dict)
    inversions: list = field(default_factory=list)
    stop_reason: dict = field(default_factory=dict)

    @property
    def good(self):
        return self.good_history[-1]

    @property
    def empty(self):
        return not np.any(self.good)

    def report(self, timings=True):
        """JSON-ready summary; ``timings=False`` drops wall times for reproducible output."""
        out = {
            "config": self.config.to_dict(),
            "samples": self.grid.samples.tolist(),
            "good": np.asarray(self.good).tolist(),
            "iterations": [r.summary(timings) for r in self.records],
            "stop_reason": {str(k): v for k, v in self.stop_reason.items()},
            "solutions": {str(k): field_to_dict(u) for k, u in self.solutions.items()},
        }
        return out

    def to_json(self, path=None, timings=True):
        text = json.dumps(self.report(timings), indent=2, default=float)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _residuals(model, u, cfg, lam, omega_bar, s0):
    F = eval_F(model, u, cfg.eps, lam, omega_bar)
    return F, sobolev_norm(F, s0), sobolev_norm(F, s0 + cfg.kappa2)


def _eval_floor(u, lam, omega_bar, s0):
    """Roundoff level of ``F`` at ``u``: ten machine epsilons of the linear part."""
    return 10 * np.finfo(float).eps * (sobolev_norm(linear_part(u, lam, omega_bar), s0) + 1.0)


def nash_moser(cfg: NashMoserConfig, model, grid: ParamGrid, trunc: Truncation, check_hypothesis=True,
               basis="sine") -> NashMoserResult:
    """Newton iteration ``u_{n+1} = u_n - Pi_N L(u_n)^{-1} Pi_N F(u_n)`` per sample.

    A sample leaves the good set when any pipeline stage fails or its
    inversion residual exceeds ``cfg.inversion_rtol``; good sets are nested.
    A step that does not decrease ``|F|_{s0}`` is rejected; two consecutive
    rejections raise :class:`DivergenceError`.
    """
    cfg.validate(grid.d)
    if check_hypothesis:
        rep = validate_hypothesis(model)
        if not rep.ok:
            raise ConfigError("nonlinearity fails the reversibility hypotheses", [str(rep.violations)])
    s0 = cfg.sobolev_index(grid.d)
    ob = grid.omega_bar
    S = grid.samples.size
    good = grid.mask.copy()
    u = {k: SpectralField.zeros(trunc, doubled=True, parity="X") for k in range(S) if good[k]}
    res0, resh, Fs = {}, {}, {}
    for k in u:
        Fs[k], res0[k], resh[k] = _residuals(model, u[k], cfg, grid.samples[k], ob, s0)
    t0 = time.time()
    records = [IterateRecord(0, 0, dict(u), dict(res0), dict(resh), good.copy(), 0.0)]
    history = [good.copy()]
    result = NashMoserResult(records, u, history, grid, cfg)
    done = {k: False for k in u}
    rejected = {k: 0 for k in u}
    cap = max(trunc.nphi, trunc.nx)
    for n in range(cfg.n_max):
        N = truncation_schedule(n + 1, cfg.n0, cap)
        for k in list(u):
            if not good[k] or done[k]:
                continue
            lam = grid.samples[k]
            floor = max(cfg.target, _eval_floor(u[k], lam, ob, s0))
            if res0[k] <= floor:
                done[k] = True
                result.stop_reason[k] = "converged"
                continue
            try:
                pipe = build_pipeline(model, u[k], cfg.eps, lam, ob, cfg.gamma, cfg.tau, cfg.kam_nu_max,
                                      cfg.kam_stop, cfg.kam_n0, cfg.oversample, basis)
                if not pipe.ok:
                    raise SmallDivisorError("sample fails a Melnikov condition",
                                            divisor=min(pipe.first_margin, pipe.second_margin))
                g = field_truncate(Fs[k], N)
                inv = invert_L(u[k], g, lam, pipe, refine=cfg.refine, s0=s0)
                if inv.relative > cfg.inversion_rtol:
                    raise SmallDivisorError(f"inversion residual {inv.relative:.2e} above tolerance")
            except NlsKamError as exc:
                good[k] = False
                result.stop_reason[k] = f"dropped at n={n}: {type(exc).__name__}: {exc}"
                log.info("sample %d dropped: %s", k, exc)
                continue
            result.pipelines[k] = pipe
            result.inversions.append((n, k, inv))
            cand = project_parity(u[k] - field_truncate(inv.h, N), "X")
            cand = SpectralField(cand.coeffs, trunc, "X")
            F, r0, rh = _residuals(model, cand, cfg, lam, ob, s0)
            if r0 < res0[k]:
                u[k], Fs[k], res0[k], resh[k] = cand, F, r0, rh
                rejected[k] = 0
            else:
                rejected[k] += 1
                if rejected[k] >= 2:
                    raise DivergenceError(f"residual did not decrease on two consecutive steps at lambda={lam}")
        records.append(IterateRecord(n + 1, N, dict(u), dict(res0), dict(resh), good.copy(), time.time() - t0))
        history.append(good.copy())
        if all(done[k] or not good[k] for k in u):
            break
    for k in u:
        if good[k] and k not in result.stop_reason:
            result.stop_reason[k] = "converged" if res0[k] <= max(cfg.target, _eval_floor(u[k], grid.samples[k], ob, s0)) else "n_max"
    result.solutions = {k: u[k] for k in u if good[k]}
    if result.empty:
        log.warning("no good parameter sample left")
    return result


def solution_parity_defect(u: SpectralField):
    """Distance from the X-parity doubled space (zero for reversible solutions)."""
    return parity_defect(u, "X")


__all__ = [
    "Inversion",
    "IterateRecord",
    "NashMoserConfig",
    "NashMoserResult",
    "Pipeline",
    "apply_diagonal",
    "build_pipeline",
    "diagonal_divisors",
    "first_melnikov_mask",
    "invert_L",
    "invert_diagonal",
    "nash_moser",
    "solution_parity_defect",
]
