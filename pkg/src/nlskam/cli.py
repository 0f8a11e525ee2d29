"""Command-line entry point: ``nlskam {solve,reduce,measure,stability,verify-norms}``.

Each run writes into ``<out-dir>/<command>/``: the resolved configuration,
a copy of the input file, library versions, JSON reports, CSV traces and
serialized fields.  Reports hold no wall times (those go to ``timing.json``),
so the same configuration and seed give byte-identical reports.

Exit codes: 0 ok, 2 empty parameter set, 3 divergence, 4 configuration error,
1 any other library error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import config as C
from .exceptions import ConfigError, DivergenceError, EmptyCantorSetError, NlsKamError

EXIT_OK, EXIT_ERROR, EXIT_EMPTY, EXIT_DIVERGENCE, EXIT_CONFIG = 0, 1, 2, 3, 4

log = logging.getLogger("nlskam.cli")


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

class RunDir:
    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.timings = {}

    def path(self, name):
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def json(self, name, obj):
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    def snapshot(self, cfg: C.Config, source, argv):
        self.json("config.json", cfg.to_dict())
        if source is not None:
            shutil.copyfile(source, self.path("input" + Path(source).suffix))
        self.json("versions.json", {
            "nlskam": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
            "argv": list(argv),
        })

    def close(self):
        self.json("timing.json", self.timings)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"not serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# shared construction
# ---------------------------------------------------------------------------

def _trunc(cfg):
    from .spectral import Truncation

    p = cfg.problem
    return Truncation(p.d, p.nphi, p.nx)


def _random_field(cfg, seed):
    """Random X-parity doubled field of size ``problem.u_scale``."""
    from .spectral import SpectralField, project_parity

    t = _trunc(cfg)
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((2,) + t.shape) + 1j * rng.standard_normal((2,) + t.shape)
    return project_parity(SpectralField(cfg.problem.u_scale * c, t), "X")


def _grid(cfg, samples, tau):
    from .spectral import ParamGrid

    p = cfg.problem
    return ParamGrid(samples, p.gamma0, tau, p.omega_bar, p.nphi)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_solve(cfg: C.Config, run: RunDir):
    from .solver import nash_moser, solution_parity_defect
    from .spectral import field_to_dict

    grid = _grid(cfg, cfg.problem.lambdas, cfg.solver.tau)
    t0 = time.perf_counter()
    res = nash_moser(cfg.newton(), cfg.nonlinearity(), grid, _trunc(cfg), basis=cfg.problem.basis)
    run.timings["nash_moser"] = time.perf_counter() - t0
    run.timings["iterations"] = [r.wall_time for r in res.records]
    run.path("report.json").write_text(res.to_json(timings=False) + "\n")
    rows = []
    for r in res.records:
        for k in sorted(r.residual_s0):
            rows.append([r.n, r.N, k, float(grid.samples[k]), r.residual_s0[k], r.residual_high[k]])
    run.csv("residuals.csv", ["n", "N_n", "sample", "lambda", "residual_s0", "residual_high"], rows)
    for k, u in res.solutions.items():
        run.json(f"fields/u_{k}.json", field_to_dict(u))
    for k in sorted(res.stop_reason):
        print(f"lambda={grid.samples[k]:.6g}: {res.stop_reason[k]}")
    for k, u in sorted(res.solutions.items()):
        print(f"lambda={grid.samples[k]:.6g}: |F|_s0={res.records[-1].residual_s0[k]:.3e} "
              f"parity defect={solution_parity_defect(u):.1e}")
    if res.empty:
        raise EmptyCantorSetError("every parameter sample left the good set")
    return EXIT_OK


def _reduce(cfg, samples, threads):
    from .kam import reduce
    from .model import linearize
    from .regularizer import regularize

    r = cfg.reduce
    grid = _grid(cfg, samples, r.tau)
    lc = linearize(cfg.nonlinearity(), _random_field(cfg, cfg.run.seed), cfg.problem.epsilon)
    regs = [regularize(lc, lam, cfg.problem.omega_bar, basis=cfg.problem.basis,
                       oversample=cfg.problem.oversample, test_modes=0) for lam in grid.samples]
    return reduce(regs, grid, r.gamma, r.tau, nu_max=r.nu_max, stop_tol=r.stop_tol, n0=r.n0, c0=r.c0,
                  threads=threads)


def cmd_reduce(cfg: C.Config, run: RunDir):
    r = cfg.reduce
    samples = np.linspace(r.lambda_min, r.lambda_max, r.samples)
    t0 = time.perf_counter()
    res = _reduce(cfg, samples, cfg.run.threads)
    run.timings["reduce"] = time.perf_counter() - t0
    summary = res.summary()
    summary["real_part_defect"] = res.table.real_part_defect()
    summary["antisymmetry_defect"] = res.table.antisymmetry_defect()
    run.json("report.json", summary)
    run.json("eigenvalues.json", res.table.to_dict())
    res.write_trace_csv(run.path("trace.csv"))
    print(f"surviving samples: {int(res.mask.sum())}/{res.mask.size}, iterations: {summary['iterations']}")
    print(f"real-part defect {summary['real_part_defect']:.1e}, antisymmetry defect {summary['antisymmetry_defect']:.1e}")
    if res.empty:
        raise EmptyCantorSetError("no sample survives the second Melnikov masks")
    return EXIT_OK


def cmd_measure(cfg: C.Config, run: RunDir):
    from .measure import cantor_measure_sweep, monte_carlo_measure, unperturbed_table

    m = cfg.measure
    samples = np.linspace(m.lambda_min, m.lambda_max, m.samples)
    t0 = time.perf_counter()
    if m.table == "reduced":
        table = _reduce(cfg, samples, cfg.run.threads).table
    else:
        table = unperturbed_table(samples, cfg.problem.nx)
    mt = cantor_measure_sweep(table, m.gamma_list, m.tau, cfg.problem.omega_bar, m.n, m.include_first, m.method)
    run.timings["measure"] = time.perf_counter() - t0
    mt.write_csv(run.path("measure.csv"))
    span = mt.domain[1] - mt.domain[0]
    rows = []
    for row in mt.rows:
        entry = {"gamma": row.gamma, "excluded": row.excluded, "remaining": span - row.excluded,
                 "triple_count": row.triple_count, "max_constant": row.max_constant,
                 "uncertified": row.uncertified,
                 "per_ell": {",".join(map(str, k)): v for k, v in sorted(row.per_ell.items())}}
        if m.monte_carlo:
            entry["monte_carlo"] = monte_carlo_measure(table, row.gamma, m.tau, cfg.problem.omega_bar, m.n,
                                                       m.monte_carlo, cfg.run.seed, m.include_first)
        rows.append(entry)
    report = {"tau": mt.tau, "domain": list(mt.domain), "fit_exponent": mt.fit_exponent, "table": m.table,
              "interval_constant": cfg.constants.interval_constant,
              "constant_ok": all(r["max_constant"] <= cfg.constants.interval_constant for r in rows),
              "rows": rows}
    run.json("report.json", report)
    for r in rows:
        print(f"gamma={r['gamma']:g}: excluded {r['excluded']:.6g} over {r['triple_count']} triples")
    print(f"fit exponent {mt.fit_exponent:.4f}")
    if any(r["remaining"] <= 0 for r in rows):
        raise EmptyCantorSetError("the resonance sets cover the whole parameter range")
    return EXIT_OK


def cmd_stability(cfg: C.Config, run: RunDir):
    from .solver import NashMoserConfig, build_pipeline, nash_moser
    from .stability import (
        PhaseChain,
        amplitude_exponent,
        conjugated_flow_norms,
        evolve_diagonal,
        phase_norm,
        random_datum,
    )

    st, p = cfg.stability, cfg.problem
    model = cfg.nonlinearity()
    times = np.linspace(0.0, st.t_max, st.count)
    h0 = random_datum(np.random.default_rng(cfg.run.seed), min(p.nx, 8), st.modes)
    results = []
    for eps in st.epsilons:
        t0 = time.perf_counter()
        if st.field == "newton" and eps > 0:
            ncfg = NashMoserConfig(**{**cfg.newton().__dict__, "eps": eps})
            res = nash_moser(ncfg, model, _grid(cfg, [st.lam], cfg.solver.tau), _trunc(cfg), basis=p.basis)
            if res.empty:
                raise EmptyCantorSetError(f"lambda={st.lam} left the good set at eps={eps}")
            u = res.solutions[0]
        else:
            u = _random_field(cfg, cfg.run.seed)
        pipe = build_pipeline(model, u, eps, st.lam, p.omega_bar, cfg.solver.gamma, cfg.solver.tau,
                              cfg.solver.kam_nu_max, cfg.solver.kam_stop, cfg.solver.kam_n0, p.oversample, p.basis)
        chain = PhaseChain.build(pipe.reg, pipe.kam)
        tr = conjugated_flow_norms(h0, chain, times, st.s)
        tr.write_csv(run.path(f"flow_eps{eps:g}.csv"))
        # reduced coordinates: the diagonal flow keeps every Sobolev norm
        n = (chain.K - 1) // 2
        v0 = np.zeros((2, chain.K), complex)
        v0[:, n - (h0.shape[1] - 1) // 2 : n + (h0.shape[1] + 1) // 2] = h0
        norms = phase_norm(evolve_diagonal(v0.reshape(-1), chain.mu_full().reshape(-1), times),
                           np.arange(-n, n + 1), st.s)
        drift = float(np.abs(norms - norms[0]).max() / norms[0])
        run.timings[f"eps={eps:g}"] = time.perf_counter() - t0
        results.append({"epsilon": eps, "K_upper": tr.K_upper, "K_lower": tr.K_lower, "amplitude": tr.amplitude,
                        "roundtrip": tr.roundtrip, "diagonal_drift": drift})
        print(f"eps={eps:g}: K in [{tr.K_lower:.6f}, {tr.K_upper:.6f}], amplitude {tr.amplitude:.3e}")
    exps = [amplitude_exponent((a["epsilon"], b["epsilon"]), (a["amplitude"], b["amplitude"]))
            for a, b in zip(results[:-1], results[1:]) if a["amplitude"] > 0 and b["amplitude"] > 0]
    run.json("report.json", {"lambda": st.lam, "s": st.s, "t_max": st.t_max, "count": st.count,
                             "runs": results, "amplitude_exponents": exps})
    if exps:
        print("amplitude exponents: " + ", ".join(f"{e:.4f}" for e in exps))
    return EXIT_OK


def cmd_verify_norms(cfg: C.Config, run: RunDir):
    from .inequalities import SUITES, verify_norms

    v = cfg.verify
    unknown = [s for s in v.suites if s not in SUITES]
    if unknown:
        raise ConfigError("unknown inequality suite", [f"verify.suites: {s!r}" for s in unknown])
    t0 = time.perf_counter()
    rep = verify_norms(cfg.run.seed, v.count, v.suites or None)
    run.timings["verify_norms"] = time.perf_counter() - t0
    rows = rep.rows()
    run.csv("norms.csv", list(rows[0]), [list(r.values()) for r in rows])
    run.json("report.json", {"seed": rep.seed, "count": rep.count, "passed": rep.passed, "suites": rows})
    for r in rows:
        flag = "pass" if r["passed"] else "FAIL"
        print(f"{r['suite']:<15} {r['inequality']:<6} worst {r['worst_ratio']:.4f} violations {r['violations']} {flag}")
    return EXIT_OK


COMMANDS = {
    "solve": (cmd_solve, "Newton iteration on the configured parameter samples"),
    "reduce": (cmd_reduce, "regularization and KAM reduction over a parameter grid"),
    "measure": (cmd_measure, "excluded-parameter measure for a list of gamma values"),
    "stability": (cmd_stability, "norm traces of the linearized flow"),
    "verify-norms": (cmd_verify_norms, "randomized norm-inequality suites"),
}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _truncation(text):
    try:
        nphi, nx = (int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected Nphi,Nx, got {text!r}") from exc
    return nphi, nx


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON configuration file")
    common.add_argument("--out-dir", type=Path, help="run directory root (default run.out_dir)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--threads", type=int, help="override run.threads")
    common.add_argument("--gamma-list", type=_float_list, help="override measure.gamma_list, e.g. 0.1,0.05")
    common.add_argument("--epsilon", type=float, help="override problem.epsilon")
    common.add_argument("--truncation", type=_truncation, metavar="NPHI,NX", help="override problem.nphi, problem.nx")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    parser = argparse.ArgumentParser(prog="nlskam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def resolve_config(args) -> C.Config:
    """Read the file (or the desk defaults when none is given) and apply flag overrides."""
    data = C.read_document(args.config) if args.config is not None else {"problem": dict(C.DESK_PROBLEM)}

    def section(name):
        sec = data.setdefault(name, {})
        if not isinstance(sec, dict):
            raise ConfigError("configuration failed validation", [f"{name}: expected a table"])
        return sec

    if args.epsilon is not None:
        section("problem")["epsilon"] = args.epsilon
    if args.truncation is not None:
        section("problem")["nphi"], section("problem")["nx"] = args.truncation
    if args.gamma_list is not None:
        section("measure")["gamma_list"] = args.gamma_list
    if args.seed is not None:
        section("run")["seed"] = args.seed
    if args.threads is not None:
        section("run")["threads"] = args.threads
    if args.out_dir is not None:
        section("run")["out_dir"] = str(args.out_dir)
    return C.from_dict(data)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run = RunDir(Path(cfg.run.out_dir) / args.command)
        run.snapshot(cfg, args.config, argv)
        try:
            return COMMANDS[args.command][0](cfg, run)
        finally:
            run.close()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyCantorSetError as exc:
        print(f"empty parameter set [{exc.module}]: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except DivergenceError as exc:
        print(f"divergence [{exc.module}]: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except NlsKamError as exc:
        print(f"error [{exc.module}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
