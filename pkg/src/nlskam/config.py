"""Run configuration: TOML or JSON files mapped onto typed sections.

Every section is a dataclass whose defaults are the desk values.  Loading
collects all schema problems (unknown keys, wrong types, missing required
fields) with their dotted paths before raising a single :class:`ConfigError`.
"""

from __future__ import annotations

import json
import sys
import types
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from . import constants as K
from .exceptions import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class ProblemConfig:
    """Equation, truncation and parameter samples."""

    epsilon: float
    nphi: int
    nx: int
    d: int = 1
    omega_bar: list[float] = field(default_factory=lambda: [1.0])
    # two desk frequencies with large Melnikov margins at Nx <= 16
    lambdas: list[float] = field(default_factory=lambda: [1.2247, 1.2361])
    # "desk" or a table {terms = [{coefficient = [...], powers = {...}}, ...]}
    model: typing.Any = "desk"
    gamma0: float = 0.1
    basis: str = "sine"
    oversample: int = 4
    u_scale: float = 0.05


@dataclass
class SolverConfig:
    """Newton scheme constants; the exponents kappa1..3 follow from mu_loss and nu_loss."""

    gamma: float = 0.01
    tau: float = 2.0
    mu_loss: float = 1.0
    nu_loss: int = 2
    n0: int = 2
    n_max: int = 10
    # None selects (d + 2) / 2
    s0: float | None = None
    target: float = 1e-12
    eps_gamma_max: float = 1.0
    kam_nu_max: int = 12
    kam_stop: float = 1e-14
    kam_n0: int = 2
    refine: int = 0
    inversion_rtol: float = 1e-3


@dataclass
class ReduceConfig:
    """KAM reduction over a parameter grid, linearized at a random reversible field."""

    gamma: float = 0.05
    tau: float = 2.0
    nu_max: int = 8
    stop_tol: float = 1e-13
    n0: int = 2
    c0: float = 1.0
    lambda_min: float = 1.0
    lambda_max: float = 1.2
    samples: int = 5


@dataclass
class MeasureConfig:
    gamma_list: list[float] = field(default_factory=lambda: [0.1, 0.05, 0.025])
    tau: float = 2.0
    n: int = 8
    lambda_min: float = 0.5
    lambda_max: float = 1.5
    samples: int = 201
    # "unperturbed" (eps = 0 eigenvalues) or "reduced" (run the KAM reduction)
    table: str = "unperturbed"
    include_first: bool = True
    method: str = "interval-sweep"
    monte_carlo: int = 0


@dataclass
class StabilityConfig:
    epsilons: list[float] = field(default_factory=lambda: [1e-2, 1e-3])
    lam: float = 1.2247
    t_max: float = 50.0
    count: int = 100
    s: float = 1.0
    modes: int = 4
    # "newton" linearizes at the Newton solution, "random" at a random field
    field: str = "newton"


@dataclass
class VerifyConfig:
    count: int = 1000
    suites: list[str] = field(default_factory=list)


@dataclass
class ConstantsConfig:
    """Constants that no estimate fixes; the measured defaults live in :mod:`constants`."""

    interval_constant: float = 36.0
    safety_margin: float = K.SAFETY_MARGIN
    calibration_seed: int = K.CALIBRATION_SEED


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs"


@dataclass
class Config:
    problem: ProblemConfig
    solver: SolverConfig = field(default_factory=SolverConfig)
    reduce: ReduceConfig = field(default_factory=ReduceConfig)
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    constants: ConstantsConfig = field(default_factory=ConstantsConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def newton(self):
        """The :class:`~nlskam.solver.NashMoserConfig` for this run."""
        from .solver import NashMoserConfig

        kw = asdict(self.solver)
        return NashMoserConfig(eps=self.problem.epsilon, gamma0=self.problem.gamma0,
                               oversample=self.problem.oversample, **kw)

    def nonlinearity(self):
        from .model import Nonlinearity, desk_nonlinearity

        m = self.problem.model
        if m == "desk":
            return desk_nonlinearity(self.problem.d)
        try:
            return Nonlinearity.from_dict(m, self.problem.d)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("invalid nonlinearity", [f"problem.model: {exc}"]) from exc


_SECTION_TYPES = typing.get_type_hints(Config)
SECTIONS = tuple(_SECTION_TYPES)

# used when no file is given at all; a given file must name these itself
DESK_PROBLEM = {"epsilon": 1e-2, "nphi": 8, "nx": 8}


def _type_ok(value, hint):
    origin = typing.get_origin(hint)
    if hint is typing.Any:
        return True
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin is list:
        (inner,) = typing.get_args(hint)
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, hint)


def _type_name(hint):
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def _section(cls, data, path, problems):
    hints = typing.get_type_hints(cls)
    if not isinstance(data, dict):
        problems.append(f"{path}: expected a table, got {type(data).__name__}")
        return None
    names = {f.name for f in fields(cls)}
    for key in sorted(set(data) - names):
        problems.append(f"{path}.{key}: unknown key")
    kw = {}
    for f in fields(cls):
        where = f"{path}.{f.name}"
        if f.name not in data:
            if f.default is MISSING and f.default_factory is MISSING:
                problems.append(f"{where}: required field missing")
            continue
        value = data[f.name]
        if not _type_ok(value, hints[f.name]):
            problems.append(f"{where}: expected {_type_name(hints[f.name])}, got {type(value).__name__} {value!r}")
            continue
        if hints[f.name] is float and value is not None:
            value = float(value)
        elif typing.get_origin(hints[f.name]) is list and typing.get_args(hints[f.name])[0] is float:
            value = [float(v) for v in value]
        kw[f.name] = value
    return kw


def _semantic(cfg: Config, problems):
    p = cfg.problem
    if p.nphi < 1 or p.nx < 1:
        problems.append("problem.nphi/problem.nx: truncation sizes must be positive")
    if p.epsilon < 0:
        problems.append("problem.epsilon: must be non-negative")
    if len(p.omega_bar) != p.d:
        problems.append(f"problem.omega_bar: length {len(p.omega_bar)} differs from d={p.d}")
    if not p.lambdas:
        problems.append("problem.lambdas: at least one sample is required")
    if p.basis not in ("sine", "exp"):
        problems.append(f"problem.basis: unknown basis {p.basis!r}")
    if cfg.measure.table not in ("unperturbed", "reduced"):
        problems.append(f"measure.table: expected 'unperturbed' or 'reduced', got {cfg.measure.table!r}")
    if cfg.measure.method not in ("interval-sweep", "root-bracketing"):
        problems.append(f"measure.method: unknown method {cfg.measure.method!r}")
    if cfg.stability.field not in ("newton", "random"):
        problems.append(f"stability.field: expected 'newton' or 'random', got {cfg.stability.field!r}")
    if cfg.run.threads < 1:
        problems.append("run.threads: must be at least 1")
    if not isinstance(p.model, (str, dict)) or (isinstance(p.model, str) and p.model != "desk"):
        problems.append("problem.model: expected 'desk' or a table with 'terms'")


def from_dict(data) -> Config:
    """Validate a parsed document and build a :class:`Config`.

    Raises
    ------
    ConfigError
        With one ``problems`` entry per offending field path.
    """
    problems = []
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a table", ["<root>: expected a table"])
    for key in sorted(set(data) - set(SECTIONS)):
        problems.append(f"{key}: unknown section")
    parts = {}
    for name in SECTIONS:
        cls = _SECTION_TYPES[name]
        kw = _section(cls, data.get(name, {}), name, problems)
        if kw is not None:
            parts[name] = kw
    if problems:
        raise ConfigError("configuration failed validation", problems)
    cfg = Config(**{name: _SECTION_TYPES[name](**kw) for name, kw in parts.items()})
    _semantic(cfg, problems)
    if problems:
        raise ConfigError("configuration failed validation", problems)
    return cfg


def read_document(path) -> dict:
    """Parse a ``.toml`` or ``.json`` file (JSON if the suffix is ``.json``) without validating it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}", [f"<file>: {exc}"]) from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}", [f"<file>: {exc}"]) from exc
    return data


def load(path) -> Config:
    return from_dict(read_document(path))


def required_fields():
    """Dotted paths of the fields without defaults."""
    out = []
    for name in SECTIONS:
        for f in fields(_SECTION_TYPES[name]):
            if f.default is MISSING and f.default_factory is MISSING:
                out.append(f"{name}.{f.name}")
    return out


__all__ = [
    "Config",
    "ConstantsConfig",
    "MeasureConfig",
    "ProblemConfig",
    "ReduceConfig",
    "RunConfig",
    "SolverConfig",
    "StabilityConfig",
    "VerifyConfig",
    "from_dict",
    "load",
    "read_document",
    "required_fields",
]
