"""INI-style run configuration: parsing, validation, canonical serialisation and object builders."""

from __future__ import annotations

import configparser
import copy
import math
import os
import re
import warnings

import numpy as np

from .coefficients import (ComplexCoeff, DiffusionCoeff, ProblemCoefficients, constant_coefficients,
                           preset_biomedical)
from .functionals import EnergyParams
from .grid import Grid, build_grid, read_field
from .inverse import DEFAULT_ALPHA, DEFAULT_SCHEDULE, OptimizerConfig, default_m
from .phantom import Blob, PhantomSpec, SourceSpec


class ConfigError(ValueError):
    pass


REQUIRED = object()

# section -> key -> (kind, default)
SCHEMA = {
    "grid": {"lo": ("floats", None), "hi": ("floats", None), "counts": ("ints", REQUIRED)},
    "coefficients": {
        "preset": ("str", "constant"),
        "A": ("float", 0.02), "lam": ("float", 1.0 / 3.0), "kappa": ("float", 1.0),
        "k": ("floats", (0.1, 0.05)), "h": ("floats", (1.0, 0.3)),
        "gamma": ("float", 0.5), "M": ("float", 1.0), "a0": ("float", None),
        "mu_a": ("float", 0.1), "mu_s": ("float", 1.0), "omega": ("float", 0.0),
        "c": ("float", 1.0), "phi_q": ("float", 1.0), "tau": ("float", 0.0),
        "A_file": ("str", None), "kappa_file": ("str", None),
        "k_file": ("str", None), "h_file": ("str", None),
    },
    "phantom": {"background": ("float", 0.0), "smoothness": ("str", "gaussian")},
    "blob": {"center": ("floats", REQUIRED), "radius": ("float", REQUIRED),
             "amplitude": ("float", REQUIRED)},
    "source": {"interior_center": ("floats", None), "interior_width": ("float", 0.1),
               "interior_amplitude": ("floats", None), "boundary_side": ("str", None),
               "boundary_amplitude": ("floats", None), "measure": ("str", "all")},
    "energy": {"alpha": ("float", DEFAULT_ALPHA), "m": ("float", None),
               "schedule": ("floats", DEFAULT_SCHEDULE)},
    "optimizer": {"g_tol": ("float", 1e-3), "max_iters": ("int", 500), "c1": ("float", 1e-4),
                  "backtrack": ("float", 0.5), "max_backtracks": ("int", 30),
                  "step0": ("float", 1.0), "method": ("str", "lbfgs"), "memory": ("int", 10),
                  "xi0": ("str", "0")},
    "noise": {"delta": ("float", 0.0), "seed": ("int", 0)},
    "solver": {"tol": ("float", 1e-10), "max_iters": ("int", 200), "method": ("str", "auto")},
    "data": {"source": ("str", "synthetic"), "traces": ("strs", None)},
    "output": {"dir": ("str", "out")},
    "flags": {"fine_data": ("bool", False), "gradient_convention": ("str", "fd"),
              "multistart": ("int", 0)},
    "gradcheck": {"nodes": ("int", 5), "directions": ("int", 3), "eps": ("floats", (1e-5,)),
                  "p": ("float", None), "seed": ("int", 0), "tolerance": ("float", 1e-5)},
}

LIST_SECTIONS = ("source", "blob")
_LIST_RE = re.compile(r"^(source|blob)\.(\d+)$")


def _parse_value(kind: str, text: str, where: str):
    text = text.strip()
    try:
        if kind == "str":
            return text
        if kind == "strs":
            return tuple(t.strip() for t in text.split(",") if t.strip())
        if kind == "float":
            return float(text)
        if kind == "int":
            return int(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "floats":
            return tuple(float(t) for t in text.split(","))
        if kind == "ints":
            return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind}") from None
    raise AssertionError(kind)


def _format_value(kind: str, value) -> str:
    if kind in ("floats", "ints", "strs"):
        return ", ".join(repr(v) if kind == "floats" else str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


def _schema_for(section: str) -> dict:
    m = _LIST_RE.match(section)
    return SCHEMA[m.group(1) if m else section]


class RunConfig:
    """Typed configuration values keyed by ``section -> key``.

    Optional keys that are unset are omitted, so parse -> serialise -> parse
    is the identity on the stored values.
    """

    def __init__(self, values: dict, base_dir: str = "."):
        self.values = values
        self.base_dir = base_dir

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def get(self, section: str, key: str):
        sec = self.values.get(section, {})
        if key in sec:
            return sec[key]
        default = _schema_for(section)[key][1]
        return None if default is REQUIRED else default

    def sections(self, prefix: str) -> list:
        keys = [s for s in self.values if _LIST_RE.match(s) and s.startswith(prefix + ".")]
        return [self.values[s] for s in sorted(keys, key=lambda s: int(s.split(".")[1]))]

    def copy(self) -> "RunConfig":
        return RunConfig(copy.deepcopy(self.values), self.base_dir)

    def set(self, section: str, key: str, value) -> None:
        self.values.setdefault(section, {})[key] = value

    def path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    # -- text form -----------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for section in sorted(self.values, key=_section_order):
            schema = _schema_for(section)
            lines.append(f"[{section}]")
            for key in schema:
                if key in self.values[section]:
                    lines.append(f"{key} = {_format_value(schema[key][0], self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)


def _section_order(name: str):
    m = _LIST_RE.match(name)
    base = m.group(1) if m else name
    return (list(SCHEMA).index(base), int(m.group(2)) if m else -1)


def loads(text: str, base_dir: str = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for section in cp.sections():
        m = _LIST_RE.match(section)
        if section not in SCHEMA and not m:
            raise ConfigError(f"unknown section [{section}]")
        if section in LIST_SECTIONS:
            raise ConfigError(f"list section [{section}] needs an index, e.g. [{section}.0]")
        schema = _schema_for(section)
        sec = {}
        for key, text_value in cp.items(section):
            if key not in schema:
                raise ConfigError(f"unknown key {section}.{key}")
            sec[key] = _parse_value(schema[key][0], text_value, f"{section}.{key}")
        values[section] = sec
    cfg = RunConfig(values, base_dir)
    validate(cfg)
    return cfg


def load(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, os.path.dirname(os.path.abspath(path)))


def dump(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(cfg.dumps())


# -- validation ------------------------------------------------------------------


def _require(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: RunConfig) -> None:
    for section, sec in cfg.values.items():
        for key, (_, default) in _schema_for(section).items():
            if default is REQUIRED and key not in sec:
                raise ConfigError(f"missing required key {section}.{key}")
    if "grid" not in cfg.values:
        raise ConfigError("missing required key grid.counts")
    counts = cfg.get("grid", "counts")
    n = len(counts)
    _require(n in (2, 3), "grid.counts", "need 2 or 3 entries")
    _require(all(c >= 3 for c in counts), "grid.counts", "need at least 3 nodes per axis")
    lo = cfg.get("grid", "lo") or (0.0,) * n
    hi = cfg.get("grid", "hi") or (1.0,) * n
    _require(len(lo) == n and len(hi) == n, "grid.lo/grid.hi", "length must match grid.counts")
    _require(all(a < b for a, b in zip(lo, hi)), "grid.hi", "must exceed grid.lo")

    preset = cfg.get("coefficients", "preset")
    _require(preset in ("constant", "biomedical"), "coefficients.preset",
             "must be 'constant' or 'biomedical'")
    for key in ("gamma", "M", "lam", "kappa"):
        _require(cfg.get("coefficients", key) > 0, f"coefficients.{key}", "must be positive")
    for key in ("k", "h"):
        _require(len(cfg.get("coefficients", key)) == 2, f"coefficients.{key}", "need re, im")

    alpha, m = cfg.get("energy", "alpha"), cfg.get("energy", "m")
    _require(alpha > 0, "energy.alpha", "must be positive")
    _require(m is None or m > 1, "energy.m", "must exceed 1")
    sched = cfg.get("energy", "schedule")
    _require(len(sched) > 0, "energy.schedule", "must not be empty")
    _require(all(p >= 2 for p in sched), "energy.schedule", "every p must be >= 2")
    _require(all(b > a for a, b in zip(sched, sched[1:])), "energy.schedule",
             "must be strictly increasing")
    _require(cfg.get("noise", "delta") >= 0, "noise.delta", "must be nonnegative")
    _require(0 < cfg.get("solver", "tol") <= 1e-4, "solver.tol", "must lie in (0, 1e-4]")
    _require(cfg.get("solver", "method") in ("auto", "direct", "iterative"), "solver.method",
             "must be auto, direct or iterative")
    _require(cfg.get("flags", "gradient_convention") in ("fd", "scaled"),
             "flags.gradient_convention", "must be 'fd' or 'scaled'")
    _require(cfg.get("data", "source") in ("synthetic", "files"), "data.source",
             "must be 'synthetic' or 'files'")
    for i, src in enumerate(cfg.sections("source")):
        has_int = src.get("interior_amplitude") is not None
        has_bnd = src.get("boundary_side") is not None
        _require(has_int or has_bnd, f"source.{i}", "needs an interior or a boundary part")
        if has_int:
            _require(src.get("interior_center") is not None and len(src["interior_center"]) == n,
                     f"source.{i}.interior_center", f"need {n} coordinates")
    for i, b in enumerate(cfg.sections("blob")):
        _require(len(b["center"]) == n, f"blob.{i}.center", f"need {n} coordinates")
        _require(b["amplitude"] <= cfg.get("coefficients", "M"), f"blob.{i}.amplitude",
                 "must not exceed coefficients.M")
    try:
        optimizer_config(cfg)
    except ValueError as exc:
        raise ConfigError(f"optimizer: {exc}") from None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for p in sched:
                EnergyParams(p, m if m is not None else default_m(n), alpha,
                             cfg.get("coefficients", "M"), n)
    except ValueError as exc:
        raise ConfigError(f"energy: {exc}") from None


def parameter_warnings(cfg: RunConfig) -> list:
    """Messages for parameters outside the analysed range (not errors)."""
    out = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for p in cfg.get("energy", "schedule"):
            energy_params(cfg, p)
    for w in caught:
        msg = str(w.message)
        if msg not in out:
            out.append(msg)
    return out


# -- builders --------------------------------------------------------------------


def grid_from(cfg: RunConfig) -> Grid:
    counts = cfg.get("grid", "counts")
    n = len(counts)
    return build_grid(cfg.get("grid", "lo") or (0.0,) * n, cfg.get("grid", "hi") or (1.0,) * n, counts)


def _field(cfg: RunConfig, key: str, grid: Grid, width):
    path = cfg.get("coefficients", key)
    if path is None:
        return None
    _, fgrid, values = read_field(cfg.path(path))
    if fgrid != grid:
        raise ConfigError(f"coefficients.{key}: field grid does not match [grid]")
    return values if width is None else values.reshape(grid.n_nodes, width)


def coefficients_from(cfg: RunConfig, grid: Grid | None = None) -> ProblemCoefficients:
    grid = grid or grid_from(cfg)
    g = lambda k: cfg.get("coefficients", k)  # noqa: E731
    if g("preset") == "biomedical":
        return preset_biomedical(grid, g("mu_a"), g("mu_s"), g("omega"), g("c"), g("phi_q"),
                                 g("tau"), gamma=g("gamma"), M=g("M"))
    base = constant_coefficients(grid, A=g("A"), lam=g("lam"), kappa=g("kappa"), k=g("k"),
                                 h=g("h"), gamma=g("gamma"), M=g("M"), a0=g("a0"))
    A = _field(cfg, "A_file", grid, None)
    kappa = _field(cfg, "kappa_file", grid, 1)
    K = _field(cfg, "k_file", grid, 2)
    H = _field(cfg, "h_file", grid, 2)
    if A is None and kappa is None and K is None and H is None:
        return base
    n = grid.dim
    diff = DiffusionCoeff(base.diffusion.A if A is None else A.reshape(-1, n, n),
                          base.diffusion.lam,
                          base.diffusion.kappa if kappa is None else kappa[:, 0])
    return ProblemCoefficients(
        grid, diff,
        base.K if K is None else ComplexCoeff(K[:, 0].copy(), K[:, 1].copy()),
        base.H if H is None else ComplexCoeff(H[:, 0].copy(), H[:, 1].copy()),
        base.gamma, base.M, g("a0"))


def phantom_spec_from(cfg: RunConfig) -> PhantomSpec:
    blobs = tuple(Blob(tuple(b["center"]), b["radius"], b["amplitude"])
                  for b in cfg.sections("blob"))
    return PhantomSpec(blobs, cfg.get("phantom", "background"), cfg.get("phantom", "smoothness"))


def source_specs_from(cfg: RunConfig) -> list:
    specs = []
    for i, s in enumerate(cfg.sections("source")):
        interior = boundary = None
        if s.get("interior_amplitude") is not None:
            interior = (tuple(s["interior_center"]), s.get("interior_width", 0.1),
                        tuple(s["interior_amplitude"]))
        if s.get("boundary_side") is not None:
            amp = s.get("boundary_amplitude")
            if amp is None:
                raise ConfigError(f"source.{i}.boundary_amplitude: required with boundary_side")
            boundary = (s["boundary_side"], tuple(amp))
        try:
            specs.append(SourceSpec(interior, boundary, s.get("measure", "all")))
        except ValueError as exc:
            raise ConfigError(f"source.{i}: {exc}") from None
    if not specs:
        raise ConfigError("missing required section [source.0]")
    return specs


def energy_params(cfg: RunConfig, p: float) -> EnergyParams:
    n = len(cfg.get("grid", "counts"))
    m = cfg.get("energy", "m")
    return EnergyParams(float(p), m if m is not None else default_m(n), cfg.get("energy", "alpha"),
                        cfg.get("coefficients", "M"), n)


def optimizer_config(cfg: RunConfig) -> OptimizerConfig:
    o = lambda k: cfg.get("optimizer", k)  # noqa: E731
    return OptimizerConfig(g_tol=o("g_tol"), max_iters=o("max_iters"), c1=o("c1"),
                           backtrack=o("backtrack"), max_backtracks=o("max_backtracks"),
                           step0=o("step0"), method=o("method"), memory=o("memory"))


def initial_xi(cfg: RunConfig, grid: Grid) -> np.ndarray:
    text = cfg.get("optimizer", "xi0")
    try:
        value = float(text)
    except ValueError:
        _, fgrid, values = read_field(cfg.path(text))
        if fgrid != grid:
            raise ConfigError("optimizer.xi0: field grid does not match [grid]") from None
        return np.asarray(values, dtype=float).reshape(-1)
    if not math.isfinite(value):
        raise ConfigError("optimizer.xi0: must be finite")
    return np.full(grid.n_nodes, value)
