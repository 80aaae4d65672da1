"""Line-oriented ``key = value`` configuration with sections.

Example::

    [experiment]
    name = defect_flow

    [mesh]
    n = 16

    [time]
    k = 0.001
    T = 0.04

Sections and keys (every key except ``experiment.name`` and ``mesh.n`` has a
default; preset experiments supply their own physics and initial data):

* ``[experiment]`` name
* ``[mesh]`` dim, n, pattern
* ``[physics]`` nu, A, eps_perp, eps_a, lambda_npp, mu_phi, nu_el, alpha,
  beta, stabilization (on/off), truncation (on/off), C2, E0 (comma separated),
  omega, director_bc (neumann/dirichlet), step_constant
* ``[time]`` k, T
* ``[initial]`` (experiment ``custom`` only) d0, n_plus0, n_minus0, v0
  (constants, vectors comma separated), balance_charges (on/off)
* ``[solver]`` tol_fp, max_outer_iters, newton_tol, newton_max_iters,
  linear_tol, freeze (comma separated sub-solve names), order, relaxation,
  anderson_depth
* ``[output]`` dir, vtk_every, certify (on/off)

Lines starting with ``#`` or ``;`` are comments.  Unknown sections or keys
are rejected.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .experiments import Experiment, UnknownExperiment, experiment_catalogue
from .scheme import SUBSOLVES, FixedPointConfig
from .state import AppliedField, InitialData, PhysParams, ValidationError, constant


class ParseError(ValueError):
    def __init__(self, line: int | None, message: str):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none", "default") else float(s)


PHYSICS_KEYS: dict[str, Callable[[str], Any]] = {
    "nu": float, "A": float, "eps_perp": float, "eps_a": float, "lambda_npp": float, "mu_phi": float,
    "nu_el": float, "alpha": _opt_float, "beta": _opt_float, "stabilization": _bool, "truncation": _bool,
    "C2": float, "E0": _floats, "omega": float, "director_bc": str, "step_constant": float,
}
SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "experiment": {"name": str},
    "mesh": {"dim": int, "n": int, "pattern": str},
    "physics": PHYSICS_KEYS,
    "time": {"k": float, "T": float},
    "initial": {"d0": _floats, "n_plus0": float, "n_minus0": float, "v0": _floats, "balance_charges": _bool},
    "solver": {"tol_fp": float, "max_outer_iters": int, "newton_tol": float, "newton_max_iters": int,
               "linear_tol": float, "freeze": _names, "order": _names, "relaxation": float,
               "anderson_depth": int},
    "output": {"dir": str, "vtk_every": int, "certify": _bool},
}


@dataclass
class ExperimentConfig:
    experiment: Experiment
    n: int
    pattern: str | None
    fixed_point: FixedPointConfig
    output_dir: str = "out"
    vtk_every: int = 0
    certify: bool = True
    initial_values: dict[str, Any] = field(default_factory=dict)

    @property
    def params(self) -> PhysParams:
        return self.experiment.params

    @property
    def dim(self) -> int:
        return self.experiment.dim

    def validate(self) -> None:
        if self.n < 1:
            raise ValidationError("n", "must be a positive integer")
        if self.vtk_every < 0:
            raise ValidationError("vtk_every", "must be non-negative")
        pattern_ok = {2: (None, "crisscross", "union_jack"), 3: (None, "tet_split")}[self.dim]
        if self.pattern not in pattern_ok:
            raise ValidationError("pattern", f"{self.pattern!r} is not available in {self.dim}-D")
        self.params.validate(self.dim, None)

    def echo(self) -> str:
        """Fully resolved configuration in the same grammar; reloading it reproduces this object."""
        p = self.params
        fp = self.fixed_point
        r = repr
        lines = ["[experiment]", f"name = {self.experiment.name}", "", "[mesh]", f"dim = {self.dim}",
                 f"n = {self.n}"]
        if self.pattern is not None:
            lines.append(f"pattern = {self.pattern}")
        lines += ["", "[physics]"]
        for key in ("nu", "A", "eps_perp", "eps_a", "lambda_npp", "mu_phi", "nu_el"):
            lines.append(f"{key} = {r(float(getattr(p, key)))}")
        lines.append(f"alpha = {'default' if p.alpha is None else r(float(p.alpha))}")
        lines.append(f"beta = {'default' if p.beta is None else r(float(p.beta))}")
        lines.append(f"stabilization = {'on' if p.stabilization_on else 'off'}")
        lines.append(f"truncation = {'on' if p.truncation_on else 'off'}")
        lines.append(f"C2 = {r(float(p.C2))}")
        lines.append("E0 = " + ", ".join(r(float(a)) for a in p.applied_field.amplitude))
        lines.append(f"omega = {r(float(p.applied_field.omega))}")
        lines.append(f"director_bc = {p.director_bc}")
        lines.append(f"step_constant = {r(float(p.step_constant))}")
        lines += ["", "[time]", f"k = {r(float(p.k))}", f"T = {r(float(p.T))}"]
        if self.initial_values:
            lines += ["", "[initial]"]
            for key, val in self.initial_values.items():
                if isinstance(val, bool):
                    lines.append(f"{key} = {'on' if val else 'off'}")
                elif isinstance(val, tuple):
                    lines.append(f"{key} = " + ", ".join(r(float(a)) for a in val))
                else:
                    lines.append(f"{key} = {r(float(val))}")
        lines += ["", "[solver]", f"tol_fp = {r(fp.tol_fp)}", f"max_outer_iters = {fp.max_outer_iters}",
                  f"newton_tol = {r(fp.newton_tol)}", f"newton_max_iters = {fp.newton_max_iters}",
                  f"linear_tol = {r(fp.linear_tol)}", "freeze = " + ", ".join(sorted(fp.freeze)),
                  "order = " + ", ".join(fp.order), f"relaxation = {r(fp.relaxation)}",
                  f"anderson_depth = {fp.anderson_depth}"]
        lines += ["", "[output]", f"dir = {self.output_dir}", f"vtk_every = {self.vtk_every}",
                  f"certify = {'on' if self.certify else 'off'}", ""]
        return "\n".join(lines)


def _read(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                                   strict=True, interpolation=None, empty_lines_in_values=False)
    cp.optionxform = str  # keys are case sensitive (A, T, E0)
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(exc.lineno, "key outside of a section") from exc
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ParseError(exc.lineno, str(exc).splitlines()[0]) from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ParseError(lineno, "malformed line (expected key = value)") from exc
    return cp


def _convert(section: str, key: str, raw: str) -> Any:
    try:
        return SCHEMA[section][key](raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(key, f"invalid value {raw!r}: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    cp = _read(text)
    values: dict[str, dict[str, Any]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ValidationError(section, "unknown section")
        values[section] = {}
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ValidationError(key, f"unknown key in [{section}]")
            values[section][key] = _convert(section, key, raw)

    name = values.get("experiment", {}).get("name")
    if not name:
        raise ValidationError("experiment", "an experiment name is required")
    try:
        exp = experiment_catalogue(name)
    except UnknownExperiment as exc:
        raise ValidationError("experiment", str(exc)) from exc
    mesh = values.get("mesh", {})
    if "n" not in mesh:
        raise ValidationError("n", "the mesh size is required")
    if "dim" in mesh and mesh["dim"] != exp.dim:
        if name != "custom":
            raise ValidationError("dim", f"experiment {name} is {exp.dim}-D")
        if mesh["dim"] not in (2, 3):
            raise ValidationError("dim", "must be 2 or 3")
        exp = exp.with_(dim=mesh["dim"])

    phys = dict(values.get("physics", {}))
    kw: dict[str, Any] = {}
    for key in ("nu", "A", "eps_perp", "eps_a", "lambda_npp", "mu_phi", "nu_el", "alpha", "beta", "C2",
                "director_bc", "step_constant"):
        if key in phys:
            kw[key] = phys.pop(key)
    if "stabilization" in phys:
        kw["stabilization_on"] = phys.pop("stabilization")
    if "truncation" in phys:
        kw["truncation_on"] = phys.pop("truncation")
    if "E0" in phys or "omega" in phys:
        old = exp.params.applied_field
        amp = phys.pop("E0", old.amplitude)
        kw["applied_field"] = AppliedField(tuple(float(a) for a in amp), float(phys.pop("omega", old.omega)))
    kw.update(values.get("time", {}))
    params = exp.params.with_(**kw)

    init_values = values.get("initial", {})
    initial = exp.initial
    if init_values:
        if name != "custom":
            raise ValidationError("initial", "initial data can only be set for the custom experiment")
        initial = _custom_initial(init_values, exp.dim)
    exp = exp.with_(params=params, initial=initial)

    sv = dict(values.get("solver", {}))
    freeze = frozenset(sv.pop("freeze", exp.freeze))
    if "order" in sv:
        sv["order"] = tuple(sv["order"])
    try:
        fp = FixedPointConfig(freeze=freeze, **sv)
    except ValueError as exc:
        bad = "freeze" if set(freeze) - set(SUBSOLVES) else next(iter(sv), "solver")
        raise ValidationError(bad, str(exc)) from exc
    exp = exp.with_(freeze=freeze)

    out = values.get("output", {})
    cfg = ExperimentConfig(experiment=exp, n=mesh["n"], pattern=mesh.get("pattern"), fixed_point=fp,
                           output_dir=out.get("dir", "out"), vtk_every=out.get("vtk_every", 0),
                           certify=out.get("certify", True), initial_values=dict(init_values))
    cfg.validate()
    return cfg


def _custom_initial(vals: dict[str, Any], dim: int) -> InitialData:
    d0 = vals.get("d0", (0.0, 0.0, 1.0))
    if len(d0) != 3:
        raise ValidationError("d0", "needs three components")
    if np.linalg.norm(d0) == 0:
        raise ValidationError("d0", "must be nonzero")
    v0 = vals.get("v0")
    if v0 is not None and len(v0) != dim:
        raise ValidationError("v0", f"needs {dim} components")
    for key in ("n_plus0", "n_minus0"):
        if key in vals and not 0.0 <= vals[key] <= 1.0:
            raise ValidationError(key, "must lie in [0, 1]")
    return InitialData(d0=constant(d0), n_plus0=constant(vals.get("n_plus0", 0.0)),
                       n_minus0=constant(vals.get("n_minus0", 0.0)),
                       v0=None if v0 is None else constant(v0),
                       balance_charges=vals.get("balance_charges", False))


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError("config", f"cannot read {path}: {exc}") from exc
    return parse_config(text)


def config_from_experiment(name: str, n: int | None = None) -> ExperimentConfig:
    exp = experiment_catalogue(name)
    cfg = ExperimentConfig(experiment=exp, n=exp.n if n is None else n, pattern=exp.pattern,
                           fixed_point=FixedPointConfig(freeze=exp.freeze))
    cfg.validate()
    return cfg


def with_overrides(cfg: ExperimentConfig, *, n: int | None = None, dt: float | None = None,
                   tmax: float | None = None, stabilization: bool | None = None,
                   certify: bool | None = None, out: str | None = None) -> ExperimentConfig:
    kw: dict[str, Any] = {}
    if dt is not None:
        kw["k"] = dt
    if tmax is not None:
        kw["T"] = tmax
    if stabilization is not None:
        kw["stabilization_on"] = stabilization
    exp = cfg.experiment.with_(params=cfg.params.with_(**kw)) if kw else cfg.experiment
    new = replace(cfg, experiment=exp, n=cfg.n if n is None else n,
                  certify=cfg.certify if certify is None else certify,
                  output_dir=cfg.output_dir if out is None else out)
    new.validate()
    return new
