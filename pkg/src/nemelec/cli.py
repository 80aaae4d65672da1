"""Command-line driver.

Exit codes: 0 success, 1 invalid input (flags, configuration, parameters,
initial data), 2 solver failure.
"""
from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path
from typing import Sequence

from .certificates import total_energy
from .config import ExperimentConfig, ParseError, config_from_experiment, load_config, with_overrides
from .experiments import UnknownExperiment, experiment_names
from .io import IoError, TimeseriesWriter, write_vtk
from .mesh import MeshError, build_structured_mesh
from .scheme import SchemeError, divergence_residual, run
from .state import IncompatibleCharges, UnnormalizableDirector, ValidationError, check_invariants, initialize_state

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise _ArgumentError(message)


def _on_off(s: str) -> bool:
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return s == "on"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nemelec", description="Run a nematic electrolyte simulation.")
    p.add_argument("--config", metavar="PATH", help="configuration file (required unless --experiment)")
    p.add_argument("--experiment", metavar="NAME", help="preset name: " + ", ".join(experiment_names()))
    p.add_argument("--out", metavar="DIR", help="output directory (overrides the configuration)")
    p.add_argument("--n", type=int, help="cells per axis")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--tmax", type=float, help="final time")
    p.add_argument("--stabilization", type=_on_off, metavar="{on,off}")
    p.add_argument("--certify", type=_on_off, metavar="{on,off}",
                   help="M-matrix audits and invariant checks every step")
    p.add_argument("--vtk-every", type=int, metavar="N", help="snapshot cadence in steps (0: first and last)")
    p.add_argument("--quiet", action="store_true")
    return p


def _resolve(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
        if args.experiment and args.experiment != cfg.experiment.name:
            raise ValidationError("experiment", "conflicts with the configuration file")
    else:
        try:
            cfg = config_from_experiment(args.experiment)
        except UnknownExperiment as exc:
            raise ValidationError("experiment", str(exc)) from exc
    cfg = with_overrides(cfg, n=args.n, dt=args.dt, tmax=args.tmax, stabilization=args.stabilization,
                         certify=args.certify, out=args.out)
    if args.vtk_every is not None:
        if args.vtk_every < 0:
            raise ValidationError("vtk_every", "must be non-negative")
        cfg.vtk_every = args.vtk_every
    return cfg


def execute(cfg: ExperimentConfig, log=print) -> int:
    """Run a resolved configuration and write all outputs; returns the exit code."""
    exp = cfg.experiment
    params = cfg.params
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.echo())
    mesh = build_structured_mesh(cfg.n, box=exp.box, pattern=cfg.pattern, dim=exp.dim)
    params.validate(exp.dim, mesh.h)
    fp = cfg.fixed_point
    if not cfg.certify:
        from dataclasses import replace
        fp = replace(fp, audit=False)
    state0 = initialize_state(mesh, params, exp.initial, tol=fp.linear_tol)
    n_steps = int(math.floor(params.T / params.k + 1e-9))
    log(f"{exp.name}: dim={exp.dim} n={cfg.n} nodes={mesh.n_nodes} elements={mesh.n_elements} "
        f"k={params.k!r} steps={n_steps}")

    snapshots = []

    def snapshot(state):
        path = out / f"state_{state.step_index:06d}.vtk"
        write_vtk(state, mesh, path)
        snapshots.append(path.name)

    every = cfg.vtk_every
    worst = {"invariants": 0}
    t0 = time.perf_counter()
    with TimeseriesWriter(out / "timeseries.csv") as ts:
        ts.write_initial(state0, total_energy(state0, mesh, params), divergence_residual(mesh, state0.v))
        snapshot(state0)

        def on_step(state, cert):
            ts.write(cert)
            if every and state.step_index % every == 0:
                snapshot(state)
            if cfg.certify:
                rep = check_invariants(state, mesh, max_principle=False)
                worst["invariants"] = max(worst["invariants"], len(rep))

        traj = run(mesh, params, fp, state0, n_steps, keep_states=False, on_step=on_step)
    final = traj.final
    if not snapshots or snapshots[-1] != f"state_{final.step_index:06d}.vtk":
        snapshot(final)
    elapsed = time.perf_counter() - t0
    certs = traj.certificates
    summary = [f"experiment = {exp.name}", f"steps = {len(certs)}", f"t_final = {final.t!r}",
               f"energy_initial = {total_energy(state0, mesh, params)!r}",
               f"energy_final = {total_energy(final, mesh, params)!r}"]
    if certs:
        summary += [
            f"max_energy_residual = {max(abs(c.energy_residual) for c in certs)!r}",
            f"max_norm_violation = {max(c.max_norm_violation for c in certs)!r}",
            f"max_charge_mass_drift = {max(c.charge_mass_drift for c in certs)!r}",
            f"max_divergence = {max(c.divergence_norm for c in certs)!r}",
            f"n_plus_range = {min(c.n_plus_min for c in certs)!r} {max(c.n_plus_max for c in certs)!r}",
            f"n_minus_range = {min(c.n_minus_min for c in certs)!r} {max(c.n_minus_max for c in certs)!r}",
        ]
        audits = [a for c in certs for a in (c.m_matrix_plus, c.m_matrix_minus) if a is not None]
        if audits:
            summary.append(f"m_matrix_failures = {sum(not a.passed for a in audits)} of {len(audits)}")
    summary.append(f"status = {'ok' if traj.ok else 'solver failure: ' + str(traj.error)}")
    summary.append(f"wall_time_s = {elapsed:.2f}")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    for line in summary:
        log(line)
    if not traj.ok:
        print(f"error: {traj.error}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if not args.config and not args.experiment:
        parser.print_usage(sys.stderr)
        print("error: one of --config or --experiment is required", file=sys.stderr)
        return EXIT_INVALID
    log = (lambda *a, **k: None) if args.quiet else print
    try:
        cfg = _resolve(args)
        return execute(cfg, log=log)
    except (ValidationError, ParseError, IncompatibleCharges, UnnormalizableDirector, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SchemeError as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
