"""Acceptance criteria 1-10.

Each test logs one PASS/FAIL line through the ``criterion_log`` fixture; the
lines are repeated in the terminal summary.  Expensive runs are cached per
module and shared between criteria; criteria 4 and 5 are checked over every
run recorded here.
"""
import math

import numpy as np
import pytest

from nemelec.certificates import DiscreteReference, bump_weight, gronwall_accumulate, relative_energy
from nemelec.experiments import (defect_locations, director_gradient_energy, experiment_catalogue,
                                 rotation_angle)
from nemelec.mesh import build_structured_mesh, mesh_from_arrays
from nemelec.quadrature import simplex_rule
from nemelec.assembly import p1_at_points
from nemelec.scheme import FixedPointConfig, run, solve_potential
from nemelec.state import PhysParams, initialize_state
from oracles import (max_relative_discrepancy, oracle_operators, package_operators, random_operator_data,
                     random_two_element_mesh)

RUNS: dict[str, dict] = {}


def tracked_run(label, mesh, params, fp, initial, n_steps, on_step=None):
    """Run and record charge masses and divergence residuals of every step."""
    m = mesh.lumped_mass
    state0 = initialize_state(mesh, params, initial, tol=fp.linear_tol)
    rec = {"mass0": (m @ state0.n_plus, m @ state0.n_minus), "masses": [], "divergence": [], "volume": mesh.volume}

    def cb(state, cert):
        rec["masses"].append((m @ state.n_plus, m @ state.n_minus))
        rec["divergence"].append(cert.divergence_norm)
        if on_step is not None:
            on_step(state, cert)

    traj = run(mesh, params, fp, state0, n_steps, keep_states=False, on_step=cb)
    rec["traj"] = traj
    rec["initial"] = state0
    RUNS[label] = rec
    return rec


@pytest.fixture(scope="module")
def defect_run_c1():
    exp = experiment_catalogue("defect_flow")
    mesh = build_structured_mesh(16, box=exp.box)
    params = exp.params.with_(k=1e-3, stabilization_on=False)
    return mesh, params, tracked_run("c1 defect_flow n=16", mesh, params, FixedPointConfig(), exp.initial, 40)


def test_criterion_01_sphere_constraint(defect_run_c1, criterion_log):
    mesh, params, rec = defect_run_c1
    traj = rec["traj"]
    worst = max(c.max_norm_violation for c in traj.certificates)
    ok = traj.ok and len(traj.certificates) == 40 and worst <= 1e-8
    criterion_log(1, ok, f"max ||d|-1| = {worst:.2e} over 40 steps (tol 1e-8)")
    assert ok


def test_criterion_02_energy_law(defect_run_c1, criterion_log):
    mesh, params, rec = defect_run_c1
    certs = rec["traj"].certificates
    e0 = certs[0].energy_before
    tol = 1e-8 * max(e0, 1.0)
    worst = max(abs(c.energy_residual) for c in certs)
    energies = [e0] + [c.energy_after for c in certs]
    rise = max(np.diff(energies))
    ok = worst <= tol and rise <= tol
    criterion_log(2, ok, f"max |residual| = {worst:.2e}, max energy increase = {rise:.2e} (tol {tol:.1e})")
    assert ok


@pytest.fixture(scope="module")
def anisotropic_runs():
    exp = experiment_catalogue("anisotropic_diffusion_2d")
    mesh = build_structured_mesh(16, box=exp.box)
    k = mesh.h / 2
    fp = FixedPointConfig(anderson_depth=5, max_outer_iters=400)
    out = {}
    for stab in (True, False):
        params = exp.params.with_(k=k, stabilization_on=stab)
        out[stab] = tracked_run(f"c3 anisotropic stabilization={'on' if stab else 'off'}", mesh, params, fp,
                                exp.initial, 4)
    return mesh, k, out


def _bounds(certs):
    lo = min(min(c.n_plus_min, c.n_minus_min) for c in certs)
    hi = max(max(c.n_plus_max, c.n_minus_max) for c in certs)
    return lo, hi


def test_criterion_03_maximum_principle_and_m_matrix(anisotropic_runs, criterion_log):
    mesh, k, runs = anisotropic_runs
    traj = runs[True]["traj"]
    certs = traj.certificates
    audits = [a for c in certs for a in (c.m_matrix_plus, c.m_matrix_minus)]
    failed = [a for a in audits if not a.passed]
    lo, hi = _bounds(certs) if certs else (np.nan, np.nan)
    bounds_ok = -1e-10 <= lo and hi <= 1 + 1e-10
    worst = max((a.max_offdiag for a in audits), default=np.nan)
    off = runs[False]["traj"]
    lo_off, hi_off = _bounds(off.certificates) if off.certificates else (np.nan, np.nan)
    ok = traj.ok and len(certs) == 4 and not failed and bounds_ok
    criterion_log(3, ok, f"k={k:.4g}: M-matrix audits failed {len(failed)}/{len(audits)} "
                         f"(max off-diagonal {worst:.3g}); n in [{lo:.3g}, {hi:.3g}]; "
                         f"without stabilization n in [{lo_off:.3g}, {hi_off:.3g}]")
    assert traj.ok and len(certs) == 4
    assert bounds_ok
    assert not failed, f"{len(failed)} of {len(audits)} M-matrix audits failed"


def test_criterion_06_potential_convergence_rate(criterion_log):
    params = PhysParams(eps_perp=1.0, eps_a=0.0, mu_phi=1.0)

    def exact(x):
        return np.cos(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1])

    errs = []
    for n in (8, 16, 32):
        mesh = build_structured_mesh(n, box=((0.0, 1.0), (0.0, 1.0)))
        d = np.tile([1.0, 0.0, 0.0], (mesh.n_nodes, 1))
        phi = solve_potential(mesh, params, d, 2 * np.pi ** 2 * exact(mesh.nodes))
        lam, w = simplex_rule(2, 8)
        x = np.einsum("eak,qa->eqk", mesh.nodes[mesh.elements], lam)
        e = p1_at_points(mesh, phi, lam) - exact(x)
        errs.append(math.sqrt(np.sum(mesh.elem_volume[:, None] * w[None, :] * e ** 2)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    ok = bool(np.all(rates >= 1.8))
    criterion_log(6, ok, "L2 errors " + ", ".join(f"{e:.3e}" for e in errs) + " rates "
                  + ", ".join(f"{r:.3f}" for r in rates))
    assert ok


def test_criterion_07_assembly_oracle(criterion_log):
    rng = np.random.default_rng(20240607)
    worst: dict[str, float] = {}
    for dim in (2, 3):
        for _ in range(100):
            nodes, elements = random_two_element_mesh(rng, dim)
            mesh = mesh_from_arrays(nodes, elements)
            data = random_operator_data(rng, nodes, elements)
            errs = max_relative_discrepancy(package_operators(mesh, data), oracle_operators(nodes, elements, data))
            for key, val in errs.items():
                worst[key] = max(worst.get(key, 0.0), val)
    top = max(worst.values())
    ok = top <= 1e-12
    criterion_log(7, ok, f"200 trials (2-D and 3-D), worst relative discrepancy {top:.2e} "
                         f"in {max(worst, key=worst.get)}")
    assert ok, worst


@pytest.fixture(scope="module")
def self_convergence_runs():
    exp = experiment_catalogue("defect_flow")
    out = {}
    for n, k in ((8, 2e-3), (16, 1e-3), (32, 5e-4)):
        mesh = build_structured_mesh(n, box=exp.box)
        params = exp.params.with_(k=k, T=0.02)
        rec = tracked_run(f"c8 defect_flow n={n}", mesh, params, FixedPointConfig(), exp.initial,
                          int(round(0.02 / k)))
        out[n] = (mesh, params, rec["traj"])
    return out


def test_criterion_08_self_convergence(self_convergence_runs, criterion_log):
    fine_mesh, _, fine = self_convergence_runs[32]
    ref = DiscreteReference(fine_mesh, [fine.final])
    values = {}
    for n in (8, 16, 32):
        mesh, params, traj = self_convergence_runs[n]
        values[n] = relative_energy(traj.final, ref, mesh, params, t=fine.final.t, quad_mesh=fine_mesh)
    ok = all(t.ok for _, _, t in self_convergence_runs.values()) and values[8] > values[16] > values[32]
    criterion_log(8, ok, "R(T) against n=32: " + ", ".join(f"n={n}: {v:.3e}" for n, v in values.items()))
    assert ok


def admissible_sequence(rng):
    J = int(rng.integers(1, 40))
    k = float(rng.uniform(0.005, 0.2))
    g1 = rng.uniform(0.0, 0.9 / k, J + 1)
    g2 = rng.uniform(0.0, 5.0, J + 1)
    f = rng.uniform(0.0, 2.0, J + 1)
    s = rng.uniform(0.0, 2.0, J + 1)
    y = np.zeros(J + 1)
    y[0] = rng.uniform(0.0, 5.0)
    for j in range(1, J + 1):
        y[j] = (y[j - 1] * (1 + k * g2[j]) - k * f[j] - k * s[j]) / (1 - k * g1[j])
        if y[j] < 0:
            f[j] = s[j] = 0.0
            y[j] = y[j - 1] * (1 + k * g2[j]) / (1 - k * g1[j])
    return y, f, g1, g2, k


def test_criterion_09_gronwall(criterion_log):
    rng = np.random.default_rng(9)
    verified = rejected = refuted = 0
    for _ in range(1000):
        y, f, g1, g2, k = admissible_sequence(rng)
        J = len(y) - 1
        phi = bump_weight(rng.uniform(0.2, 1.0) * (J + 1) * k)
        if gronwall_accumulate(y, f, g1, g2, k, phi=phi).verified:
            verified += 1
        # violate the hypothesis at one step by exceeding its upper bound for y^j
        j = int(rng.integers(1, J + 1))
        bound = (y[j - 1] * (1 + k * g2[j]) - k * f[j]) / (1 - k * g1[j])
        bad = y.copy()
        bad[j] = 1.5 * max(bound, 0.0) + 1.0
        rep = gronwall_accumulate(bad, f, g1, g2, k, phi=phi)
        rejected += not rep.verified
        refuted += not rep.conclusion_holds
    ok = verified == 1000 and rejected == 1000
    criterion_log(9, ok, f"verified {verified}/1000 admissible sequences; perturbed sequences rejected "
                         f"{rejected}/1000 (conclusion itself false in {refuted} of them)")
    assert ok


@pytest.fixture(scope="module")
def qualitative_runs():
    out = {}
    for name, T in (("defect_flow", 0.1), ("velocity_flow", 0.15)):
        exp = experiment_catalogue(name)
        mesh = build_structured_mesh(16, box=exp.box)
        s0 = initialize_state(mesh, exp.params, exp.initial)
        locs = [(0.0, defect_locations(s0, mesh))]
        grad = [director_gradient_energy(s0, mesh)]

        def cb(s, c, mesh=mesh, locs=locs, grad=grad):
            locs.append((s.t, defect_locations(s, mesh)))
            grad.append(director_gradient_energy(s, mesh))

        rec = tracked_run(f"c10 {name}", mesh, exp.params, FixedPointConfig(), exp.initial,
                          int(round(T / exp.params.k)), on_step=cb)
        out[name] = (mesh, rec["traj"], locs, grad)
    return out


def test_criterion_10a_defects_annihilate(qualitative_runs, criterion_log):
    mesh, traj, locs, grad = qualitative_runs["defect_flow"]
    sep0 = float(np.linalg.norm(locs[0][1][0] - locs[0][1][1]))
    sep_mid = min(float(np.linalg.norm(l[0] - l[1])) for t, l in locs if t <= 0.05 + 1e-12)
    ratio = grad[-1] / grad[0]
    ok = traj.ok and sep_mid <= 0.5 * sep0 and ratio < 0.05
    criterion_log("10a", ok, f"defect separation {sep0:.3f} -> {sep_mid:.3f} by t=0.05; "
                             f"|grad d|^2 {grad[0]:.3f} -> {grad[-1]:.3f} (ratio {ratio:.4f} < 0.05)")
    assert ok


def test_criterion_10b_defects_rotate(qualitative_runs, criterion_log):
    mesh, traj, locs, grad = qualitative_runs["velocity_flow"]
    angle = sum(rotation_angle(a, b) for (_, a), (_, b) in zip(locs[:-1], locs[1:]))
    ok = traj.ok and abs(angle) > math.pi / 4
    criterion_log("10b", ok, f"accumulated defect rotation {angle:.3f} rad by t={locs[-1][0]:.3f} "
                             f"(needs > pi/4 = {math.pi / 4:.3f})")
    assert ok


def test_criterion_04_charge_conservation(defect_run_c1, anisotropic_runs, self_convergence_runs,
                                          qualitative_runs, criterion_log):
    worst, where = 0.0, ""
    for label, rec in RUNS.items():
        for c, m0 in enumerate(rec["mass0"]):
            scale = m0 if m0 > 0 else rec["volume"]
            for masses in rec["masses"]:
                rel = abs(masses[c] - m0) / scale
                if rel > worst:
                    worst, where = rel, label
    ok = worst <= 1e-10
    criterion_log(4, ok, f"{len(RUNS)} runs, worst relative charge mass drift {worst:.2e}"
                         + (f" ({where})" if where else ""))
    assert ok


def test_criterion_05_discrete_divergence(defect_run_c1, anisotropic_runs, self_convergence_runs,
                                          qualitative_runs, criterion_log):
    worst, where = 0.0, ""
    count = 0
    for label, rec in RUNS.items():
        for val in rec["divergence"]:
            count += 1
            if val > worst:
                worst, where = val, label
    ok = worst <= 1e-12
    criterion_log(5, ok, f"{count} velocity solves in {len(RUNS)} runs, max |(div v, q)| = {worst:.2e}"
                         + (f" ({where})" if where else ""))
    assert ok
