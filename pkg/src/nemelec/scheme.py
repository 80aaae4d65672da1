"""Time stepping for the coupled velocity / director / charge / potential system.

Each step runs an outer fixed-point loop over four linear or nodal sub-solves
(potential, charges, director, velocity).  At the fixed point the discrete
energy law, the nodal unit-length constraint and charge conservation hold up
to solver tolerances.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import assembly as asm
from .linalg import (DEFAULT_TOL, NoConvergence, audit_m_matrix, factorized, ilu_preconditioner,
                     solve_nonsymmetric,
                     solve_saddle, solve_spd)
from .mesh import TriMesh
from .state import DiscreteState, InitialData, PhysParams, StepCertificate, initialize_state

SUBSOLVES = ("potential", "charges", "director", "velocity")


class SchemeError(RuntimeError):
    pass


class FixedPointDiverged(SchemeError):
    pass


class NewtonDiverged(SchemeError):
    pass


class SubSolveFailed(SchemeError):
    pass


@dataclass(frozen=True)
class FixedPointConfig:
    tol_fp: float = 1e-9
    max_outer_iters: int = 200
    newton_tol: float = 1e-12
    newton_max_iters: int = 30
    linear_tol: float = DEFAULT_TOL
    order: tuple[str, ...] = SUBSOLVES
    freeze: frozenset = frozenset()
    audit: bool = True
    relaxation: float = 1.0  # damping of the outer update, 1 = plain Picard
    anderson_depth: int = 0  # Anderson mixing history, 0 = off

    def __post_init__(self):
        if not 0.0 < self.relaxation <= 1.0:
            raise ValueError("relaxation must lie in (0, 1]")
        if self.anderson_depth < 0:
            raise ValueError("anderson_depth must be non-negative")
        if self.tol_fp <= 0 or self.newton_tol <= 0 or self.linear_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer_iters < 1 or self.newton_max_iters < 1:
            raise ValueError("iteration caps must be positive")
        if sorted(self.order) != sorted(SUBSOLVES):
            raise ValueError(f"order must be a permutation of {SUBSOLVES}")
        unknown = set(self.freeze) - set(SUBSOLVES)
        if unknown:
            raise ValueError(f"unknown sub-solves in freeze: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# small helpers


def truncation_phi_gamma(s, gamma: float):
    """C^1 cutoff phi(gamma * s): one on [0, 1], zero on [2, inf), cubic in between."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    t = gamma * np.abs(np.asarray(s, dtype=float))
    u = np.clip(t - 1.0, 0.0, 1.0)
    out = 1.0 - u * u * (3.0 - 2.0 * u)
    return float(out) if out.ndim == 0 else out


def truncation_gamma(params: PhysParams, mesh: TriMesh) -> float:
    return 0.5 * params.C2 * mesh.h ** (mesh.dim / 2)


def _shift(params: PhysParams, t: float) -> Optional[np.ndarray]:
    if params.applied_field.is_zero:
        return None
    return params.applied_field(t)


def _director_free(mesh: TriMesh, params: PhysParams) -> np.ndarray:
    if params.director_bc == "dirichlet":
        return ~mesh.boundary_mask
    return np.ones(mesh.n_nodes, dtype=bool)


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.cross(a, b)


def _wrap(label: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except NoConvergence as exc:
        raise SubSolveFailed(f"{label}: {exc}") from exc


# ---------------------------------------------------------------------------
# potential


def solve_potential(mesh: TriMesh, params: PhysParams, d: np.ndarray, rho: np.ndarray,
                    tol: float = DEFAULT_TOL, x0: np.ndarray | None = None) -> np.ndarray:
    """mu_phi (eps(d) grad Phi, grad g) = (rho, g)_h with zero lumped mean."""
    m = mesh.lumped_mass
    rhs = m * rho
    if params.potential_degenerate:
        if np.abs(rhs).max(initial=0.0) > 1e-13:
            raise SchemeError("charge density is nonzero but the potential operator vanishes")
        return np.zeros(mesh.n_nodes)
    K = asm.assemble_stiffness_aniso(mesh, d, params.eps_perp, params.eps_a, params.mu_phi)
    return _wrap("potential", solve_spd, K, rhs, tol, "constants", weights=m, x0=x0)


# ---------------------------------------------------------------------------
# charges


def _cutoff_weight(mesh: TriMesh, params: PhysParams, n: np.ndarray) -> np.ndarray:
    lam, _ = asm.simplex_rule(mesh.dim, mesh.dim + 4)
    nq = asm.p1_at_points(mesh, n, lam)
    return truncation_phi_gamma(nq, truncation_gamma(params, mesh))


def charge_matrix(mesh: TriMesh, params: PhysParams, d: np.ndarray, v: np.ndarray, phi: np.ndarray,
                  sign: int, shift: np.ndarray | None = None, n_iter: np.ndarray | None = None,
                  K: sp.spmatrix | None = None) -> sp.csr_matrix:
    """(1/k) M + mu_phi K(d) + lambda_npp C1(v) + C2(phi, d), in [trial, test] indexing."""
    k = params.k
    if K is None:
        K = asm.assemble_stiffness_aniso(mesh, d, params.eps_perp, params.eps_a, params.mu_phi)
    weight = _cutoff_weight(mesh, params, n_iter) if params.truncation_on and n_iter is not None else None
    B = sp.diags(mesh.lumped_mass / k) + K
    if params.lambda_npp != 0.0:
        B = B + params.lambda_npp * asm.assemble_convection_charge(mesh, v, weight)
    if not params.potential_degenerate:
        B = B + asm.assemble_drift_charge(mesh, d, phi, params.eps_perp, params.eps_a, sign, shift, weight)
    return sp.csr_matrix(B)


# ---------------------------------------------------------------------------
# director


def _q_operator(mesh: TriMesh, params: PhysParams) -> sp.csr_matrix:
    """Linear part of the nodal map d_half -> q (per component)."""
    cache = asm._cache(mesh)
    key = ("q_op", params.A, params.stabilization_on, params.beta, params.alpha, params.director_bc)
    if key not in cache:
        S = asm.p1_stiffness(mesh)
        m = mesh.lumped_mass
        free = _director_free(mesh, params)
        op = params.A * S
        if params.stabilization_on:
            _, beta = params.stabilization_exponents(mesh.dim)
            op = op + mesh.h ** beta * (S @ sp.diags(free / m) @ S)
        cache[key] = sp.csr_matrix(sp.diags(free / m) @ op)
    return cache[key]


def director_q(mesh: TriMesh, params: PhysParams, d_half: np.ndarray, d_prev: np.ndarray, phi: np.ndarray,
               shift: np.ndarray | None = None) -> np.ndarray:
    """Nodal auxiliary variable from the lumped q-equation."""
    q = _q_operator(mesh, params) @ d_half
    if params.eps_a != 0.0 and params.mu_phi != 0.0 and not params.potential_degenerate:
        g = asm.effective_gradient(mesh, phi, shift)
        F = asm.director_field_force(mesh, d_prev, g)
        free = _director_free(mesh, params)
        q -= params.mu_phi * params.eps_a * (free / mesh.lumped_mass)[:, None] * F
    return q


def _block_diag(blocks: np.ndarray) -> sp.bsr_matrix:
    n = len(blocks)
    return sp.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)), shape=(3 * n, 3 * n))


def director_newton(d_prev: np.ndarray, v_new: np.ndarray, phi_new: np.ndarray, mesh: TriMesh,
                    params: PhysParams, cfg: FixedPointConfig, *, shift: np.ndarray | None = None,
                    grad_proj: np.ndarray | None = None, stats: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Solve the nodal director equation for d_new and return (d_new, q_new).

    Residual per free node: d - d_prev - k * a x (a x w), a = (d + d_prev)/2,
    w = q(a) + nu_el * G v.  Fixed (Dirichlet) nodes keep their values.
    """
    k = params.k
    L = mesh.n_nodes
    free = _director_free(mesh, params)
    Q = _q_operator(mesh, params)
    q_const = director_q(mesh, params, np.zeros_like(d_prev), d_prev, phi_new, shift)
    if grad_proj is None:
        grad_proj = asm.lumped_l2_project_gradient(mesh, d_prev)
    vn = np.asarray(v_new)[:L]
    conv = params.nu_el * np.einsum("zcd,zd->zc", grad_proj, vn)
    conv[~free] = 0.0

    def parts(x):
        a = 0.5 * (x + d_prev)
        q = Q @ a + q_const
        w = q + conv
        return a, q, w

    def residual(x):
        a, q, w = parts(x)
        r = x - d_prev - k * _cross(a, _cross(a, w))
        r[~free] = (x - d_prev)[~free]
        return r

    QI = sp.kron(Q, sp.identity(3), format="csr")
    x = d_prev.copy()
    r = residual(x)
    rn = np.abs(r).max(initial=0.0)
    it = 0
    floor = 100.0 * cfg.newton_tol
    while rn > cfg.newton_tol:
        if it >= cfg.newton_max_iters:
            raise NewtonDiverged(f"no convergence after {it} iterations, residual {rn:.3e}")
        it += 1
        a, q, w = parts(x)
        aw = np.einsum("zi,zi->z", a, w)
        aa = np.einsum("zi,zi->z", a, a)
        eye = np.eye(3)[None]
        D1 = (a[:, :, None] * w[:, None, :] + aw[:, None, None] * eye - 2.0 * w[:, :, None] * a[:, None, :])
        D2 = a[:, :, None] * a[:, None, :] - aa[:, None, None] * eye
        D1[~free] = 0.0
        D2[~free] = 0.0
        J = sp.identity(3 * L, format="csr") - 0.5 * k * (_block_diag(D1).tocsr() + _block_diag(D2).tocsr() @ QI)
        # the Jacobian changes little within a step, so one factorization serves as preconditioner
        if stats is not None and "precond" in stats:
            pc = stats["precond"]
        else:
            pc = ilu_preconditioner(J)
            if stats is not None:
                stats["precond"] = pc
        delta = _wrap("director", solve_nonsymmetric, J, -r.ravel(), cfg.linear_tol, precond=pc).reshape(L, 3)
        step = 1.0
        accepted = False
        for _ in range(9):
            x_try = x + step * delta
            r_try = residual(x_try)
            rn_try = np.abs(r_try).max()
            if rn_try < rn:
                x, r, rn = x_try, r_try, rn_try
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if rn <= floor:
                break  # round-off floor reached
            raise NewtonDiverged(f"damping exhausted at residual {rn:.3e}")
    _, q, _ = parts(x)
    drift = np.abs(np.linalg.norm(x, axis=1) - np.linalg.norm(d_prev, axis=1)).max(initial=0.0)
    if drift > 1e-8:
        raise NewtonDiverged(f"nodal length drift {drift:.3e}")
    if stats is not None:
        stats["iterations"] = stats.get("iterations", 0) + it
        stats["residual"] = rn
    return x, q


# ---------------------------------------------------------------------------
# velocity


class VelocitySystem:
    """Momentum block for one time step, factorized once and reused."""

    def __init__(self, mesh: TriMesh, params: PhysParams, v_prev: np.ndarray, tol: float):
        self.mesh = mesh
        self.params = params
        self.tol = tol
        space = asm.mini_space(mesh)
        self.space = space
        k = params.k
        dim = mesh.dim
        free = np.ones(space.size, dtype=bool)
        free[mesh.boundary_nodes] = False
        self.free = np.flatnonzero(free)
        nu_eff = params.nu
        self.h_alpha = 0.0
        if params.stabilization_on:
            alpha, _ = params.stabilization_exponents(dim)
            self.h_alpha = mesh.h ** alpha
            nu_eff = params.nu + self.h_alpha / k
        Mv, Lv = space.mass(), space.stiffness()
        A = Mv / k + nu_eff * Lv
        self.symmetric = not np.any(v_prev)
        if not self.symmetric:
            A = A + space.convection(v_prev)
        A = sp.csc_matrix(A[self.free][:, self.free])
        self._lu = spla.splu(A)
        self.A = A
        nf = len(self.free)
        self.B = sp.hstack([Bc[:, self.free] for Bc in space.divergence()], format="csr")
        self.nf = nf
        self.dim = dim
        m = mesh.lumped_mass
        lp = _pressure_laplace(mesh)
        inv_k = 1.0 / k

        def schur_precond(r):
            return nu_eff * r / m + inv_k * lp(r)

        self.schur_precond = schur_precond
        self.rhs_base = (Mv @ v_prev) / k
        if self.h_alpha:
            self.rhs_base += (self.h_alpha / k) * (Lv @ v_prev)
        self._p0 = None

    def A_solve(self, rhs: np.ndarray) -> np.ndarray:
        blocks = rhs.reshape(self.dim, self.nf).T
        return self._lu.solve(np.ascontiguousarray(blocks)).T.ravel()

    def solve(self, load: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``load`` is the full right-hand side on the scalar MINI space, shape (size, dim)."""
        f = load[self.free].T.ravel()
        u, p = _wrap("velocity", solve_saddle, None, self.B, f, self.tol, A_solve=self.A_solve,
                     schur_precond=self.schur_precond, symmetric=self.symmetric, p0=self._p0,
                     pressure_weights=self.mesh.lumped_mass)
        self._p0 = p
        v = np.zeros((self.space.size, self.dim))
        v[self.free] = u.reshape(self.dim, self.nf).T
        return v, p


def _pressure_laplace(mesh: TriMesh):
    cache = asm._cache(mesh)
    if "lp" not in cache:
        S = asm.p1_stiffness(mesh)
        shift = 1e-10 * S.diagonal().max()
        cache["lp"] = factorized(S + shift * sp.identity(mesh.n_nodes))
    return cache["lp"]


def velocity_load(mesh: TriMesh, params: PhysParams, sysm: VelocitySystem, n_plus, n_minus, phi, d_half, q,
                  grad_proj, shift=None) -> np.ndarray:
    space = sysm.space
    load = sysm.rhs_base.copy()
    if params.lambda_npp != 0.0 and not params.potential_degenerate:
        g = asm.effective_gradient(mesh, phi, shift)
        if params.truncation_on:
            lam, w = asm.simplex_rule(mesh.dim, mesh.dim + 4)
            gamma = truncation_gamma(params, mesh)
            npq = asm.p1_at_points(mesh, n_plus, lam)
            nmq = asm.p1_at_points(mesh, n_minus, lam)
            rho = truncation_phi_gamma(npq, gamma) * npq - truncation_phi_gamma(nmq, gamma) * nmq
            load -= params.lambda_npp * space.load_weighted(rho[:, :, None] * g[:, None, :], lam, w)
        else:
            load -= params.lambda_npp * space.load_from_p1_times_const(n_plus - n_minus, g)
    if params.nu_el != 0.0:
        X = _cross(d_half, _cross(d_half, q))
        el = np.einsum("zcd,zc->zd", grad_proj, X) * mesh.lumped_mass[:, None]
        load[: mesh.n_nodes] -= params.nu_el * el
    return load


def project_divergence_free(mesh: TriMesh, v: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    """L2 projection of a MINI field onto the discretely divergence-free subspace."""
    space = asm.mini_space(mesh)
    free = np.ones(space.size, dtype=bool)
    free[mesh.boundary_nodes] = False
    idx = np.flatnonzero(free)
    Mv = space.mass()
    A = sp.csc_matrix(Mv[idx][:, idx])
    lu = spla.splu(A)
    dim = mesh.dim
    nf = len(idx)
    B = sp.hstack([Bc[:, idx] for Bc in space.divergence()], format="csr")
    f = (Mv @ v)[idx].T.ravel()
    lp = _pressure_laplace(mesh)

    def A_solve(r):
        return lu.solve(np.ascontiguousarray(r.reshape(dim, nf).T)).T.ravel()

    u, _ = _wrap("projection", solve_saddle, None, B, f, tol, A_solve=A_solve, schur_precond=lp,
                 symmetric=True, pressure_weights=mesh.lumped_mass)
    out = np.zeros_like(v)
    out[idx] = u.reshape(dim, nf).T
    return out


def divergence_residual(mesh: TriMesh, v: np.ndarray) -> float:
    """max over pressure basis functions q of |(div v, q)|."""
    space = asm.mini_space(mesh)
    r = sum(Bc @ v[:, c] for c, Bc in enumerate(space.divergence()))
    return float(np.abs(r).max())


# ---------------------------------------------------------------------------
# time step

_FIELDS = ("v", "p", "d", "q", "n_plus", "n_minus", "phi")


class _Mixer:
    """Relaxed / Anderson-mixed outer update; the fixed points are those of the plain sweep."""

    def __init__(self, relaxation: float, depth: int):
        self.theta = relaxation
        self.depth = depth
        self.prev: tuple[np.ndarray, np.ndarray] | None = None
        self.dF: list[np.ndarray] = []
        self.dG: list[np.ndarray] = []

    @staticmethod
    def pack(state: DiscreteState) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(state, f)) for f in _FIELDS])

    @staticmethod
    def unpack(state: DiscreteState, x: np.ndarray) -> None:
        pos = 0
        for f in _FIELDS:
            arr = getattr(state, f)
            setattr(state, f, x[pos:pos + arr.size].reshape(arr.shape).copy())
            pos += arr.size

    def update(self, swept: DiscreteState, start: DiscreteState) -> None:
        """Overwrite ``swept`` (the sweep output G(x)) with the next iterate."""
        g = self.pack(swept)
        f = g - self.pack(start)
        if self.depth and self.prev is not None:
            self.dF.append(f - self.prev[0])
            self.dG.append(g - self.prev[1])
            del self.dF[:-self.depth], self.dG[:-self.depth]
        self.prev = (f, g)
        if self.dF:
            DF = np.stack(self.dF, axis=1)
            gamma = np.linalg.lstsq(DF, f, rcond=None)[0]
            x = g - np.stack(self.dG, axis=1) @ gamma - (1.0 - self.theta) * (f - DF @ gamma)
        else:
            x = g - (1.0 - self.theta) * f
        self.unpack(swept, x)


def step(state_prev: DiscreteState, mesh: TriMesh, params: PhysParams,
         fp: FixedPointConfig = FixedPointConfig()) -> tuple[DiscreteState, StepCertificate]:
    """Advance one time step; returns the new state and its certificate."""
    from .certificates import energy_law_residual

    k = params.k
    t_new = state_prev.t + k
    shift = _shift(params, t_new)
    tol = fp.linear_tol
    m = mesh.lumped_mass
    grad_proj = asm.lumped_l2_project_gradient(mesh, state_prev.d)
    sysm = VelocitySystem(mesh, params, state_prev.v, tol) if "velocity" not in fp.freeze else None

    cur = state_prev.copy()
    cur.t = t_new
    cur.step_index = state_prev.step_index + 1
    stats: dict = {}
    B_last: dict[int, sp.csr_matrix] = {}
    charge_pc: dict = {}
    mixer = _Mixer(fp.relaxation, fp.anderson_depth)
    n_outer = 0
    while True:
        n_outer += 1
        if n_outer > fp.max_outer_iters:
            raise FixedPointDiverged(f"step {cur.step_index}: no fixed point after {fp.max_outer_iters} "
                                     f"iterations (last increment {incr:.3e})")
        old = cur.copy()
        for name in fp.order:
            if name in fp.freeze:
                continue
            if name == "potential":
                cur.phi = solve_potential(mesh, params, cur.d, cur.n_plus - cur.n_minus, tol, x0=cur.phi)
            elif name == "charges":
                K = None if params.potential_degenerate else asm.assemble_stiffness_aniso(
                    mesh, cur.d, params.eps_perp, params.eps_a, params.mu_phi)
                if K is None:
                    K = sp.csr_matrix((mesh.n_nodes, mesh.n_nodes))
                new = {}
                for sign, n_prev, n_it in ((1, state_prev.n_plus, cur.n_plus), (-1, state_prev.n_minus, cur.n_minus)):
                    B = charge_matrix(mesh, params, cur.d, cur.v, cur.phi, sign, shift, n_it, K)
                    B_last[sign] = B
                    Bt = B.T.tocsr()
                    if sign not in charge_pc:
                        charge_pc[sign] = ilu_preconditioner(Bt)
                    new[sign] = _wrap("charges", solve_nonsymmetric, Bt, m * n_prev / k, tol, x0=n_it,
                                      precond=charge_pc[sign])
                cur.n_plus, cur.n_minus = new[1], new[-1]
            elif name == "director":
                cur.d, cur.q = director_newton(state_prev.d, cur.v, cur.phi, mesh, params, fp, shift=shift,
                                               grad_proj=grad_proj, stats=stats)
            elif name == "velocity":
                d_half = 0.5 * (cur.d + state_prev.d)
                load = velocity_load(mesh, params, sysm, cur.n_plus, cur.n_minus, cur.phi, d_half, cur.q,
                                     grad_proj, shift)
                cur.v, cur.p = sysm.solve(load)
        incr = max(np.abs(getattr(cur, f) - getattr(old, f)).max(initial=0.0) for f in _FIELDS)
        if incr <= fp.tol_fp:
            break
        if fp.relaxation < 1.0 or fp.anderson_depth:
            mixer.update(cur, old)

    law = energy_law_residual(state_prev, cur, mesh, params, k)
    audits = {}
    if fp.audit and "charges" not in fp.freeze:
        for sign in (1, -1):
            audits[sign] = audit_m_matrix(B_last[sign])
    dev = np.abs(np.linalg.norm(cur.d, axis=1) - 1.0)
    drift = max(abs(m @ cur.n_plus - m @ state_prev.n_plus), abs(m @ cur.n_minus - m @ state_prev.n_minus))
    cert = StepCertificate(
        step_index=cur.step_index, t=t_new,
        energy_before=law.energy_before, energy_after=law.energy_after,
        dissipation=law.dissipation, damping=law.damping, dissipation_sum=law.dissipation_sum,
        energy_residual=law.residual,
        max_norm_violation=float(dev.max(initial=0.0)),
        n_plus_min=float(cur.n_plus.min()), n_plus_max=float(cur.n_plus.max()),
        n_minus_min=float(cur.n_minus.min()), n_minus_max=float(cur.n_minus.max()),
        charge_mass_drift=float(drift), divergence_norm=divergence_residual(mesh, cur.v),
        m_matrix_plus=audits.get(1), m_matrix_minus=audits.get(-1),
        fixed_point_iters=n_outer, newton_iters=stats.get("iterations", 0),
    )
    return cur, cert


@dataclass
class Trajectory:
    states: list[DiscreteState] = field(default_factory=list)
    certificates: list[StepCertificate] = field(default_factory=list)
    error: Optional[Exception] = None

    @property
    def final(self) -> DiscreteState:
        return self.states[-1]

    @property
    def ok(self) -> bool:
        return self.error is None


def run(mesh: TriMesh, params: PhysParams, fp: FixedPointConfig, initial_data: InitialData | DiscreteState,
        n_steps: int, *, keep_states: bool = True,
        on_step: Callable[[DiscreteState, StepCertificate], None] | None = None) -> Trajectory:
    """March ``n_steps`` steps; on a scheme failure the partial trajectory is returned with ``error`` set."""
    params.validate(mesh.dim, mesh.h)
    if isinstance(initial_data, DiscreteState):
        state = initial_data
    else:
        state = initialize_state(mesh, params, initial_data, tol=fp.linear_tol)
    traj = Trajectory(states=[state])
    for _ in range(n_steps):
        try:
            state, cert = step(state, mesh, params, fp)
        except SchemeError as exc:
            traj.error = exc
            break
        if keep_states:
            traj.states.append(state)
        else:
            traj.states = [traj.states[0], state]
        traj.certificates.append(cert)
        if on_step is not None:
            on_step(state, cert)
    return traj
