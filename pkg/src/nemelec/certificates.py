"""Computable analysis functionals.

Energy and the discrete energy law of a step, relative energy and relative
dissipation against a reference trajectory, the regularity weights that
enter the relative energy inequality, the discrete residual operator of a
reference trajectory, and a discrete Gronwall accumulator.

Scaling: the relative energy carries the same factors ``A`` and ``mu_phi`` as
the energy, so that ``relative_energy(u, 0) == total_energy(u)`` when the
reference director is constant.  The relative dissipation uses the same
weights as the dissipation terms of the energy law.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import assembly as asm
from .mesh import TriMesh, locate_points
from .quadrature import simplex_rule
from .state import DiscreteState, PhysParams

FIELD_KEYS = ("v", "grad_v", "d", "grad_d", "phi", "grad_phi", "hess_phi", "n_plus", "n_minus",
              "grad_n_plus", "grad_n_minus", "lap_d")


# ---------------------------------------------------------------------------
# energy and energy law


def energy_terms(state: DiscreteState, mesh: TriMesh, params: PhysParams) -> dict[str, float]:
    """kinetic 1/2|v|^2, elastic A/2|grad d|^2, electric mu_phi/2 (eps(d) grad phi, grad phi)."""
    space = asm.mini_space(mesh)
    Mv = space.mass()
    S = asm.p1_stiffness(mesh)
    v = state.v
    kinetic = 0.5 * sum(float(v[:, c] @ (Mv @ v[:, c])) for c in range(mesh.dim))
    elastic = 0.5 * params.A * float(np.einsum("zc,zc->", state.d, S @ state.d))
    electric = 0.0
    if not params.potential_degenerate:
        K = asm.assemble_stiffness_aniso(mesh, state.d, params.eps_perp, params.eps_a)
        electric = 0.5 * params.mu_phi * float(state.phi @ (K @ state.phi))
    return {"kinetic": kinetic, "elastic": elastic, "electric": electric}


def total_energy(state: DiscreteState, mesh: TriMesh, params: PhysParams) -> float:
    return float(sum(energy_terms(state, mesh, params).values()))


def _free_mask(mesh: TriMesh, params: PhysParams) -> Optional[np.ndarray]:
    return ~mesh.boundary_mask if params.director_bc == "dirichlet" else None


def stabilization_energy(state: DiscreteState, mesh: TriMesh, params: PhysParams) -> dict[str, float]:
    """h^alpha/2 |grad v|^2 and h^beta/2 |Delta_h d|_h^2 (zero when stabilization is off)."""
    if not params.stabilization_on:
        return {"velocity": 0.0, "director": 0.0}
    alpha, beta = params.stabilization_exponents(mesh.dim)
    Lv = asm.mini_space(mesh).stiffness()
    v = state.v
    ev = 0.5 * mesh.h ** alpha * sum(float(v[:, c] @ (Lv @ v[:, c])) for c in range(mesh.dim))
    lap = asm.discrete_laplacian(mesh, state.d, free_mask=_free_mask(mesh, params))
    ed = 0.5 * mesh.h ** beta * asm.mass_lumped_inner(mesh, lap, lap)
    return {"velocity": ev, "director": ed}


@dataclass
class EnergyLaw:
    """Itemized discrete energy balance of one step.

    ``residual = (E_after + S_after) - (E_before + S_before) + k * sum(dissipation) + sum(damping)``
    where S is the stabilization energy.  Damping terms are the squared
    increments (already multiplied out, no further factor of k).
    """

    residual: float
    energy_before: float
    energy_after: float
    dissipation: dict[str, float]
    damping: dict[str, float]
    dissipation_sum: float
    stabilization_before: dict[str, float] = field(default_factory=dict)
    stabilization_after: dict[str, float] = field(default_factory=dict)


def _drift_dissipation(mesh: TriMesh, params: PhysParams, d: np.ndarray, nsum: np.ndarray, g: np.ndarray) -> float:
    """int (n+ + n-) eps(d) g . g for P1 nsum, d and elementwise constant g (exact)."""
    dim = mesh.dim
    pd = d[mesh.elements][..., :dim]
    s = np.einsum("ead,ed->ea", pd, g)
    ne = nsum[mesh.elements]
    iso = params.eps_perp * np.einsum("ed,ed->e", g, g) * ne.mean(axis=1)
    aniso = params.eps_a * np.einsum("bac,eb,ea,ec->e", asm._ref(dim)["p1cubic"], ne, s, s)
    return float(mesh.elem_volume @ (iso + aniso))


def _p1_quadratic(mesh: TriMesh, values: np.ndarray) -> float:
    """int f^2 for a P1 scalar given by its per-element vertex values (E, d+1)."""
    ref = asm._ref(mesh.dim)["p1mass"]
    return float(mesh.elem_volume @ np.einsum("ea,ab,eb->e", values, ref, values))


def energy_law_residual(state_prev: DiscreteState, state_new: DiscreteState, mesh: TriMesh,
                        params: PhysParams, k: float | None = None) -> EnergyLaw:
    """Evaluate the discrete energy balance between two consecutive states.

    At a converged fixed point of :func:`nemelec.scheme.step` without an
    applied field the residual vanishes up to solver tolerances.
    """
    k = params.k if k is None else k
    dim = mesh.dim
    m = mesh.lumped_mass
    space = asm.mini_space(mesh)
    Lv = space.stiffness()
    Mv = space.mass()
    v, dv = state_new.v, state_new.v - state_prev.v
    d_half = 0.5 * (state_new.d + state_prev.d)
    rho = state_new.n_plus - state_new.n_minus

    diss = {
        "viscous": params.nu * sum(float(v[:, c] @ (Lv @ v[:, c])) for c in range(dim)),
        "director": float(m @ np.sum(np.cross(d_half, state_new.q) ** 2, axis=1)),
        "drift": 0.0,
        "charge": float(m @ rho ** 2),
    }
    damp = {
        "velocity": 0.5 * sum(float(dv[:, c] @ (Mv @ dv[:, c])) for c in range(dim)),
        "potential": 0.0,
        "field_director": 0.0,
        "stab_velocity": 0.0,
    }
    if not params.potential_degenerate:
        shift = None if params.applied_field.is_zero else params.applied_field(state_new.t)
        g_eff = asm.effective_gradient(mesh, state_new.phi, shift)
        diss["drift"] = _drift_dissipation(mesh, params, state_new.d, state_new.n_plus + state_new.n_minus, g_eff)
        dphi = state_new.phi - state_prev.phi
        K_prev = asm.assemble_stiffness_aniso(mesh, state_prev.d, params.eps_perp, params.eps_a)
        damp["potential"] = 0.5 * params.mu_phi * float(dphi @ (K_prev @ dphi))
        g = asm.p1_gradient(mesh, state_new.phi)
        dd = (state_new.d - state_prev.d)[mesh.elements][..., :dim]
        s = np.einsum("ead,ed->ea", dd, g)
        damp["field_director"] = 0.5 * params.mu_phi * params.eps_a * _p1_quadratic(mesh, s)
    if params.stabilization_on:
        alpha, _ = params.stabilization_exponents(dim)
        damp["stab_velocity"] = 0.5 * mesh.h ** alpha * sum(float(dv[:, c] @ (Lv @ dv[:, c])) for c in range(dim))

    e0 = total_energy(state_prev, mesh, params)
    e1 = total_energy(state_new, mesh, params)
    s0 = stabilization_energy(state_prev, mesh, params)
    s1 = stabilization_energy(state_new, mesh, params)
    dsum = float(sum(diss.values()))
    residual = (e1 + sum(s1.values())) - (e0 + sum(s0.values())) + k * dsum + float(sum(damp.values()))
    return EnergyLaw(residual=float(residual), energy_before=e0, energy_after=e1, dissipation=diss,
                     damping=damp, dissipation_sum=dsum, stabilization_before=s0, stabilization_after=s1)


# ---------------------------------------------------------------------------
# reference trajectories


def _fill(fields: Mapping[str, np.ndarray], n: int, dim: int) -> dict[str, np.ndarray]:
    shapes = {"v": (dim,), "grad_v": (dim, dim), "d": (3,), "grad_d": (3, dim), "phi": (), "grad_phi": (dim,),
              "hess_phi": (dim, dim), "n_plus": (), "n_minus": (), "grad_n_plus": (dim,),
              "grad_n_minus": (dim,), "lap_d": (3,)}
    out = {}
    for key, shp in shapes.items():
        if key in fields and fields[key] is not None:
            out[key] = np.broadcast_to(np.asarray(fields[key], dtype=float), (n,) + shp).copy()
        elif key == "d":
            out[key] = np.tile([0.0, 0.0, 1.0], (n, 1))
        else:
            out[key] = np.zeros((n,) + shp)
    if "q" in fields and fields["q"] is not None:
        out["q"] = np.broadcast_to(np.asarray(fields["q"], dtype=float), (n, 3)).copy()
    return out


class ReferenceTrajectory:
    """Comparison trajectory sampled at arbitrary points and times.

    ``sample(x, t)`` returns a dict with the keys of ``FIELD_KEYS`` (and
    optionally ``q``), each an array whose leading axis runs over the points.
    Time derivatives are central differences with step ``dt_fd``.
    """

    dim: int
    dt_fd: Optional[float] = None

    def sample(self, x: np.ndarray, t: float) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def nodal(self, mesh: TriMesh, t: float) -> dict[str, np.ndarray]:
        return self.sample(mesh.nodes, t)

    def time_derivative(self, key: str, x: np.ndarray, t: float, delta: float) -> np.ndarray:
        if self.dt_fd is not None:
            delta = self.dt_fd
        if t - delta < 0:
            return (self.sample(x, t + delta)[key] - self.sample(x, t)[key]) / delta
        return (self.sample(x, t + delta)[key] - self.sample(x, t - delta)[key]) / (2 * delta)


class AnalyticReference(ReferenceTrajectory):
    """Smooth fields given by ``fields(x, t) -> dict`` (missing keys are zero, d defaults to e_z).

    The director is checked to have unit length at every sampled point.
    """

    def __init__(self, fields: Callable[[np.ndarray, float], Mapping[str, np.ndarray]], dim: int,
                 dt_fd: float | None = None, unit_tol: float = 1e-8):
        self._fields = fields
        self.dim = dim
        self.dt_fd = dt_fd
        self.unit_tol = unit_tol

    def sample(self, x: np.ndarray, t: float) -> dict[str, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = _fill(self._fields(x, t), len(x), self.dim)
        dev = np.abs(np.linalg.norm(out["d"], axis=1) - 1.0)
        if len(dev) and dev.max() > self.unit_tol:
            raise ValueError(f"reference director deviates from unit length by {dev.max():.3e}")
        return out

    @classmethod
    def constant(cls, dim: int, **values) -> "AnalyticReference":
        """Space- and time-independent reference, e.g. ``constant(2, v=[1, 0], d=[0, 0, 1])``."""
        return cls(lambda x, t: values, dim)


def _fields_at(state: DiscreteState, mesh: TriMesh, elems: np.ndarray, lam: np.ndarray) -> dict[str, np.ndarray]:
    """Values and gradients of a discrete state at points given by element and barycentric coordinates."""
    dim = mesh.dim
    el = mesh.elements[elems]  # (N, d+1)
    grad = mesh.elem_grad[elems]  # (N, d+1, dim)
    c = asm.bubble_constant(dim)
    L = mesh.n_nodes

    def p1(u):
        ue = np.asarray(u)[el]
        return np.einsum("na,na...->n...", lam, ue), np.einsum("na...,nad->n...d", ue, grad)

    bub = c * lam.prod(axis=1)
    dbub = c * np.stack([np.prod(np.delete(lam, a, axis=1), axis=1) for a in range(dim + 1)], axis=1)
    vb = state.v[L + elems]  # (N, dim)
    v_lin, gv_lin = p1(state.v[:L])
    out = {
        "v": v_lin + bub[:, None] * vb,
        "grad_v": gv_lin + vb[:, :, None] * np.einsum("na,nad->nd", dbub, grad)[:, None, :],
    }
    out["d"], out["grad_d"] = p1(state.d)
    out["phi"], out["grad_phi"] = p1(state.phi)
    out["n_plus"], out["grad_n_plus"] = p1(state.n_plus)
    out["n_minus"], out["grad_n_minus"] = p1(state.n_minus)
    out["q"], _ = p1(state.q)
    out["hess_phi"] = np.zeros((len(elems), dim, dim))
    out["lap_d"] = np.zeros((len(elems), 3))
    return out


class DiscreteReference(ReferenceTrajectory):
    """A discrete trajectory (typically a finer run) interpolated in space and linearly in time.

    Second derivatives are unavailable for piecewise linear fields and are
    reported as zero; the stored ``q`` is used as the reference auxiliary field.
    """

    def __init__(self, mesh: TriMesh, states: Sequence[DiscreteState], dt_fd: float | None = None):
        if not states:
            raise ValueError("at least one state is required")
        self.mesh = mesh
        self.dim = mesh.dim
        self.states = list(states)
        self.times = np.array([s.t for s in self.states])
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("states must be ordered by strictly increasing time")
        self.dt_fd = dt_fd

    def _bracket(self, t: float) -> tuple[int, int, float]:
        ts = self.times
        if len(ts) == 1 or t <= ts[0]:
            return 0, 0, 0.0
        if t >= ts[-1]:
            return len(ts) - 1, len(ts) - 1, 0.0
        i = int(np.searchsorted(ts, t, side="right")) - 1
        theta = (t - ts[i]) / (ts[i + 1] - ts[i])
        if abs(theta) < 1e-12:
            return i, i, 0.0
        if abs(theta - 1) < 1e-12:
            return i + 1, i + 1, 0.0
        return i, i + 1, theta

    def _combine(self, fn, t: float) -> dict[str, np.ndarray]:
        i, j, theta = self._bracket(t)
        a = fn(self.states[i])
        if i == j:
            return a
        b = fn(self.states[j])
        return {key: (1 - theta) * a[key] + theta * b[key] for key in a}

    def sample_at(self, elems: np.ndarray, lam: np.ndarray, t: float) -> dict[str, np.ndarray]:
        return self._combine(lambda s: _fields_at(s, self.mesh, elems, lam), t)

    def sample(self, x: np.ndarray, t: float) -> dict[str, np.ndarray]:
        elems, lam = locate_points(self.mesh, x)
        return self.sample_at(elems, lam, t)

    def nodal(self, mesh: TriMesh, t: float) -> dict[str, np.ndarray]:
        if mesh is not self.mesh:
            return self.sample(mesh.nodes, t)
        # gradients at a node are taken from the element that owns it in the connectivity
        owner = np.zeros(mesh.n_nodes, dtype=np.int64)
        slot = np.zeros(mesh.n_nodes, dtype=np.int64)
        for a in range(mesh.dim + 1):
            owner[mesh.elements[:, a]] = np.arange(mesh.n_elements)
            slot[mesh.elements[:, a]] = a
        lam = np.eye(mesh.dim + 1)[slot]
        out = self.sample_at(owner, lam, t)
        # nodal values are exact; overwrite to avoid any round-off
        i, j, theta = self._bracket(t)
        for key in ("d", "phi", "n_plus", "n_minus", "q"):
            a = getattr(self.states[i], key)
            b = getattr(self.states[j], key)
            out[key] = a if i == j else (1 - theta) * a + theta * b
        v = (1 - theta) * self.states[i].v[: mesh.n_nodes] + theta * self.states[j].v[: mesh.n_nodes]
        out["v"] = v
        return out


def as_reference(ref, mesh: TriMesh) -> ReferenceTrajectory:
    if isinstance(ref, ReferenceTrajectory):
        return ref
    if isinstance(ref, DiscreteState):
        return DiscreteReference(mesh, [ref])
    raise TypeError(f"cannot use {type(ref).__name__} as a reference trajectory")


# ---------------------------------------------------------------------------
# quadrature helpers


@dataclass
class _Quad:
    elems: np.ndarray  # (N,)
    lam: np.ndarray  # (N, d+1)
    x: np.ndarray  # (N, dim)
    w: np.ndarray  # (N,) includes the element volume


def _quad(mesh: TriMesh, degree: int) -> _Quad:
    lam, w = simplex_rule(mesh.dim, degree)
    E, nq = mesh.n_elements, len(w)
    elems = np.repeat(np.arange(E), nq)
    lam_all = np.tile(lam, (E, 1))
    x = np.einsum("qa,ead->eqd", lam, mesh.nodes[mesh.elements]).reshape(-1, mesh.dim)
    weights = (mesh.elem_volume[:, None] * w[None, :]).ravel()
    return _Quad(elems, lam_all, x, weights)


def _sample_state(state: DiscreteState, mesh: TriMesh, quad: _Quad, quad_mesh: TriMesh) -> dict[str, np.ndarray]:
    if quad_mesh is mesh:
        return _fields_at(state, mesh, quad.elems, quad.lam)
    elems, lam = locate_points(mesh, quad.x)
    return _fields_at(state, mesh, elems, lam)


def _sample_ref(ref: ReferenceTrajectory, quad: _Quad, quad_mesh: TriMesh, t: float) -> dict[str, np.ndarray]:
    if isinstance(ref, DiscreteReference) and ref.mesh is quad_mesh:
        return ref.sample_at(quad.elems, quad.lam, t)
    return ref.sample(quad.x, t)


def _sq(a: np.ndarray) -> np.ndarray:
    """Pointwise squared Euclidean / Frobenius norm."""
    return (a * a).reshape(len(a), -1).sum(axis=1)


def _eps_quad(d: np.ndarray, g: np.ndarray, params: PhysParams, dim: int) -> np.ndarray:
    """eps(d) g . g pointwise."""
    pd = d[:, :dim]
    return params.eps_perp * _sq(g) + params.eps_a * np.einsum("nd,nd->n", pd, g) ** 2


def _default_degree(dim: int) -> int:
    return 2 * (dim + 1)


def reference_q(fields: Mapping[str, np.ndarray], params: PhysParams, dim: int,
                d_prev: np.ndarray | None = None, lap_d: np.ndarray | None = None) -> np.ndarray:
    """Reference auxiliary field -A lap d - mu_phi eps_a (grad phi . P d_prev) grad phi.

    Uses the stored ``q`` when the reference supplies one.
    """
    if "q" in fields:
        return fields["q"]
    d_prev = fields["d"] if d_prev is None else d_prev
    lap = fields["lap_d"] if lap_d is None else lap_d
    g = fields["grad_phi"]
    s = np.einsum("nd,nd->n", d_prev[:, :dim], g)
    q = -params.A * lap
    q[:, :dim] -= params.mu_phi * params.eps_a * s[:, None] * g
    return q


# ---------------------------------------------------------------------------
# relative energy and dissipation


def relative_energy(state: DiscreteState, ref, mesh: TriMesh, params: PhysParams, *, t: float | None = None,
                    quad_mesh: TriMesh | None = None, degree: int | None = None) -> float:
    """A/2 |grad(d - d~)|^2 + 1/2 |v - v~|^2 + mu_phi/2 int |grad(phi - phi~)|^2_eps(d).

    ``quad_mesh`` selects the mesh whose elements carry the quadrature
    (default ``mesh``); use the finer mesh when comparing nested runs.
    """
    terms = relative_energy_terms(state, ref, mesh, params, t=t, quad_mesh=quad_mesh, degree=degree)
    return float(sum(terms.values()))


def relative_energy_terms(state: DiscreteState, ref, mesh: TriMesh, params: PhysParams, *, t: float | None = None,
                          quad_mesh: TriMesh | None = None, degree: int | None = None) -> dict[str, float]:
    ref = as_reference(ref, mesh)
    t = state.t if t is None else t
    qm = mesh if quad_mesh is None else quad_mesh
    quad = _quad(qm, _default_degree(mesh.dim) if degree is None else degree)
    s = _sample_state(state, mesh, quad, qm)
    r = _sample_ref(ref, quad, qm, t)
    w = quad.w
    out = {
        "kinetic": 0.5 * float(w @ _sq(s["v"] - r["v"])),
        "elastic": 0.5 * params.A * float(w @ _sq(s["grad_d"] - r["grad_d"])),
        "electric": 0.0,
    }
    if not params.potential_degenerate:
        out["electric"] = 0.5 * params.mu_phi * float(w @ _eps_quad(s["d"], s["grad_phi"] - r["grad_phi"], params,
                                                                   mesh.dim))
    return out


@dataclass
class RelativeDissipation:
    """Continuous-form W (L2 norms) and discrete W_d (lumped norms, midpoint directors)."""

    W: float
    W_d: float
    terms: dict[str, float]
    terms_d: dict[str, float]


def relative_dissipation(state: DiscreteState, ref, mesh: TriMesh, params: PhysParams, *,
                         t: float | None = None, state_prev: DiscreteState | None = None,
                         k: float | None = None, quad_mesh: TriMesh | None = None,
                         degree: int | None = None) -> RelativeDissipation:
    """Relative dissipation of ``state`` against ``ref`` at time ``t``.

    W uses L2 norms of d x q; W_d uses the lumped norm with the midpoint
    directors (d^j + d^{j-1})/2 for the state (``state_prev``) and the
    reference (sampled at ``t - k``).  Without ``state_prev`` the midpoint
    director of the state is d^j itself.
    """
    ref = as_reference(ref, mesh)
    t = state.t if t is None else t
    k = params.k if k is None else k
    dim = mesh.dim
    qm = mesh if quad_mesh is None else quad_mesh
    quad = _quad(qm, _default_degree(dim) if degree is None else degree)
    s = _sample_state(state, mesh, quad, qm)
    r = _sample_ref(ref, quad, qm, t)
    w = quad.w
    viscous = params.nu * float(w @ _sq(s["grad_v"] - r["grad_v"]))
    drift = 0.0
    if not params.potential_degenerate:
        drift = float(w @ ((s["n_plus"] + s["n_minus"]) * _eps_quad(s["d"], s["grad_phi"] - r["grad_phi"], params,
                                                                   dim)))
    q_ref = reference_q(r, params, dim)
    director = float(w @ _sq(np.cross(s["d"], s["q"]) - np.cross(r["d"], q_ref)))
    rho = (s["n_plus"] - s["n_minus"]) - (r["n_plus"] - r["n_minus"])
    terms = {"viscous": viscous, "director": director, "drift": drift, "charge": float(w @ rho ** 2)}

    # lumped variant on the nodes of the state mesh
    m = mesh.lumped_mass
    rn = ref.nodal(mesh, t)
    rn_prev = ref.nodal(mesh, t - k) if t - k >= -1e-14 else rn
    d_half = state.d if state_prev is None else 0.5 * (state.d + state_prev.d)
    d_ref_half = 0.5 * (rn["d"] + rn_prev["d"]) if state_prev is not None else rn["d"]
    q_ref_n = reference_q(rn, params, dim, d_prev=rn_prev["d"] if state_prev is not None else None)
    dir_d = float(m @ _sq(np.cross(d_half, state.q) - np.cross(d_ref_half, q_ref_n)))
    rho_n = (state.n_plus - state.n_minus) - (rn["n_plus"] - rn["n_minus"])
    terms_d = {"viscous": viscous, "director": dir_d, "drift": drift, "charge": float(m @ rho_n ** 2)}
    return RelativeDissipation(W=float(sum(terms.values())), W_d=float(sum(terms_d.values())),
                               terms=terms, terms_d=terms_d)


# ---------------------------------------------------------------------------
# regularity weights


def _lp(w: np.ndarray, values: np.ndarray, p: float) -> float:
    return float(w @ np.sqrt(_sq(values)) ** p) ** (1.0 / p)


def _linf(*values: np.ndarray) -> float:
    return float(max(np.sqrt(_sq(v)).max(initial=0.0) for v in values))


@dataclass
class RegularityWeights:
    K1: float
    K2: float
    Kd: float
    terms1: dict[str, float]
    terms2: dict[str, float]
    C: float = 1.0


def _y_field(mesh: TriMesh, rn: dict, rn_prev: dict, params: PhysParams) -> np.ndarray:
    """Nodal d~^{j-1/2} x ((v~^j . grad) d~^{j-1} + q~^j)."""
    dim = mesh.dim
    d_half = 0.5 * (rn["d"] + rn_prev["d"])
    lap_half = 0.5 * (rn["lap_d"] + rn_prev["lap_d"])
    q = reference_q(rn, params, dim, d_prev=rn_prev["d"], lap_d=lap_half)
    conv = np.einsum("nd,ncd->nc", rn["v"], rn_prev["grad_d"])
    return np.cross(d_half, conv + q)


def regularity_weights(ref, t: float, mesh: TriMesh, params: PhysParams, *, k: float | None = None,
                       C: float = 1.0, degree: int | None = None,
                       grad_phi_sup_L3: float | None = None) -> RegularityWeights:
    """K1, K2, Kd of the reference at time level ``t`` (previous level ``t - k``).

    Norms are computed by quadrature on ``mesh``; the expression
    Y = d~ x ((v~ . grad) d~ + q~) enters through its nodal interpolant.
    ``grad_phi_sup_L3`` is the supremum in time of |grad phi~|_{L3}; by
    default the larger of the two sampled levels is used.
    """
    ref = as_reference(ref, mesh)
    k = params.k if k is None else k
    dim = mesh.dim
    quad = _quad(mesh, _default_degree(dim) if degree is None else degree)
    w = quad.w
    r = _sample_ref(ref, quad, mesh, t)
    rp = _sample_ref(ref, quad, mesh, t - k)
    rn = ref.nodal(mesh, t)
    rn_prev = ref.nodal(mesh, t - k)
    q = reference_q(r, params, dim, d_prev=rp["d"], lap_d=0.5 * (r["lap_d"] + rp["lap_d"]))
    dt_d = (r["d"] - rp["d"]) / k
    dt_d_n = (rn["d"] - rn_prev["d"]) / k
    dt_grad_phi = ref.time_derivative("grad_phi", quad.x, t, k / 10)

    Y = _y_field(mesh, rn, rn_prev, params)
    Yq = np.einsum("na,nac->nc", quad.lam, Y[mesh.elements[quad.elems]])
    gY = asm.p1_gradient(mesh, Y)[quad.elems]
    y_w13 = (_lp(w, Yq, 3) ** 3 + _lp(w, gY, 3) ** 3) ** (1.0 / 3.0)
    y_inf = _linf(Y)
    gp = grad_phi_sup_L3 if grad_phi_sup_L3 is not None else max(_lp(w, r["grad_phi"], 3),
                                                                 _lp(w, rp["grad_phi"], 3))
    common = {
        "grad_d_prev_L3^4": _lp(w, rp["grad_d"], 3) ** 4,
        "q_L3^4": _lp(w, q, 3) ** 4,
        "v_Linf^4": _linf(r["v"], rn["v"]) ** 4,
        "grad_phi_Linf^8": _linf(r["grad_phi"]) ** 8,
        "dt_grad_phi_L3": _lp(w, dt_grad_phi, 3),
        "Y_Linf*(grad_phi_L3^2+1)": y_inf * (gp ** 2 + 1.0),
        "Y_W13": y_w13,
        "one": 1.0,
    }
    terms1 = dict(common)
    terms1.update({
        "grad_d_L3^4": _lp(w, r["grad_d"], 3) ** 4,
        "hess_phi_L3^2": _lp(w, r["hess_phi"], 3) ** 2,
        "grad_n_plus_L3": _lp(w, r["grad_n_plus"], 3),
        "grad_n_minus_L3": _lp(w, r["grad_n_minus"], 3),
        "n_sum_Linf^2": _linf(r["n_plus"] + r["n_minus"], rn["n_plus"] + rn["n_minus"]) ** 2,
        "dt_d_Linf^(4/3)": _linf(dt_d, dt_d_n) ** (4.0 / 3.0),
    })
    terms2 = dict(common)
    Kd = k * params.eps_a * _linf(dt_d, dt_d_n) ** 2
    return RegularityWeights(K1=C * float(sum(terms1.values())), K2=C * float(sum(terms2.values())), Kd=float(Kd),
                             terms1=terms1, terms2=terms2, C=C)


# ---------------------------------------------------------------------------
# residual operator


def residual_operator_terms(ref, t: float, probe: tuple, mesh: TriMesh, params: PhysParams, *,
                            k: float | None = None, degree: int | None = None) -> dict[str, float]:
    """Itemized pairing of the discrete residual operator of ``ref`` with a probe.

    ``probe = (a, c, e_plus, e_minus)``: a MINI (L + E, dim) or nodal (L, dim)
    velocity, a nodal (L, 3) director test function and nodal scalars.
    Lumped products are used exactly where the scheme lumps.
    """
    ref = as_reference(ref, mesh)
    k = params.k if k is None else k
    dim = mesh.dim
    L = mesh.n_nodes
    a, c, e_plus, e_minus = (np.asarray(p, dtype=float) for p in probe)
    if a.shape[0] == L:
        a = np.vstack([a, np.zeros((mesh.n_elements, dim))])
    quad = _quad(mesh, _default_degree(dim) + 2 if degree is None else degree)
    w = quad.w
    r = _sample_ref(ref, quad, mesh, t)
    rp = _sample_ref(ref, quad, mesh, t - k)
    probe_state = DiscreteState(a, np.zeros(L), c, np.zeros((L, 3)), e_plus, e_minus, np.zeros(L))
    pf = _fields_at(probe_state, mesh, quad.elems, quad.lam)
    m = mesh.lumped_mass
    rn = ref.nodal(mesh, t)
    rn_prev = ref.nodal(mesh, t - k)
    d_half = 0.5 * (rn["d"] + rn_prev["d"])
    q_n = reference_q(rn, params, dim, d_prev=rn_prev["d"], lap_d=0.5 * (rn["lap_d"] + rn_prev["lap_d"]))

    out: dict[str, float] = {}
    out["velocity_time"] = float(w @ np.einsum("nd,nd->n", (r["v"] - rp["v"]) / k, pf["v"]))
    out["velocity_viscous"] = params.nu * float(w @ np.einsum("ncd,ncd->n", r["grad_v"], pf["grad_v"]))
    conv = np.einsum("nd,ncd->nc", rp["v"], r["grad_v"]) + 0.5 * np.einsum("ndd->n", rp["grad_v"])[:, None] * r["v"]
    out["velocity_convection"] = float(w @ np.einsum("nc,nc->n", conv, pf["v"]))
    rho = r["n_plus"] - r["n_minus"]
    out["velocity_electric"] = params.lambda_npp * float(w @ (rho * np.einsum("nd,nd->n", r["grad_phi"], pf["v"])))
    X = np.cross(d_half, np.cross(d_half, q_n))
    el = np.einsum("ncd,nc->nd", rn_prev["grad_d"], X)
    out["velocity_elastic"] = params.nu_el * float(m @ np.einsum("nd,nd->n", el, a[:L]))

    out["director_time"] = float(w @ np.einsum("nc,nc->n", (r["d"] - rp["d"]) / k, pf["d"]))
    dc = np.cross(d_half, c)
    transport = np.einsum("nd,ncd->nc", rn["v"], rn_prev["grad_d"])
    out["director_transport"] = params.nu_el * float(m @ np.einsum("nc,nc->n", np.cross(d_half, transport), dc))
    out["director_q"] = float(m @ np.einsum("nc,nc->n", np.cross(d_half, q_n), dc))

    for sign, key, e in ((1, "n_plus", e_plus), (-1, "n_minus", e_minus)):
        ge = pf["grad_" + key]
        n = r[key]
        gn = r["grad_" + key]
        eps = asm.epsilon_of_d(r["d"], params.eps_perp, params.eps_a, dim)
        out[f"{key}_time"] = float(m @ ((rn[key] - rn_prev[key]) / k * e))
        out[f"{key}_diffusion"] = params.mu_phi * float(w @ np.einsum("nij,nj,ni->n", eps, gn, ge))
        out[f"{key}_drift"] = sign * float(w @ (n * np.einsum("nij,nj,ni->n", eps, r["grad_phi"], ge)))
        out[f"{key}_convection"] = -params.lambda_npp * float(w @ (n * np.einsum("nd,nd->n", r["v"], ge)))
    return out


def residual_operator_Ad(ref, t: float, probe: tuple, mesh: TriMesh, params: PhysParams, *,
                         k: float | None = None, degree: int | None = None) -> float:
    return float(sum(residual_operator_terms(ref, t, probe, mesh, params, k=k, degree=degree).values()))


# ---------------------------------------------------------------------------
# discrete Gronwall


class StepTooLarge(ValueError):
    pass


@dataclass
class GronwallReport:
    omega: np.ndarray  # omega[j] for j = 1..J (omega[0] is unused and set to 1)
    inv_products: np.ndarray  # prod_{l<=j} 1/omega^l, entry 0 equal to 1
    hypothesis_slack: np.ndarray  # g1 y^j + g2 y^{j-1} - d_t y^j - f^j for j = 1..J (entry 0 unused)
    hypothesis_holds: bool
    lhs: float
    rhs: float
    conclusion_holds: bool

    @property
    def verified(self) -> bool:
        """The conclusion is certified only when the hypothesis holds as well."""
        return self.hypothesis_holds and self.conclusion_holds


def bump_weight(T: float) -> Callable[[np.ndarray], np.ndarray]:
    """Smooth nonincreasing weight on [0, T) with phi(0) = 1 and compact support."""

    def phi(t):
        s = np.clip(np.asarray(t, dtype=float) / T, 0.0, 1.0)
        out = np.zeros_like(s)
        inside = s < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
        return out

    return phi


def gronwall_accumulate(y: Sequence[float], f: Sequence[float], g1: Sequence[float], g2: Sequence[float], k: float,
                        phi: Callable | Sequence[float] | None = None, tol: float = 1e-12) -> GronwallReport:
    """Weighted discrete Gronwall bookkeeping for sequences indexed j = 0..J.

    Checks the hypothesis d_t y^j + f^j <= g1^j y^j + g2^j y^{j-1} (j >= 1) and
    the conclusion

        -k sum_{j=0}^{J-1} d_t phi^{j+1} y^j P^j + k sum_{j=1}^{J-1} phi^j f^j/(1 - k g1^j) P^j <= phi^0 y^0

    with P^j = prod_{l=1}^j 1/omega^l and omega^j = (1 + k g2^j)/(1 - k g1^j).
    ``phi`` is a callable of time or an array of length J + 1; the default is
    a bump supported on [0, J k).
    """
    y, f, g1, g2 = (np.asarray(a, dtype=float) for a in (y, f, g1, g2))
    J = len(y) - 1
    if J < 1 or not (len(f) == len(g1) == len(g2) == J + 1):
        raise ValueError("y, f, g1, g2 must have the same length >= 2")
    if np.any(k * g1[1:] >= 1.0):
        j = int(np.argmax(k * g1[1:] >= 1.0)) + 1
        raise StepTooLarge(f"k * g1 = {k * g1[j]:.3g} >= 1 at j = {j}")
    if phi is None:
        phi = bump_weight(J * k)
    ph = np.asarray(phi(k * np.arange(J + 1)) if callable(phi) else phi, dtype=float)
    if len(ph) != J + 1:
        raise ValueError("phi must have J + 1 entries")
    omega = np.ones(J + 1)
    omega[1:] = (1.0 + k * g2[1:]) / (1.0 - k * g1[1:])
    inv_prod = np.cumprod(1.0 / omega)
    slack = np.zeros(J + 1)
    slack[1:] = g1[1:] * y[1:] + g2[1:] * y[:-1] - (y[1:] - y[:-1]) / k - f[1:]
    # per-step scale so that sequences spanning many magnitudes are still checked
    scale = (np.abs(y[1:]) * (1.0 / k + np.abs(g1[1:])) + np.abs(y[:-1]) * (1.0 / k + np.abs(g2[1:]))
             + np.abs(f[1:]) + 1e-300)
    hyp = bool(np.all(slack[1:] >= -tol * scale))
    dphi = (ph[1:] - ph[:-1]) / k  # d_t phi^{j+1}, j = 0..J-1
    lhs = -k * float(np.sum(dphi * y[:-1] * inv_prod[:-1]))
    jj = np.arange(1, J)
    lhs += k * float(np.sum(ph[jj] * f[jj] / (1.0 - k * g1[jj]) * inv_prod[jj]))
    rhs = float(ph[0] * y[0])
    concl = bool(lhs <= rhs + tol * (abs(rhs) + abs(lhs) + 1.0))
    return GronwallReport(omega=omega, inv_products=inv_prod, hypothesis_slack=slack, hypothesis_holds=hyp,
                          lhs=lhs, rhs=rhs, conclusion_holds=concl)
