"""Discrete state, physical parameters, initial data and invariant checks."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .mesh import TriMesh


class ValidationError(ValueError):
    """Invalid parameter or configuration value; ``key`` names the offender."""

    def __init__(self, key: str, message: str = ""):
        super().__init__(f"{key}: {message}" if message else key)
        self.key = key


class IncompatibleCharges(ValueError):
    pass


class UnnormalizableDirector(ValueError):
    pass


class StepSizeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AppliedField:
    """E0(t) = amplitude * cos(omega * t); omega = 0 gives a constant field."""

    amplitude: tuple[float, ...] = (0.0, 0.0, 0.0)
    omega: float = 0.0

    def __call__(self, t: float) -> np.ndarray:
        return np.asarray(self.amplitude, dtype=float) * math.cos(self.omega * t)

    @property
    def is_zero(self) -> bool:
        return not any(self.amplitude)


@dataclass(frozen=True)
class PhysParams:
    nu: float = 1.0
    A: float = 0.01
    eps_perp: float = 0.1
    eps_a: float = 10.0
    lambda_npp: float = 1.0
    mu_phi: float = 0.25
    nu_el: float = 1.0
    alpha: Optional[float] = None
    beta: Optional[float] = None
    stabilization_on: bool = False
    truncation_on: bool = False
    C2: float = 1.0
    applied_field: AppliedField = field(default_factory=AppliedField)
    director_bc: str = "neumann"
    k: float = 1e-3
    T: float = 0.1
    step_constant: float = 1.0  # C in the step-size rule k <= C h^{d/2}

    def with_(self, **kw) -> "PhysParams":
        return replace(self, **kw)

    def stabilization_exponents(self, dim: int) -> tuple[float, float]:
        alpha = self.alpha if self.alpha is not None else (1.0 if dim == 2 else 0.5)
        beta = self.beta if self.beta is not None else (1.0 if dim == 2 else 0.25)
        return alpha, beta

    @property
    def potential_degenerate(self) -> bool:
        """No dielectric response: the potential is identically zero."""
        return self.eps_perp == 0.0 and self.eps_a == 0.0 or self.mu_phi == 0.0

    def validate(self, dim: int, h: float | None = None) -> None:
        for key in ("nu", "A", "eps_perp", "eps_a", "lambda_npp", "mu_phi", "nu_el", "C2", "k", "T",
                    "step_constant"):
            val = getattr(self, key)
            if not np.isfinite(val):
                raise ValidationError(key, "must be finite")
        if self.nu <= 0:
            raise ValidationError("nu", "must be positive")
        for key in ("A", "eps_perp", "eps_a", "lambda_npp", "mu_phi", "nu_el"):
            if getattr(self, key) < 0:
                raise ValidationError(key, "must be non-negative")
        if self.eps_perp == 0 and self.eps_a > 0:
            raise ValidationError("eps_perp", "must be positive when eps_a > 0")
        if self.k <= 0:
            raise ValidationError("k", "must be positive")
        if self.T < 0:
            raise ValidationError("T", "must be non-negative")
        if self.director_bc not in ("neumann", "dirichlet"):
            raise ValidationError("director_bc", "must be 'neumann' or 'dirichlet'")
        if self.truncation_on and self.C2 <= 0:
            raise ValidationError("C2", "must be positive")
        if len(self.applied_field.amplitude) not in (dim, 3):
            raise ValidationError("applied_field", f"needs {dim} or 3 components")
        if self.stabilization_on:
            alpha, beta = self.stabilization_exponents(dim)
            if not 0 < alpha < 6 / dim - 1:
                raise ValidationError("alpha", f"must lie in (0, {6 / dim - 1:g})")
            lo, hi = 2 - 2 * dim / 3, (4 - dim) ** 2 / dim
            if not lo < beta < hi:
                raise ValidationError("beta", f"must lie in ({lo:g}, {hi:g})")
        if h is not None and self.k > self.step_constant * h ** (dim / 2):
            warnings.warn(f"time step {self.k:g} exceeds {self.step_constant:g} h^(d/2) = "
                          f"{self.step_constant * h ** (dim / 2):g}", StepSizeWarning, stacklevel=2)

    def step_size_admissible(self, dim: int, h: float) -> bool:
        return self.k <= self.step_constant * h ** (dim / 2) * (1 + 1e-12)


@dataclass
class DiscreteState:
    """One time level.

    v: MINI velocity, shape (L + E, dim), nodal rows first then bubbles.
    p: pressure (L,), mean zero.  d, q: (L, 3).  n_plus, n_minus, phi: (L,).
    """

    v: np.ndarray
    p: np.ndarray
    d: np.ndarray
    q: np.ndarray
    n_plus: np.ndarray
    n_minus: np.ndarray
    phi: np.ndarray
    t: float = 0.0
    step_index: int = 0

    def copy(self) -> "DiscreteState":
        return DiscreteState(self.v.copy(), self.p.copy(), self.d.copy(), self.q.copy(), self.n_plus.copy(),
                             self.n_minus.copy(), self.phi.copy(), self.t, self.step_index)

    def v_nodal(self, mesh: TriMesh) -> np.ndarray:
        return self.v[: mesh.n_nodes]

    @classmethod
    def zeros(cls, mesh: TriMesh) -> "DiscreteState":
        L, E, dim = mesh.n_nodes, mesh.n_elements, mesh.dim
        return cls(np.zeros((L + E, dim)), np.zeros(L), np.zeros((L, 3)), np.zeros((L, 3)), np.zeros(L),
                   np.zeros(L), np.zeros(L))


@dataclass
class StepCertificate:
    step_index: int
    t: float
    energy_before: float
    energy_after: float
    dissipation: dict[str, float]
    damping: dict[str, float]
    dissipation_sum: float
    energy_residual: float
    max_norm_violation: float
    n_plus_min: float
    n_plus_max: float
    n_minus_min: float
    n_minus_max: float
    charge_mass_drift: float
    divergence_norm: float
    m_matrix_plus: object = None
    m_matrix_minus: object = None
    fixed_point_iters: int = 0
    newton_iters: int = 0
    equation_residuals: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# initial data

Field = Callable[[np.ndarray], np.ndarray]


def _const(value) -> Field:
    arr = np.asarray(value, dtype=float)

    def f(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(arr, (len(x),) + arr.shape).copy()

    return f


@dataclass
class InitialData:
    """Callables evaluated at node coordinates (array of shape (L, dim))."""

    d0: Field = field(default_factory=lambda: _const([0.0, 0.0, 1.0]))
    n_plus0: Field = field(default_factory=lambda: _const(0.0))
    n_minus0: Field = field(default_factory=lambda: _const(0.0))
    v0: Optional[Field] = None
    director_fallback: Optional[tuple[float, float, float]] = (0.0, 0.0, 1.0)
    project_velocity: bool = True
    balance_charges: bool = False
    d_boundary: Optional[Field] = None  # Dirichlet data, defaults to d0


def constant(value) -> Field:
    return _const(value)


def normalize_director(dhat: np.ndarray, fallback=None, tiny: float = 1e-14) -> np.ndarray:
    norms = np.linalg.norm(dhat, axis=1)
    zero = norms <= tiny
    if zero.any() and fallback is None:
        raise UnnormalizableDirector(f"director vanishes at {int(zero.sum())} node(s), first {int(np.argmax(zero))}")
    out = np.empty_like(dhat)
    out[~zero] = dhat[~zero] / norms[~zero, None]
    if zero.any():
        fb = np.asarray(fallback, dtype=float)
        out[zero] = fb / np.linalg.norm(fb)
    return out


def initialize_state(mesh: TriMesh, params: PhysParams, initial_data: InitialData,
                     tol: float = 1e-14) -> DiscreteState:
    """Nodal initial state with consistent potential and auxiliary variable."""
    from . import scheme  # local import: the sub-solvers live there

    x = mesh.nodes
    m = mesh.lumped_mass
    d = normalize_director(np.asarray(initial_data.d0(x), dtype=float).reshape(-1, 3),
                           initial_data.director_fallback)
    n_plus = np.asarray(initial_data.n_plus0(x), dtype=float).reshape(-1).copy()
    n_minus = np.asarray(initial_data.n_minus0(x), dtype=float).reshape(-1).copy()
    for name, n in (("n_plus0", n_plus), ("n_minus0", n_minus)):
        if n.min() < -1e-12 or n.max() > 1 + 1e-12:
            raise ValidationError(name, "initial charge density must lie in [0, 1]")
        np.clip(n, 0.0, 1.0, out=n)
    if initial_data.balance_charges:
        mp, mm = m @ n_plus, m @ n_minus
        if mm > 0 and mp > 0:
            n_minus *= mp / mm
    net = float(m @ (n_plus - n_minus))
    scale = max(float(m @ (n_plus + n_minus)), mesh.volume)
    if abs(net) > 1e-10 * scale:
        raise IncompatibleCharges(f"net charge {net:.3e} is not zero")
    state = DiscreteState.zeros(mesh)
    state.d = d
    state.n_plus = n_plus
    state.n_minus = n_minus
    if initial_data.v0 is not None:
        v = np.zeros((mesh.n_nodes + mesh.n_elements, mesh.dim))
        v[: mesh.n_nodes] = np.asarray(initial_data.v0(x), dtype=float).reshape(mesh.n_nodes, mesh.dim)
        v[mesh.boundary_nodes] = 0.0
        if initial_data.project_velocity:
            v = scheme.project_divergence_free(mesh, v, tol=tol)
        state.v = v
    gshift = None if params.applied_field.is_zero else params.applied_field(0.0)
    state.phi = scheme.solve_potential(mesh, params, d, n_plus - n_minus, tol=tol)
    state.q = scheme.director_q(mesh, params, d, d, state.phi, gshift)
    return state


# ---------------------------------------------------------------------------
# invariants


@dataclass
class Violation:
    name: str
    amount: float
    node: Optional[int]
    detail: str = ""


@dataclass
class ViolationReport:
    violations: list[Violation] = field(default_factory=list)
    max_norm_violation: float = 0.0
    n_plus_range: tuple[float, float] = (0.0, 0.0)
    n_minus_range: tuple[float, float] = (0.0, 0.0)
    net_charge: float = 0.0
    phi_mean: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)


def check_invariants(state: DiscreteState, mesh: TriMesh, *, check_norm: bool = True,
                     max_principle: bool = True, norm_tol: float = 1e-8, bound_tol: float = 1e-10,
                     charge_tol: float = 1e-10, mean_tol: float = 1e-10) -> ViolationReport:
    """Evaluate the state invariants and return the worst offenders."""
    m = mesh.lumped_mass
    rep = ViolationReport()
    norm_dev = np.abs(np.linalg.norm(state.d, axis=1) - 1.0)
    z = int(np.argmax(norm_dev))
    rep.max_norm_violation = float(norm_dev[z])
    if check_norm and norm_dev[z] > norm_tol:
        rep.violations.append(Violation("director_norm", float(norm_dev[z]), z, "| |d| - 1 |"))
    for name, n in (("n_plus", state.n_plus), ("n_minus", state.n_minus)):
        lo, hi = int(np.argmin(n)), int(np.argmax(n))
        setattr(rep, f"{name}_range", (float(n[lo]), float(n[hi])))
        if max_principle:
            if n[lo] < -bound_tol:
                rep.violations.append(Violation(f"{name}_lower", float(-n[lo]), lo, "below 0"))
            if n[hi] > 1 + bound_tol:
                rep.violations.append(Violation(f"{name}_upper", float(n[hi] - 1), hi, "above 1"))
    rep.net_charge = float(m @ (state.n_plus - state.n_minus))
    if abs(rep.net_charge) > charge_tol * mesh.volume:
        rep.violations.append(Violation("net_charge", abs(rep.net_charge), None))
    rep.phi_mean = float(m @ state.phi)
    if abs(rep.phi_mean) > mean_tol * mesh.volume:
        rep.violations.append(Violation("phi_mean", abs(rep.phi_mean), None))
    return rep
