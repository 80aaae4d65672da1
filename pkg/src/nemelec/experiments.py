"""Catalogue of preset experiments.

All presets live on the box (-1/2, 1/2)^d.  Three-dimensional presets default
to a reduced resolution (``n``); ``n_full`` is the resolution of the
published computation and may be selected explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import permutations
from typing import Callable

import numpy as np

from .assembly import p1_stiffness
from .mesh import TriMesh
from .state import AppliedField, DiscreteState, InitialData, PhysParams, constant


class UnknownExperiment(KeyError):
    def __str__(self) -> str:
        return f"unknown experiment {self.args[0]!r}; known: {', '.join(sorted(_CATALOGUE))}"


@dataclass(frozen=True)
class Experiment:
    name: str
    dim: int
    n: int
    params: PhysParams
    initial: InitialData
    n_full: int = 0
    pattern: str | None = None
    freeze: frozenset = frozenset()
    description: str = ""

    @property
    def box(self) -> tuple[tuple[float, float], ...]:
        return ((-0.5, 0.5),) * self.dim

    @property
    def n_steps(self) -> int:
        return int(round(self.params.T / self.params.k))

    def with_(self, **kw) -> "Experiment":
        return replace(self, **kw)


def _gaussian(center, width: float) -> Callable[[np.ndarray], np.ndarray]:
    c = np.asarray(center, dtype=float)

    def f(x: np.ndarray) -> np.ndarray:
        return np.exp(-width * np.sum((x - c[: x.shape[1]]) ** 2, axis=1))

    return f


def _defect_director(x: np.ndarray) -> np.ndarray:
    X, Y = x[:, 0], x[:, 1]
    return np.stack([4 * X ** 2 + 4 * Y ** 2 - 0.25, 2 * Y, np.zeros_like(X)], axis=1)


def _rotation(x: np.ndarray) -> np.ndarray:
    return 10.0 * np.stack([-x[:, 1], x[:, 0]], axis=1)


def _unit(*v: float) -> tuple[float, ...]:
    a = np.asarray(v, dtype=float)
    return tuple(a / np.linalg.norm(a))


# Ericksen-Leslie coupling only: no charges and no dielectric response.
_EL = dict(lambda_npp=0.0, eps_a=0.0, eps_perp=0.0)
# Full system in three dimensions.
_FULL = dict(nu=1.0, A=0.1, nu_el=1.0, eps_perp=0.1)


def _defect_flow() -> Experiment:
    params = PhysParams(A=1.0, nu=1.0, nu_el=0.25, k=5e-4, T=0.1, **_EL)
    return Experiment("defect_flow", 2, 16, params, InitialData(d0=_defect_director), n_full=16,
                      description="two director defects attract and annihilate")


def _velocity_flow() -> Experiment:
    params = PhysParams(A=0.1, nu=1.0, nu_el=1.0, k=5e-4, T=0.25, **_EL)
    init = InitialData(d0=_defect_director, v0=_rotation)
    return Experiment("velocity_flow", 2, 16, params, init, n_full=16,
                      description="a rotating initial flow advects the defects")


def _dipole_static() -> Experiment:
    params = PhysParams(lambda_npp=100.0, mu_phi=0.25, eps_a=100.0, k=5e-4, T=5e-3, **_FULL)
    init = InitialData(d0=constant([0.0, 0.0, 1.0]), n_plus0=_gaussian((0.2, 0, 0), 50.0),
                       n_minus0=_gaussian((-0.2, 0, 0), 50.0), balance_charges=True)
    return Experiment("dipole_static", 3, 8, params, init, n_full=32,
                      freeze=frozenset({"charges", "director"}),
                      description="frozen dipole charges and director; potential and flow respond")


def _anisotropic(dim: int) -> Experiment:
    params = PhysParams(lambda_npp=100.0, mu_phi=0.125, eps_a=100.0, k=2.5e-4, T=0.045, **_FULL)
    init = InitialData(d0=constant(_unit(0, 1, 1)), n_plus0=_gaussian((0.2, 0, 0), 25.0),
                       n_minus0=_gaussian((-0.2, 0, 0), 25.0), balance_charges=True)
    name = "anisotropic_diffusion" if dim == 3 else "anisotropic_diffusion_2d"
    return Experiment(name, dim, 8 if dim == 3 else 16, params, init, n_full=16,
                      description="charges spread along the director")


def _field_params(E0, omega: float = 0.0, **kw) -> PhysParams:
    base = dict(lambda_npp=1000.0, mu_phi=1.0, eps_a=10.0, k=1e-3, applied_field=AppliedField(tuple(E0), omega))
    base.update(_FULL)
    base.update(kw)
    return PhysParams(**base)


def _uniform_field() -> Experiment:
    params = _field_params((0.4, 0.0, 0.0), T=0.03)
    init = InitialData(d0=constant(_unit(1, 1, 1)), n_plus0=constant(0.5), n_minus0=constant(0.5))
    return Experiment("uniform_field", 3, 8, params, init, n_full=16,
                      description="an applied field separates the charges and turns the director")


def _constant_field() -> Experiment:
    params = _field_params((1.0, 0.0, 0.0), T=0.1)
    init = InitialData(d0=constant(_unit(1, 0, 1)), n_plus0=constant(0.5), n_minus0=constant(0.5))
    return Experiment("constant_field", 3, 8, params, init, n_full=32,
                      description="flow induced by a constant applied field, director (1,0,1)")


def _oscillating_field() -> Experiment:
    params = _field_params((1.0, 0.0, 0.0), omega=35.0 * np.pi, T=0.15)
    init = InitialData(d0=constant(_unit(1, 0, 1)), n_plus0=constant(0.5), n_minus0=constant(0.5))
    return Experiment("oscillating_field", 3, 8, params, init, n_full=16,
                      description="flow sustained by an alternating applied field")


def _custom() -> Experiment:
    return Experiment("custom", 2, 8, PhysParams(), InitialData(), description="constant initial data from config")


_CATALOGUE: dict[str, Callable[[], Experiment]] = {
    "defect_flow": _defect_flow,
    "velocity_flow": _velocity_flow,
    "dipole_static": _dipole_static,
    "anisotropic_diffusion": lambda: _anisotropic(3),
    "anisotropic_diffusion_2d": lambda: _anisotropic(2),
    "uniform_field": _uniform_field,
    "constant_field": _constant_field,
    "director_velocity": lambda: _constant_field().with_(name="director_velocity"),
    "oscillating_field": _oscillating_field,
    "custom": _custom,
}


def experiment_names() -> list[str]:
    return sorted(_CATALOGUE)


def experiment_catalogue(name: str) -> Experiment:
    try:
        factory = _CATALOGUE[name]
    except KeyError:
        raise UnknownExperiment(name) from None
    return factory()


# ---------------------------------------------------------------------------
# diagnostics


def defect_locations(state: DiscreteState, mesh: TriMesh, count: int = 2,
                     separation: float = 0.1) -> np.ndarray:
    """Centroids of the ``count`` elements with smallest barycentric |d|, mutually ``separation`` apart.

    Nodal directors are unit vectors, so the P1 director averaged over an
    element is short exactly where it turns quickly, i.e. near a defect.
    """
    mag = np.linalg.norm(state.d[mesh.elements].mean(axis=1), axis=1)
    centroids = mesh.nodes[mesh.elements].mean(axis=1)
    found: list[np.ndarray] = []
    for e in np.argsort(mag, kind="stable"):
        c = centroids[e]
        if all(np.linalg.norm(c - f) >= separation for f in found):
            found.append(c)
            if len(found) == count:
                break
    return np.array(found)


def director_gradient_energy(state: DiscreteState, mesh: TriMesh) -> float:
    """||grad d||^2 of the P1 director."""
    K = p1_stiffness(mesh)
    return float(np.einsum("ic,ic->", state.d, K @ state.d))


def rotation_angle(before: np.ndarray, after: np.ndarray, center=None) -> float:
    """Mean counter-clockwise angle about ``center`` from matched points ``before`` to ``after``.

    Points are matched to the nearest-in-angle partner, so the pair order does
    not matter; accumulate over short intervals to follow large rotations.
    """
    c = np.zeros(2) if center is None else np.asarray(center, dtype=float)
    a0 = np.arctan2(*(before[:, :2] - c)[:, ::-1].T)
    a1 = np.arctan2(*(after[:, :2] - c)[:, ::-1].T)
    best = None
    for perm in permutations(range(len(a1))):
        delta = np.angle(np.exp(1j * (a1[list(perm)] - a0)))
        if best is None or np.abs(delta).sum() < np.abs(best).sum():
            best = delta
    return float(np.mean(best))
