"""Energy-stable finite element simulation of nematic electrolytes.

Couples incompressible flow (MINI element), a unit-length director, two
ionic charge densities and the electric potential through a fixed-point
iteration per time step.
"""
from .mesh import MeshError, TriMesh, build_structured_mesh, check_mesh_admissibility
from .state import (AppliedField, DiscreteState, InitialData, PhysParams, StepCertificate, ValidationError,
                    check_invariants, initialize_state)
from .scheme import FixedPointConfig, SchemeError, Trajectory, run, step
from .certificates import (energy_law_residual, gronwall_accumulate, regularity_weights, relative_dissipation,
                           relative_energy, residual_operator_Ad, total_energy)

__all__ = [
    "MeshError", "TriMesh", "build_structured_mesh", "check_mesh_admissibility",
    "AppliedField", "DiscreteState", "InitialData", "PhysParams", "StepCertificate", "ValidationError",
    "check_invariants", "initialize_state",
    "FixedPointConfig", "SchemeError", "Trajectory", "run", "step",
    "energy_law_residual", "gronwall_accumulate", "regularity_weights", "relative_dissipation",
    "relative_energy", "residual_operator_Ad", "total_energy",
]
__version__ = "0.1.0"
