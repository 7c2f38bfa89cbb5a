"""Quantum-classical duality toolkit: solvable channel models, their
Newtonian duals, certified integration, and bifurcation analysis."""

from .core import (
    BoundState,
    PotentialMatrix,
    SpectralData,
    bound_state,
    build_reflectionless,
    equation_residual,
    zero_potential,
)
from .duality import ClassicalState, ForceSystem, dualize, force, quantum_energy_of
from .errors import (
    AsymptoteError,
    IntegrationError,
    NoQuantumDualError,
    SourceParseError,
    ValidationError,
)
from .integrate import (
    AsymptoticLine,
    ScatteringResult,
    Trajectory,
    integrate,
    reflection,
    shoot_schrodinger,
)
from .analysis import (
    BifurcationPoint,
    ConcentrationReport,
    ScanReport,
    SourceTerm,
    classical_return_demo,
    concentration_sweep,
    fit_asymptotic_line,
    scan_bifurcations,
    solve_with_source,
)

__version__ = "0.1.0"

__all__ = [
    "AsymptoteError",
    "AsymptoticLine",
    "BifurcationPoint",
    "BoundState",
    "ClassicalState",
    "ConcentrationReport",
    "ForceSystem",
    "IntegrationError",
    "NoQuantumDualError",
    "PotentialMatrix",
    "ScanReport",
    "ScatteringResult",
    "SourceParseError",
    "SourceTerm",
    "SpectralData",
    "Trajectory",
    "ValidationError",
    "bound_state",
    "build_reflectionless",
    "classical_return_demo",
    "concentration_sweep",
    "dualize",
    "equation_residual",
    "fit_asymptotic_line",
    "force",
    "integrate",
    "quantum_energy_of",
    "reflection",
    "scan_bifurcations",
    "shoot_schrodinger",
    "solve_with_source",
    "zero_potential",
]
