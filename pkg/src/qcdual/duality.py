"""Rename-based map between stationary channel problems and Newtonian motion.

Renaming the coordinate x -> t and the wave components psi_i -> z_i turns the
coupled stationary equations into linear equations of motion: N channels
become N bodies on a line (or, for N = 3, one body in three dimensions),
driven by the time-dependent force law

    F_i(t, z) = sum_j v_ij(t) z_j - E_i z_i,      E_i = E - eps_i.

The map is a pure renaming: trajectories of the force system and wave
solutions of the channel problem are the same functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PotentialMatrix
from .errors import NoQuantumDualError, ValidationError

__all__ = [
    "ClassicalState",
    "ForceSystem",
    "dualize",
    "force",
    "quantum_energy_of",
]

INTERPRETATIONS = ("few-body", "single-particle-3d")


@dataclass(frozen=True)
class ClassicalState:
    """Instantaneous state (t, z, zdot) of the N coordinates."""

    t: float
    z: tuple[float, ...]
    zdot: tuple[float, ...]

    def __post_init__(self):
        z = tuple(float(v) for v in self.z)
        zdot = tuple(float(v) for v in self.zdot)
        if len(z) != len(zdot):
            raise ValidationError(f"z has {len(z)} entries but zdot has {len(zdot)}")
        if not all(np.isfinite(z)) or not all(np.isfinite(zdot)) or not np.isfinite(self.t):
            raise ValidationError("state entries must be finite")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "zdot", zdot)

    @property
    def n(self) -> int:
        return len(self.z)


@dataclass(frozen=True)
class ForceSystem:
    """Linear nonstationary force law dual to a channel problem.

    ``e_params`` holds the per-coordinate stiffness constants E_i; the
    acceleration is ``F(t, z) = v(t) @ z - e_params * z``.  The
    ``interpretation`` tag ("few-body" for N bodies on a line,
    "single-particle-3d" for one body in 3-D when N = 3) is pure metadata
    for labeling output; it never changes the dynamics.
    """

    n_bodies: int
    potential: PotentialMatrix
    e_params: tuple[float, ...]
    interpretation: str = "few-body"

    def __post_init__(self):
        if self.interpretation not in INTERPRETATIONS:
            raise ValidationError(
                f"interpretation must be one of {INTERPRETATIONS}, got {self.interpretation!r}"
            )
        e_params = tuple(float(e) for e in self.e_params)
        if len(e_params) != self.n_bodies:
            raise ValidationError(f"expected {self.n_bodies} e_params, got {len(e_params)}")
        if self.potential.n_channels != self.n_bodies:
            raise ValidationError(
                f"potential has {self.potential.n_channels} channels, system has "
                f"{self.n_bodies} bodies"
            )
        if self.interpretation == "single-particle-3d" and self.n_bodies != 3:
            raise ValidationError("single-particle-3d interpretation requires exactly 3 coordinates")
        if not all(np.isfinite(e_params)):
            raise ValidationError("e_params must be finite")
        object.__setattr__(self, "e_params", e_params)

    def force(self, t: float, z) -> np.ndarray:
        """Acceleration F(t, z) for one state; z has shape (N,)."""
        z = np.asarray(z, dtype=float)
        e = np.asarray(self.e_params)
        return self.potential.matrix_at(float(t)) @ z - e * z

    def force_matrix(self, t: float, z: np.ndarray) -> np.ndarray:
        """Acceleration applied column-wise; z has shape (N, n_columns)."""
        e = np.asarray(self.e_params)
        return self.potential.matrix_at(float(t)) @ z - e[:, None] * z

    def state_labels(self) -> tuple[str, ...]:
        if self.interpretation == "single-particle-3d":
            return ("x", "y", "z")
        return tuple(f"z_{i + 1}" for i in range(self.n_bodies))


def dualize(
    potential: PotentialMatrix,
    e_params: Sequence[float],
    interpretation: str = "few-body",
) -> ForceSystem:
    """Build the force system dual to a channel problem.

    ``e_params[i]`` is E - eps_i for the quantum energy E of interest; pass
    the values directly so the same system can also represent force laws
    with no quantum counterpart (see :func:`quantum_energy_of`).
    """
    return ForceSystem(
        n_bodies=potential.n_channels,
        potential=potential,
        e_params=tuple(e_params),
        interpretation=interpretation,
    )


def force(system: ForceSystem, t: float, z) -> np.ndarray:
    """Acceleration of ``system`` at time t and configuration z."""
    return system.force(t, z)


def quantum_energy_of(
    e_params: Sequence[float],
    thresholds: Sequence[float],
    tol: float = 1e-12,
) -> float:
    """Recover the single quantum energy E from stiffness constants.

    Every coordinate must report the same ``E = E_i + eps_i``; if the spread
    around the mean exceeds ``tol`` the force law has no quantum dual and a
    :class:`NoQuantumDualError` is raised.
    """
    e_params = np.asarray(e_params, dtype=float)
    thresholds = np.asarray(thresholds, dtype=float)
    if e_params.shape != thresholds.shape:
        raise ValidationError(
            f"e_params shape {e_params.shape} does not match thresholds shape {thresholds.shape}"
        )
    candidates = e_params + thresholds
    mean = float(candidates.mean())
    spread = float(np.abs(candidates - mean).max())
    if spread > tol:
        raise NoQuantumDualError(
            f"no quantum dual: E_i + eps_i spread {spread:.3e} exceeds {tol:.1e}"
        )
    return mean
