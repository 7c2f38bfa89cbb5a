"""Exactly solvable multichannel models built from spectral data.

The construction runs the inverse direction of the usual workflow: instead of
fixing an interaction matrix and solving for its spectrum, a small set of
spectral quantities (channel thresholds, one bound energy, tail weights) is
chosen freely and the unique reflectionless symmetric coupling matrix that
realizes them is written down in closed form, together with its bound state.
Units are hbar = 2m = 1 throughout, so energies are inverse squared lengths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import logsumexp

from .errors import ValidationError

__all__ = [
    "SpectralData",
    "PotentialMatrix",
    "BoundState",
    "build_reflectionless",
    "bound_state",
    "zero_potential",
    "equation_residual",
]


@dataclass(frozen=True)
class SpectralData:
    """Spectral input fixing one N-channel model with a single bound level.

    Parameters
    ----------
    n_channels : int
        Number of coupled channels, N >= 1.
    thresholds : sequence of float
        Channel thresholds ``eps_i``; channel i is open at energy E > eps_i.
    e_bound : float
        Energy of the single bound state.  Must lie strictly below every
        threshold, otherwise no closed-channel bound state is possible.
    weights : sequence of float
        Strictly positive tail weights M_i: the bound-state component in
        channel i decays as ``M_i * exp(-kappa_i * x)`` for large x, with
        ``kappa_i = sqrt(eps_i - e_bound)``.
    """

    n_channels: int
    thresholds: tuple[float, ...]
    e_bound: float
    weights: tuple[float, ...]

    def __post_init__(self):
        if not isinstance(self.n_channels, int) or self.n_channels < 1:
            raise ValidationError(f"n_channels must be a positive integer, got {self.n_channels!r}")
        thresholds = tuple(float(t) for t in self.thresholds)
        weights = tuple(float(m) for m in self.weights)
        e_bound = float(self.e_bound)
        if len(thresholds) != self.n_channels:
            raise ValidationError(
                f"expected {self.n_channels} thresholds, got {len(thresholds)}"
            )
        if len(weights) != self.n_channels:
            raise ValidationError(f"expected {self.n_channels} weights, got {len(weights)}")
        if not all(math.isfinite(t) for t in thresholds) or not math.isfinite(e_bound):
            raise ValidationError("thresholds and e_bound must be finite")
        if not all(math.isfinite(m) and m > 0.0 for m in weights):
            raise ValidationError("weights must be finite and strictly positive")
        if e_bound >= min(thresholds):
            raise ValidationError(
                f"e_bound={e_bound} must lie strictly below the lowest threshold "
                f"{min(thresholds)}: no closed-channel bound state possible"
            )
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "e_bound", e_bound)

    @cached_property
    def kappas(self) -> tuple[float, ...]:
        """Closed-channel decay rates ``kappa_i = sqrt(eps_i - e_bound)``."""
        return tuple(math.sqrt(t - self.e_bound) for t in self.thresholds)

    @property
    def half_width(self) -> float:
        """Half-width 25 / min(kappa) of the default working interval."""
        return 25.0 / min(self.kappas)

    @classmethod
    def from_dict(cls, doc: dict) -> "SpectralData":
        """Build from a mapping with keys n_channels, thresholds, e_bound, weights."""
        missing = {"n_channels", "thresholds", "e_bound", "weights"} - set(doc)
        if missing:
            raise ValidationError(f"spectral data document missing keys {sorted(missing)}")
        return cls(
            n_channels=doc["n_channels"],
            thresholds=tuple(doc["thresholds"]),
            e_bound=doc["e_bound"],
            weights=tuple(doc["weights"]),
        )

    # ------------------------------------------------------------------
    # Stable evaluation helpers.  The shared denominator
    #     D(x) = 1 + sum_m (M_m^2 / 2 kappa_m) exp(-2 kappa_m x)
    # overflows float64 for moderately negative x, so everything is carried
    # in log space: log D via logsumexp, and the half-normalized tails
    #     w_i(x) = M_i exp(-kappa_i x - log D / 2)
    # which stay bounded for all real x.  All derived quantities (potential
    # matrix, bound-state components, logarithmic derivatives) are smooth
    # functions of the w_i alone.
    # ------------------------------------------------------------------

    @cached_property
    def _consts(self):
        kap = np.asarray(self.kappas, dtype=float)
        m = np.asarray(self.weights, dtype=float)
        c0 = np.log(m * m / (2.0 * kap))
        ksum = kap[:, None] + kap[None, :]
        return c0, kap, m, ksum

    def _log_d(self, x: np.ndarray) -> np.ndarray:
        c0, kap, _, _ = self._consts
        s = c0[None, :] - 2.0 * np.outer(x, kap)
        s = np.concatenate([np.zeros((x.shape[0], 1)), s], axis=1)
        return logsumexp(s, axis=1)

    def _tails(self, x: np.ndarray):
        """Return (w, log_d) with w of shape (len(x), N)."""
        _, kap, m, _ = self._consts
        log_d = self._log_d(x)
        w = m[None, :] * np.exp(-np.outer(x, kap) - 0.5 * log_d[:, None])
        return w, log_d


def _as_grid(x) -> tuple[np.ndarray, bool]:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise ValidationError(f"expected scalar or 1-d coordinate array, got shape {arr.shape}")
    return arr, np.ndim(x) == 0


@dataclass(frozen=True)
class PotentialMatrix:
    """Symmetric coupling matrix v_ij(x), evaluated pointwise on demand.

    Instances are pure functions of position: ``pot(x)`` returns the (N, N)
    matrix for scalar x, or a stack of shape (len(x), N, N) for a 1-d array.
    ``kind`` is one of "reflectionless" (built from :class:`SpectralData`),
    "zero" (the free N-channel model) or "custom" (arbitrary callable,
    plumbing for experiments; no solvability guarantees).
    """

    n_channels: int
    kind: str
    source: SpectralData | None = None
    custom: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("reflectionless", "zero", "custom"):
            raise ValidationError(f"unknown potential kind {self.kind!r}")
        if self.kind == "reflectionless":
            if self.source is None:
                raise ValidationError("reflectionless potential requires spectral data")
            if self.source.n_channels != self.n_channels:
                raise ValidationError("channel count does not match spectral data")
        if self.kind == "custom" and self.custom is None:
            raise ValidationError("custom potential requires an evaluator callable")

    def __call__(self, x):
        grid, scalar = _as_grid(x)
        if self.kind == "zero":
            v = np.zeros((grid.shape[0], self.n_channels, self.n_channels))
        elif self.kind == "custom":
            v = np.asarray([np.asarray(self.custom(t), dtype=float) for t in grid])
            if v.shape != (grid.shape[0], self.n_channels, self.n_channels):
                raise ValidationError("custom evaluator returned a wrongly shaped matrix")
        else:
            v = _reflectionless_on(self.source, grid)
        return v[0] if scalar else v

    def matrix_at(self, x: float) -> np.ndarray:
        """Fast scalar evaluation; the returned array must not be mutated."""
        if self.kind == "zero":
            return _ZERO_CACHE.setdefault(self.n_channels, np.zeros((self.n_channels,) * 2))
        if self.kind == "custom":
            return np.asarray(self.custom(x), dtype=float)
        c0, kap, m, ksum = self.source._consts
        s = c0 - 2.0 * kap * x
        smax = max(float(s.max()), 0.0)
        log_d = smax + math.log(math.exp(-smax) + float(np.exp(s - smax).sum()))
        w = m * np.exp(-kap * x - 0.5 * log_d)
        t = -float(w @ w)
        return -2.0 * np.outer(w, w) * (ksum + t)

    def flat_bounds(self, tol: float = 1e-10) -> tuple[float, float]:
        """Return (x_left, x_right) outside of which max_ij |v_ij| stays below tol.

        Found by outward marching on the evaluated matrix.  The two sides can
        be very different: every entry decays at rate 2*min(kappa) to the
        right, but to the left the slowest entries decay only at the rate
        |kappa_i - kappa_j| of the channel-gap, which for nearly degenerate
        rates pushes the boundary far out.
        """
        if self.kind == "zero":
            return (0.0, 0.0)
        if self.kind == "custom":
            raise ValidationError("flat bounds are only defined for built-in potentials")
        if not tol > 0.0:
            raise ValidationError("tol must be positive")
        kap_min = min(self.source.kappas)
        out = []
        for sign in (1.0, -1.0):
            x = sign * 1.0 / kap_min
            step = 1.0 / kap_min
            # Probe a short outward window, not just the single point, so a
            # sign-crossing dip in one off-diagonal entry cannot stop the
            # march early.
            for _ in range(8000):
                probes = x + sign * np.array([0.0, 0.31 * step, step])
                if float(np.abs(self(probes)).max()) < tol:
                    break
                x += sign * step
                step *= 1.25
            else:
                raise ValidationError("potential does not flatten within the search window")
            out.append(x)
        return (out[1], out[0])


_ZERO_CACHE: dict[int, np.ndarray] = {}


def _reflectionless_on(spectral: SpectralData, grid: np.ndarray) -> np.ndarray:
    """Evaluate the closed-form coupling matrix on a 1-d grid.

    Differentiating the quotient form 2 d/dx [M_i M_j e^{-(k_i+k_j)x} / D]
    and substituting D'/D = -sum_m w_m^2 collapses to

        v_ij(x) = -2 w_i w_j (kappa_i + kappa_j - sum_m w_m^2),

    which involves only the bounded half-normalized tails w_i.
    """
    _, kap, _, _ = spectral._consts
    w, _ = spectral._tails(grid)
    t = -(w * w).sum(axis=1)
    ksum = kap[:, None] + kap[None, :]
    return -2.0 * w[:, :, None] * w[:, None, :] * (ksum[None, :, :] + t[:, None, None])


def build_reflectionless(spectral: SpectralData) -> PotentialMatrix:
    """Construct the symmetric reflectionless coupling matrix for the data.

    The matrix supports exactly one bound state, at ``spectral.e_bound``,
    with channel tails ``M_i exp(-kappa_i x)``, and is transparent at every
    fully open energy.  Invalid data (bound energy not below all thresholds,
    non-positive weights) is rejected by :class:`SpectralData` itself.
    """
    return PotentialMatrix(n_channels=spectral.n_channels, kind="reflectionless", source=spectral)


def zero_potential(n_channels: int) -> PotentialMatrix:
    """The free model: v identically zero for n_channels channels."""
    if not isinstance(n_channels, int) or n_channels < 1:
        raise ValidationError(f"n_channels must be a positive integer, got {n_channels!r}")
    return PotentialMatrix(n_channels=n_channels, kind="zero")


@dataclass(frozen=True)
class BoundState:
    """The single bound state of a reflectionless model.

    ``components(x)`` returns the channel wave functions
    ``psi_i(x) = M_i exp(-kappa_i x) / D(x)``; they solve the coupled
    stationary problem at ``energy`` and decay on both sides.  Because
    ``sum_i psi_i(x)^2 = (1/D)'(x)`` is a total derivative running from 0 to
    1, the state comes out exactly unit-normalized; ``channel_norms`` holds
    the quadrature values of each channel's share of that unit norm.
    """

    energy: float
    spectral: SpectralData
    channel_norms: tuple[float, ...]

    def components(self, x):
        grid, scalar = _as_grid(x)
        _, kap, m, _ = self.spectral._consts
        _, log_d = self.spectral._tails(grid)
        psi = m[None, :] * np.exp(-np.outer(grid, kap) - log_d[:, None])
        return psi[0] if scalar else psi

    def components_derivative(self, x):
        grid, scalar = _as_grid(x)
        _, kap, m, _ = self.spectral._consts
        w, log_d = self.spectral._tails(grid)
        psi = m[None, :] * np.exp(-np.outer(grid, kap) - log_d[:, None])
        dpsi = psi * (-kap[None, :] + (w * w).sum(axis=1)[:, None])
        return dpsi[0] if scalar else dpsi

    @property
    def total_norm(self) -> float:
        return float(sum(self.channel_norms))


def bound_state(spectral: SpectralData, quad_rel_tol: float = 1e-10) -> BoundState:
    """Evaluate the closed-form bound state and its channel norms.

    Norms are computed by adaptive quadrature of psi_i^2 over the whole line
    (split at the origin to keep the integrand tame on both tails).
    """
    state = BoundState(energy=spectral.e_bound, spectral=spectral, channel_norms=())
    norms = []
    for i in range(spectral.n_channels):
        f = lambda x, i=i: float(state.components(x)[i]) ** 2
        left, _ = quad(f, -np.inf, 0.0, epsabs=1e-13, epsrel=quad_rel_tol, limit=200)
        right, _ = quad(f, 0.0, np.inf, epsabs=1e-13, epsrel=quad_rel_tol, limit=200)
        norms.append(left + right)
    return BoundState(energy=spectral.e_bound, spectral=spectral, channel_norms=tuple(norms))


def equation_residual(
    potential: PotentialMatrix,
    thresholds: Sequence[float],
    energy: float,
    components: Callable,
    x,
    fd_step: float = 1e-3,
) -> np.ndarray:
    """Residual of the coupled stationary equations at the given points.

    Computes ``-psi_i'' + sum_j v_ij psi_j - (energy - eps_i) psi_i`` with
    the second derivative taken by the 5-point central difference of the
    supplied ``components`` callable (signature: 1-d array -> (len, N)).
    Returns an array of shape (len(x), N).
    """
    grid, scalar = _as_grid(x)
    thresholds = np.asarray(thresholds, dtype=float)
    h = float(fd_step)
    stack = [np.atleast_2d(components(grid + k * h)) for k in (-2, -1, 0, 1, 2)]
    second = (-stack[0] + 16.0 * stack[1] - 30.0 * stack[2] + 16.0 * stack[3] - stack[4]) / (
        12.0 * h * h
    )
    psi = stack[2]
    v = potential(grid)
    coupled = np.einsum("kij,kj->ki", v, psi)
    resid = -second + coupled - (energy - thresholds)[None, :] * psi
    return resid[0] if scalar else resid
