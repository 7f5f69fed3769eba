"""Expected-motion version of the lattice model for quadratic potentials.

Closed-form evaluation of the expected position, the quantum propensity and
the position/momentum densities of a prepared source ensemble. Sampling is
done by transporting the source momentum through the implicit position
equation, which is the Jacobian rule the densities are derived from.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, root

from errors import SingularTimeError
from particles import SourceEnsemble, Vector3

logger = logging.getLogger(__name__)

SINGULAR_TOLERANCE = 1e-12
DEFAULT_FILTER_TIME_CONSTANT = 8.0


@dataclass(frozen=True)
class KinematicCoeffs:
    kind: str = "free"  # free | free_fall | harmonic
    force: Vector3 = (0.0, 0.0, 0.0)
    omega: float = 0.0

    @classmethod
    def free(cls) -> "KinematicCoeffs":
        return cls("free")

    @classmethod
    def free_fall(cls, force: Sequence[float]) -> "KinematicCoeffs":
        return cls("free_fall", force=tuple(float(f) for f in force))

    @classmethod
    def harmonic(cls, omega: float) -> "KinematicCoeffs":
        return cls("harmonic", omega=float(omega))

    def evaluate(self, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        ones = np.ones(3)
        if self.kind == "free":
            return ones, ones * t, np.zeros(3)
        if self.kind == "free_fall":
            return ones, ones * t, np.asarray(self.force, dtype=float) * t * t / 2.0
        if self.kind == "harmonic":
            return ones * math.cos(self.omega * t), ones * math.sin(self.omega * t) / self.omega, np.zeros(3)
        raise ValueError(f"unknown kinematics {self.kind!r}")


def expected_position(x0, v_q, coeffs: KinematicCoeffs, t: float) -> np.ndarray:
    a, b, c = coeffs.evaluate(t)
    return a * np.asarray(x0, dtype=float) + b * np.asarray(v_q, dtype=float) + c


@dataclass(frozen=True)
class PairTerms:
    weight: np.ndarray  # sqrt(P_i P_j), shape (K,)
    delta: np.ndarray  # x0_i - x0_j, shape (K, 3)
    midpoint: np.ndarray  # (x0_i + x0_j) / 2, shape (K, 3)
    phase: np.ndarray  # sum_d (eps_i - eps_j), shape (K,)

    def __len__(self) -> int:
        return len(self.weight)


def pair_terms(ens: SourceEnsemble) -> PairTerms:
    positions = ens.positions.astype(float)
    probabilities = ens.probabilities
    phases = ens.phases.sum(axis=1)
    i, j = np.where(~np.eye(len(ens.sources), dtype=bool))
    keep = (probabilities[i] > 0.0) & (probabilities[j] > 0.0)
    i, j = i[keep], j[keep]
    return PairTerms(
        weight=np.sqrt(probabilities[i] * probabilities[j]),
        delta=positions[i] - positions[j],
        midpoint=(positions[i] + positions[j]) / 2.0,
        phase=phases[i] - phases[j],
    )


def _checked_coeffs(coeffs: KinematicCoeffs, t: float, dims: Sequence[int]):
    a, b, c = coeffs.evaluate(t)
    if np.any(np.abs(b[list(dims)]) < SINGULAR_TOLERANCE):
        raise SingularTimeError(f"B(t) vanishes at t={t:g} for {coeffs.kind} kinematics")
    return a, b, c


def _arguments(x: np.ndarray, terms: PairTerms, a, b, c, dims: Sequence[int]) -> np.ndarray:
    dims = list(dims)
    scaled = (x[:, None, dims] - a[dims] * terms.midpoint[None, :, dims] - c[dims]) / b[dims]
    return math.pi * np.sum(terms.delta[None, :, dims] * scaled, axis=2) - math.pi * terms.phase[None, :]


def interference_sum(x, t: float, ens: SourceEnsemble, rho, coeffs: KinematicCoeffs) -> np.ndarray:
    """Sum over pairs of sqrt(P_i P_j) sin(arg) / (pi sum_d rho_d delta_d), per position."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    terms = pair_terms(ens)
    if not len(terms):
        return np.zeros(len(x))
    a, b, c = _checked_coeffs(coeffs, t, ens.active_dims)
    projection = terms.delta @ np.asarray(rho, dtype=float)
    usable = np.abs(projection) > SINGULAR_TOLERANCE
    if not np.any(usable):
        return np.zeros(len(x))
    args = _arguments(x, terms, a, b, c, ens.active_dims)[:, usable]
    return np.sum(terms.weight[usable] * np.sin(args) / (math.pi * projection[usable]), axis=1)


def quantum_propensity(
    x, t: float, ens: SourceEnsemble, rho, coeffs: KinematicCoeffs, v0: Optional[Sequence[float]] = None
) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    v0 = np.asarray(ens.v0 if v0 is None else v0, dtype=float)
    shift = interference_sum(x, t, ens, rho, coeffs)
    result = v0[None, :] - rho[None, :] * shift[:, None]
    return result[0] if np.ndim(x) == 1 else result


def _support_mask(x: np.ndarray, ens: SourceEnsemble, a, b, c) -> np.ndarray:
    dims = list(ens.active_dims)
    centre = a * (ens.probabilities @ ens.positions.astype(float)) + c
    offset = np.abs(x[:, dims] - centre[dims]) - np.abs(b[dims])
    inside = np.all(offset <= SINGULAR_TOLERANCE, axis=1)
    # Points on the support boundary carry half weight per dimension
    edges = np.sum(np.abs(offset) <= SINGULAR_TOLERANCE, axis=1)
    return np.where(inside, 0.5**edges, 0.0)


def position_pdf(x, t: float, ens: SourceEnsemble, coeffs: KinematicCoeffs) -> np.ndarray:
    """Density of the expected position over the active dimensions.

    Support is the reachable box around the probability-weighted source centre;
    boundary nodes carry half weight so unit-pitch sums integrate to one.
    """
    points = np.atleast_2d(np.asarray(x, dtype=float))
    a, b, c = _checked_coeffs(coeffs, t, ens.active_dims)
    terms = pair_terms(ens)
    numerator = np.ones(len(points))
    if len(terms):
        numerator = numerator + np.cos(_arguments(points, terms, a, b, c, ens.active_dims)) @ terms.weight
    volume = float(np.prod([2.0 * abs(b[d]) for d in ens.active_dims]))
    density = numerator / volume * _support_mask(points, ens, a, b, c)
    return density[0] if np.ndim(x) == 1 else density


def momentum_pdf(v_q, ens: SourceEnsemble) -> np.ndarray:
    points = np.atleast_2d(np.asarray(v_q, dtype=float))
    terms = pair_terms(ens)
    value = np.ones(len(points))
    if len(terms):
        dims = list(ens.active_dims)
        args = math.pi * points[:, dims] @ terms.delta[:, dims].T - math.pi * terms.phase[None, :]
        value = value + np.cos(args) @ terms.weight
    density = value / 2.0 ** len(ens.active_dims)
    return density[0] if np.ndim(v_q) == 1 else density


def _separation_axis(terms: PairTerms) -> Optional[int]:
    axes = {int(d) for row in terms.delta for d in np.flatnonzero(row)}
    return axes.pop() if len(axes) == 1 else None


def solve_expected_position(
    x0, v0, t: float, ens: SourceEnsemble, rho, coeffs: KinematicCoeffs
) -> Tuple[np.ndarray, np.ndarray]:
    """Expected position and quantum propensity reached from source momentum ``v0``.

    Solves ``v0 = v_Q + rho * interference(x(v_Q))`` with ``x = A x0 + B v_Q + C``.
    Returns ``(x, v_q)``.
    """
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    rho = np.asarray(rho, dtype=float)
    terms = pair_terms(ens)
    a, b, c = _checked_coeffs(coeffs, t, ens.active_dims)
    if not len(terms):
        return a * x0 + b * v0 + c, v0.copy()

    axis = _separation_axis(terms)
    if axis is not None and np.count_nonzero(rho[list(ens.active_dims)]) <= 1 and rho[axis] != 0.0:
        bound = float(np.sum(terms.weight / (math.pi * np.abs(terms.delta[:, axis] * rho[axis])))) + 1e-9

        def residual(u: float) -> float:
            v_q = v0.copy()
            v_q[axis] = u
            x = a * x0 + b * v_q + c
            return u + rho[axis] * interference_sum(x, t, ens, rho, coeffs)[0] - v0[axis]

        v_q = v0.copy()
        v_q[axis] = brentq(residual, v0[axis] - bound, v0[axis] + bound, xtol=1e-12)
        return a * x0 + b * v_q + c, v_q

    def residual_vec(u: np.ndarray) -> np.ndarray:
        x = a * x0 + b * u + c
        return u + rho * interference_sum(x, t, ens, rho, coeffs)[0] - v0

    solution = root(residual_vec, v0, method="hybr")
    if not solution.success:
        logger.warning("Expected-position solve did not converge: %s", solution.message)
    return a * x0 + b * solution.x + c, solution.x


class QuantumMomentumFilter:
    """First-order lag applied to the interference part of the quantum propensity."""

    def __init__(self, time_constant: float = DEFAULT_FILTER_TIME_CONSTANT) -> None:
        if time_constant < 1.0:
            raise ValueError("filter time constant must be at least one iteration")
        self.time_constant = time_constant
        self.state: Optional[np.ndarray] = None

    def update(self, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        if self.state is None:
            self.state = np.zeros_like(value)
        self.state = self.state + (value - self.state) / self.time_constant
        return self.state.copy()


def integrate_trajectory(
    x0,
    v0,
    ens: SourceEnsemble,
    rho,
    coeffs: KinematicCoeffs,
    steps: int,
    time_constant: float = DEFAULT_FILTER_TIME_CONSTANT,
) -> Tuple[np.ndarray, np.ndarray]:
    """Step the expected motion with a lag-filtered quantum momentum.

    Returns ``(positions, propensities)`` of shape ``(steps + 1, 3)``; row ``t``
    is the state at lifetime ``t``.
    """
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    rho = np.asarray(rho, dtype=float)
    lag = QuantumMomentumFilter(time_constant)
    positions = np.zeros((steps + 1, 3))
    propensities = np.zeros((steps + 1, 3))
    positions[0] = x0
    propensities[0] = v0
    v_q = v0.copy()
    for t in range(1, steps + 1):
        try:
            shift = interference_sum(positions[t - 1], t, ens, rho, coeffs)[0]
        except SingularTimeError:
            shift = 0.0 if lag.state is None else float(lag.state)
        v_q = v0 - rho * lag.update(shift)
        propensities[t] = v_q
        positions[t] = expected_position(x0, v_q, coeffs, t)
    return positions, propensities


def ensemble_centre(ens: SourceEnsemble) -> np.ndarray:
    return ens.probabilities @ ens.positions.astype(float)


def transport_positions(
    v0, t: float, ens: SourceEnsemble, rho, coeffs: KinematicCoeffs, resolution: float = 0.01
) -> np.ndarray:
    """Expected positions reached at ``t`` from an ``(N, 3)`` array of source momenta.

    When the sources are separated along one axis and ``rho`` points along it,
    the implicit map ``x -> v0`` is tabulated across the support and inverted
    by interpolation; otherwise every particle is solved on its own.
    """
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    rho = np.asarray(rho, dtype=float)
    centre = ensemble_centre(ens)
    terms = pair_terms(ens)
    a, b, c = _checked_coeffs(coeffs, t, ens.active_dims)
    origin = a * centre + c
    if not len(terms):
        return origin[None, :] + b[None, :] * v0

    axis = _separation_axis(terms)
    if axis is None or np.count_nonzero(rho[list(ens.active_dims)]) > 1 or rho[axis] == 0.0:
        return np.array([solve_expected_position(centre, row, t, ens, rho, coeffs)[0] for row in v0])

    reach = abs(float(b[axis]))
    count = int(math.ceil(2.0 * reach / resolution)) + 1
    xs = origin[axis] + np.linspace(-reach, reach, count)
    points = np.tile(origin, (count, 1))
    points[:, axis] = xs
    v0_of_x = (xs - origin[axis]) / b[axis] + rho[axis] * interference_sum(points, t, ens, rho, coeffs)
    order = np.argsort(v0_of_x, kind="stable")

    positions = origin[None, :] + b[None, :] * v0
    positions[:, axis] = np.interp(v0[:, axis], v0_of_x[order], xs[order])
    return positions
