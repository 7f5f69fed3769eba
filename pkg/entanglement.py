"""Two-particle spin entanglement and the arrival-time model of the Bell harness."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from errors import ConfigError, ForbiddenArrivalError
from particles import FieldSpec, ParticleState, plane_vector, unit
from spin_half import sample_spin, spin_external_reset

logger = logging.getLogger(__name__)

STATIONS = ("I", "II")
CORRECTION_MODES = ("first_order", "exact", "off")


@dataclass
class EntangledPair:
    pair_id: int
    first: ParticleState
    second: ParticleState
    field_first: FieldSpec
    field_second: FieldSpec

    def spin_propensities(self, n_r: int = 2) -> Tuple[float, float]:
        return (
            float(tilde_M(np.dot(self.first.mu, self.field_first.lam), n_r)),
            float(tilde_M(np.dot(self.second.mu, self.field_second.lam), n_r)),
        )


@dataclass(frozen=True)
class ArrivalRecord:
    station: str
    pair_id: int
    spin: int
    time: float
    m0: float


@dataclass(frozen=True)
class CoincidenceRecord:
    pair_first: int
    pair_second: int
    spin_first: int
    spin_second: int
    time_first: float
    time_second: float
    gap: float


@dataclass(frozen=True)
class ArrivalModel:
    """Propagation to the detectors: momentum ``m2``, distance, field energy and window."""

    m2: float = 0.7
    distance: float = 210.0
    mu_b: float = 0.04
    n_r: int = 2
    window: Optional[float] = None
    emit_spacing: Optional[float] = None
    herald_window: Optional[float] = 1.0
    correction: str = "first_order"

    @property
    def t0(self) -> float:
        return self.distance / self.m2

    @property
    def first_order_residual(self) -> float:
        """Largest gap the first-order shift leaves between opposite spins of equal propensity."""
        extremes = np.array([-1.0, 1.0])
        up, _ = arrival_times(self, np.ones(2), extremes)
        down, _ = arrival_times(self, -np.ones(2), extremes)
        residual = np.abs(up - down - delta_T_correction(self.t0, self.mu_b, self.m2, 1, -1))
        return float(np.max(residual[np.isfinite(residual)], initial=0.0))

    @property
    def coincidence_window(self) -> float:
        if self.window is not None:
            return self.window
        window = max(1.0, 0.1 * self.t0 * self.mu_b / self.m2**2)
        if self.correction == "first_order":
            window = max(window, self.first_order_residual)
        return window

    @property
    def spacing(self) -> float:
        return self.t0 if self.emit_spacing is None else self.emit_spacing

    def validate(self, path: str = "arrival") -> "ArrivalModel":
        if self.m2 <= 0.0 or self.m2 > 1.0:
            raise ConfigError(f"{path}.m2", "propagation momentum must lie in (0, 1]")
        if self.distance <= 0.0:
            raise ConfigError(f"{path}.distance", "detector distance must be positive")
        if self.n_r not in (1, 2):
            raise ConfigError(f"{path}.n_r", "only single particles and pairs are modeled")
        if self.correction not in CORRECTION_MODES:
            raise ConfigError(f"{path}.correction", f"unknown correction mode {self.correction!r}")
        if self.window is not None and self.window <= 0.0:
            raise ConfigError(f"{path}.window", "coincidence window must be positive")
        if self.herald_window is not None and self.herald_window <= 0.0:
            raise ConfigError(f"{path}.herald_window", "herald window must be positive")
        return self


def tilde_M(m, n_r: int = 2):
    m = np.asarray(m, dtype=float)
    values = m if n_r == 1 else np.sign(m) * np.abs(m) ** n_r
    if np.ndim(values) == 0:
        return float(values)
    return values


def entangled_spin(s0, m, n_r: int = 2):
    return sample_spin(s0, tilde_M(m, n_r))


def pair_spins(s0, m_first, m_second, n_r: int = 2):
    s0 = np.asarray(s0, dtype=float)
    return entangled_spin(s0, m_first, n_r), entangled_spin(-s0, m_second, n_r)


def entangled_er(
    p: ParticleState, field: FieldSpec, mu_m: float, gen: Optional[np.random.Generator] = None
) -> ParticleState:
    return spin_external_reset(p, field, mu_m, n_r=2, gen=gen)


def expected_arrival(m2: float, mu_b: float, s, tilde_m0, distance: float):
    """Expected detection time after the field reset; raises when the reset is forbidden."""
    radicand = m2 * m2 - mu_b * (np.asarray(s, dtype=float) - np.asarray(tilde_m0, dtype=float))
    if np.any(radicand <= 0.0):
        raise ForbiddenArrivalError("field energy exceeds the propagation energy")
    times = distance / np.sqrt(radicand)
    if np.ndim(times) == 0:
        return float(times)
    return times


def arrival_times(model: ArrivalModel, spins, tilde_m0) -> Tuple[np.ndarray, np.ndarray]:
    radicand = model.m2**2 - model.mu_b * (np.asarray(spins, dtype=float) - np.asarray(tilde_m0, dtype=float))
    allowed = radicand > 0.0
    times = np.full(radicand.shape, np.nan)
    times[allowed] = model.distance / np.sqrt(radicand[allowed])
    return times, allowed


def delta_T_correction(t0: float, mu_b: float, m2: float, s_first, s_second):
    values = t0 * mu_b * (np.asarray(s_first, dtype=float) - np.asarray(s_second, dtype=float)) / (2.0 * m2 * m2)
    if np.ndim(values) == 0:
        return float(values)
    return values


def coincidence_M0(lam_first, lam_second, plane: Tuple[int, int] = (2, 0)) -> Tuple[Tuple[float, float], np.ndarray]:
    """Common spin propensities ``(+M0, -M0)`` of coincident pairs and the bisector direction."""
    lam_first = unit(lam_first)
    lam_second = unit(lam_second)
    cosine = float(np.clip(np.dot(lam_first, lam_second), -1.0, 1.0))
    m_hat = math.sqrt((1.0 - cosine) / 2.0)
    difference = lam_first - lam_second
    if float(np.linalg.norm(difference)) < 1e-12:
        angle = math.atan2(lam_first[plane[1]], lam_first[plane[0]])
        bisector = plane_vector(angle + math.pi / 2.0, plane)
    else:
        bisector = unit(difference)
    return (m_hat, -m_hat), bisector


HERALD_BOTH = 0
HERALD_MISS = 2


def herald_branch(model: ArrivalModel, spins, delays, m_hat: float) -> np.ndarray:
    """Coincidence branch whose expected delay each arrival fits.

    A member of a coincident pair reaches its detector ``T(s, +/-M0~)`` after
    emission.  Arrivals are tagged ``+1``/``-1`` for the branch they fit,
    ``HERALD_BOTH`` when both fit and ``HERALD_MISS`` when neither does.
    """
    spins = np.atleast_1d(np.asarray(spins, dtype=float))
    delays = np.atleast_1d(np.asarray(delays, dtype=float))
    if model.herald_window is None:
        return np.full(spins.shape, HERALD_BOTH, dtype=np.int64)
    target = tilde_M(m_hat, model.n_r)
    hits = []
    for sign in (1.0, -1.0):
        expected, ok = arrival_times(model, spins, np.full(spins.shape, sign * target))
        miss = np.nan_to_num(np.abs(delays - expected), nan=np.inf)
        hits.append(ok & (miss <= model.herald_window))
    plus, minus = hits
    return np.select([plus & minus, plus, minus], [HERALD_BOTH, 1, -1], HERALD_MISS).astype(np.int64)


def branches_agree(first, second) -> np.ndarray:
    first, second = np.asarray(first), np.asarray(second)
    return (first != HERALD_MISS) & (second != HERALD_MISS) & (first * second >= 0)


def joint_pmf(lam_first, lam_second) -> Dict[Tuple[int, int], float]:
    cosine = float(np.dot(unit(lam_first), unit(lam_second)))
    return {(a, b): (1.0 - a * b * cosine) / 4.0 for a in (1, -1) for b in (1, -1)}


def correlation(pmf: Dict[Tuple[int, int], float]) -> float:
    return sum(a * b * value for (a, b), value in pmf.items())


def chsh_statistic(e_ab: float, e_ab2: float, e_a2b: float, e_a2b2: float) -> float:
    return abs(e_ab - e_ab2 + e_a2b + e_a2b2)
