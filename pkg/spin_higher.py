"""Spin S > 1/2: dual polarization vectors, spin moments and grid sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from errors import InconsistentStateError, InvalidMomentsError
from particles import FieldSpec, spin_grid, validate_spin_number

logger = logging.getLogger(__name__)

MOMENT_TOLERANCE = 1e-12


@dataclass
class HigherSpinState:
    mu: np.ndarray
    tau: np.ndarray
    s0: float
    spin_number: float = 1.0
    s: float = 1.0

    def moments(self, field: FieldSpec) -> Tuple[float, float]:
        return spin_moments(self.mu, self.tau, field.lam)


def spin_moments(mu, tau, lam) -> Tuple[float, float]:
    mu = np.asarray(mu, dtype=float)
    tau = np.asarray(tau, dtype=float)
    lam = np.asarray(lam, dtype=float)
    m = float(np.dot(mu, lam))
    t = float(np.dot(tau, lam))
    v = (float(np.dot(tau, tau)) - t * t) / 2.0
    if v < -MOMENT_TOLERANCE:
        raise InconsistentStateError(f"negative spin variance {v:.3g}")
    return m, max(v, 0.0)


def spin1_pmf(m: float, v: float) -> np.ndarray:
    """``[P(+1), P(0), P(-1)]`` from the first two moments."""
    second = v + m * m
    pmf = np.array([(second + m) / 2.0, 1.0 - second, (second - m) / 2.0])
    if np.any(pmf < -MOMENT_TOLERANCE) or np.any(pmf > 1.0 + MOMENT_TOLERANCE):
        raise InvalidMomentsError(f"moments M={m:.6g}, V={v:.6g} give no valid spin-1 distribution")
    return np.clip(pmf, 0.0, 1.0)


def sample_spin_general(spin: float, s0, pmf: Sequence[float]):
    """Inverse-CDF spin draw on the (2S+1)-point grid.

    ``pmf`` is ordered from +1 down to -1, like :func:`spin1_pmf`. The source
    spin ``s0`` is uniform on [-1, 1]; a step function counts the thresholds
    it passes.
    """
    spin = validate_spin_number(spin)
    ascending = np.asarray(pmf, dtype=float)[::-1]
    if len(ascending) != int(round(2 * spin)) + 1:
        raise InvalidMomentsError(f"pmf has {len(ascending)} entries for S={spin}")
    thresholds = -1.0 + 2.0 * np.cumsum(ascending)[:-1]
    s0 = np.asarray(s0, dtype=float)
    passed = np.sum(s0[..., None] - thresholds >= 0.0, axis=-1)
    values = -1.0 + passed / spin
    if np.ndim(values) == 0:
        return float(values)
    return values


def higher_er(state: HigherSpinState, field: FieldSpec, s: float) -> HigherSpinState:
    spin = state.spin_number
    radicand = (spin + 1.0) / spin - s * s
    if radicand < 0.0:
        raise InconsistentStateError(f"spin value {s} is off the S={spin} grid")
    state.mu = s * field.lam
    state.tau = field.lam * math.sqrt(radicand)
    state.s = s
    return state


def spin1_cascade_pmf(y: float, s1: float) -> np.ndarray:
    """Second-stage ``[P(+1), P(0), P(-1)]`` for S = 1 after a first-stage spin ``s1``.

    Built from the moments at the entry of the second stage.
    """
    m1 = s1 * y
    v1 = (2.0 - s1 * s1) * (1.0 - y * y) / 2.0
    if abs(y) > 1.0 + MOMENT_TOLERANCE:
        raise InvalidMomentsError(f"cosine {y} outside [-1, 1]")
    return np.array([_cascade_term(s2, m1, v1) for s2 in (1.0, 0.0, -1.0)])


def _cascade_term(s2: float, m1: float, v1: float) -> float:
    return (1.0 - s2 * s2) + (s2 / 2.0) * m1 + (-1.0 + 1.5 * s2 * s2) * (v1 + m1 * m1)


def grid_values(spin: float) -> np.ndarray:
    return spin_grid(spin)[::-1]


def sample_spin1(s0, m, v) -> np.ndarray:
    s0 = np.asarray(s0, dtype=float)
    m = np.asarray(m, dtype=float)
    raw_moment = np.asarray(v, dtype=float) + m**2
    p_down = (raw_moment - m) / 2.0
    p_zero = 1.0 - raw_moment
    if np.any(p_down < -MOMENT_TOLERANCE) or np.any(p_zero < -MOMENT_TOLERANCE):
        raise InvalidMomentsError("moments outside the valid spin-1 region")
    lower = -1.0 + 2.0 * p_down
    upper = -1.0 + 2.0 * (p_down + p_zero)
    return -1.0 + (s0 >= lower) + (s0 >= upper)
