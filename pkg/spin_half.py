"""Spin-1/2 dynamics: precession, spin sampling, magnetic force and the spin ER."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import ForbiddenResetError
from particles import FieldSpec, ParticleState, unit
from walk import ForceField

logger = logging.getLogger(__name__)

SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)


@dataclass
class SpinHalfState:
    mu: np.ndarray
    s0: float
    s: int = 1
    mu_m: float = 1.0
    eta: float = 0.0

    def spin_propensity(self, field: FieldSpec) -> float:
        return float(np.dot(self.mu, field.lam))

    def precess(self, field: FieldSpec, steps: int = 1, renormalize: bool = False) -> "SpinHalfState":
        for _ in range(steps):
            self.mu = evolve_polarization(self.mu, field, self.eta, renormalize)
        return self

    def measure(self, field: FieldSpec) -> int:
        self.s = int(sample_spin(self.s0, self.spin_propensity(field)))
        return self.s


def evolve_polarization(mu, field: FieldSpec, eta: float, renormalize: bool = False) -> np.ndarray:
    """One explicit Euler step of the precession about the field direction."""
    mu = np.asarray(mu, dtype=float)
    lam = field.lam
    updated = np.empty(3)
    for d in range(3):
        updated[d] = mu[d] - eta * (mu[(d + 1) % 3] * lam[(d + 2) % 3] - mu[(d + 2) % 3] * lam[(d + 1) % 3])
    if renormalize:
        norm = float(np.linalg.norm(mu))
        if norm > 0.0:
            updated *= norm / float(np.linalg.norm(updated))
    return updated


def sample_spin(s0, m):
    """sign(s0 + M); an exact tie resolves to +1."""
    values = np.where(np.asarray(s0, dtype=float) + np.asarray(m, dtype=float) >= 0.0, 1, -1)
    if np.ndim(values) == 0:
        return int(values)
    return values


def magnetic_force(mu, field: FieldSpec, mu_m: float) -> np.ndarray:
    m = float(np.dot(np.asarray(mu, dtype=float), field.lam))
    return -mu_m * field.b_f * m * field.nu


def reset_scale(v, energy_jump: float) -> float:
    v = np.asarray(v, dtype=float)
    norm_sq = float(np.dot(v, v))
    if energy_jump == 0.0:
        return 1.0
    if norm_sq == 0.0:
        raise ForbiddenResetError("spin reset with zero momentum propensity")
    alpha_sq = (norm_sq - energy_jump) / norm_sq
    if alpha_sq < 0.0:
        raise ForbiddenResetError(f"energetically forbidden reset (alpha^2={alpha_sq:.6g})")
    return math.sqrt(alpha_sq)


def rescale_propensity(v, nu, alpha: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return alpha * v + (1.0 - alpha) * nu * float(np.dot(v, nu))


def _reset_propensity(p: ParticleState, field: FieldSpec, mu_m: float, m: float) -> np.ndarray:
    alpha = reset_scale(p.propensity, mu_m * field.b_m * (p.s - m))
    return rescale_propensity(p.propensity, field.nu, alpha)


def spin_external_reset(
    p: ParticleState,
    field: FieldSpec,
    mu_m: float,
    n_r: int = 1,
    gen: Optional[np.random.Generator] = None,
) -> ParticleState:
    """Align the polarization with the field at ER and pay the energy jump from the propensity.

    ``p.s`` must hold the spin sampled at capture. With ``n_r = 2`` the
    propensity jump uses the entangled spin propensity. Raises
    :class:`ForbiddenResetError` and leaves ``p`` untouched when the jump is
    not affordable. A generator redraws the source spin (the reset is a
    re-emission).
    """
    m = float(np.dot(p.mu, field.lam))
    if n_r != 1:
        m = math.copysign(abs(m) ** n_r, m)
    propensity = _reset_propensity(p, field, mu_m, m)
    p.propensity = propensity
    p.re_emit()
    p.mu = p.s * field.lam
    p.resets += 1
    if gen is not None:
        p.s0 = float(gen.uniform(-1.0, 1.0))
    return p


class MagneticForceField(ForceField):
    def __init__(self, field: FieldSpec, mu_m: float, eta: float = 0.0, n_r: int = 1) -> None:
        self.field = field
        self.mu_m = mu_m
        self.eta = eta
        self.n_r = n_r
        self.forbidden = 0
        self.resets = 0
        # In-field iterations after a particle's first reset, and spin changes among them
        self.trials = 0
        self.flips = 0

    def _propensity(self, p: ParticleState) -> float:
        m = float(np.dot(p.mu, self.field.lam))
        return math.copysign(abs(m) ** self.n_r, m) if self.n_r != 1 else m

    def capture(self, particle: ParticleState, n: int, gen: np.random.Generator) -> Optional[np.ndarray]:
        draw = gen.random()
        if not self.field.contains(particle.lifetime):
            return None
        if self.eta:
            particle.mu = evolve_polarization(particle.mu, self.field, self.eta)
        m = self._propensity(particle)
        if particle.resets:
            self.trials += 1
            self.flips += int(sample_spin(particle.s0, m) != particle.s)
        if draw >= self.field.density:
            return None
        particle.s = int(sample_spin(particle.s0, m))
        force = -self.mu_m * self.field.b_f * m * self.field.nu
        try:
            reset_scale(particle.propensity + force, self.mu_m * self.field.b_m * (particle.s - m))
        except ForbiddenResetError:
            self.forbidden += 1
            return None
        if not np.any(force):
            # Aligned already or no gradient: polarization still resets
            self.after_reset(particle, gen)
            return None
        return force

    def after_reset(self, particle: ParticleState, gen: np.random.Generator) -> None:
        spin_external_reset(particle, self.field, self.mu_m, self.n_r, gen)
        self.resets += 1


def spinor_from_polarization(mu) -> np.ndarray:
    mu = unit(mu)
    if abs(mu[2] + 1.0) < 1e-15:
        return np.array([0.0, 1.0], dtype=complex)
    root = math.sqrt(1.0 + mu[2])
    return np.array([root / math.sqrt(2.0), (mu[0] - 1j * mu[1]) / (math.sqrt(2.0) * root)], dtype=complex)


def polarization_from_spinor(chi, normalize: bool = True) -> np.ndarray:
    chi = np.asarray(chi, dtype=complex)
    norm = float(np.vdot(chi, chi).real)
    if abs(norm - 1.0) > 1e-12:
        if not normalize or norm == 0.0:
            raise ValueError(f"spinor is not normalized (|chi|^2={norm:.6g})")
        chi = chi / math.sqrt(norm)
    cross = chi[0] * np.conj(chi[1])
    return np.array([2.0 * cross.real, 2.0 * cross.imag, abs(chi[0]) ** 2 - abs(chi[1]) ** 2])


def analytic_spin_pmf(mu0, lam) -> Tuple[float, float]:
    cosine = float(np.dot(unit(mu0), unit(lam)))
    return (1.0 + cosine) / 2.0, (1.0 - cosine) / 2.0


def cascade_pmf(lam1, lam2, s1: int) -> Tuple[float, float]:
    cosine = float(np.dot(unit(lam1), unit(lam2)))
    return (1.0 + s1 * cosine) / 2.0, (1.0 - s1 * cosine) / 2.0


def evolve_polarizations(mu: np.ndarray, field: FieldSpec, eta: float, renormalize: bool = False) -> np.ndarray:
    updated = mu - eta * np.cross(mu, field.lam)
    if renormalize:
        updated *= (np.linalg.norm(mu, axis=1) / np.linalg.norm(updated, axis=1))[:, None]
    return updated


def persistence_flips(
    spins,
    field: FieldSpec,
    eta: float,
    steps: int,
    gen: np.random.Generator,
    renormalize: bool = False,
) -> Tuple[int, int]:
    """Follow particles through ``steps`` in-field iterations after their first reset.

    Array form of :meth:`MagneticForceField.capture` followed by
    :func:`spin_external_reset`: every iteration precesses the polarization
    and compares the spin it yields with the one held since the last reset.
    Captures happen with ``field.density`` and re-emit the particle with a
    fresh source spin. Returns ``(flips, trials)``.
    """
    held = np.asarray(spins, dtype=np.int64).copy()
    if not len(held) or steps == 0:
        return 0, 0
    mu = held[:, None] * field.lam[None, :]
    s0 = gen.uniform(-1.0, 1.0, size=len(held))
    flips = 0
    for _ in range(steps):
        mu = evolve_polarizations(mu, field, eta, renormalize)
        current = sample_spin(s0, mu @ field.lam)
        flips += int(np.count_nonzero(current != held))
        captured = gen.random(len(held)) < field.density
        held[captured] = current[captured]
        mu[captured] = held[captured, None] * field.lam[None, :]
        s0[captured] = gen.uniform(-1.0, 1.0, size=int(np.count_nonzero(captured)))
    return flips, len(held) * steps
