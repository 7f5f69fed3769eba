"""Quantum-mechanical reference results.

Gaussian-wave sources, two-component Stern-Gerlach propagation of a spinor
packet on the lattice, spin densities, Wigner rotation-matrix pmfs and the
distribution metrics used to compare simulated histograms against them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.linalg import expm
from scipy.special import comb

from errors import BinningError, ConfigError, NormDriftError
from particles import PolarizationSpec, Source, SourceEnsemble, validate_spin_number
from spin_half import SIGMA_Z

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6


def gaussian_source(
    n_s: int,
    m: Sequence[float] = (0.0, 0.0, 0.0),
    axis: int = 2,
    polarization: Optional[PolarizationSpec] = None,
) -> SourceEnsemble:
    """``n_s`` adjacent sources centred on the origin with binomial weights."""
    if n_s < 1 or n_s % 2 == 0:
        raise ConfigError("ensemble.n_s", f"Gaussian source needs an odd source count, got {n_s}")
    half = (n_s - 1) // 2
    m = np.asarray(m, dtype=float)
    sources = []
    for x in range(-half, half + 1):
        position = [0, 0, 0]
        position[axis] = x
        weight = float(comb(n_s - 1, x + half, exact=True)) / 2.0 ** (n_s - 1)
        sources.append(Source(position=tuple(position), probability=weight, phase=tuple(m * np.array(position))))
    rho = [0.0, 0.0, 0.0]
    rho[axis] = 1.0
    return SourceEnsemble(
        sources=tuple(sources),
        active_dims=(axis,),
        rho=tuple(rho),
        polarization=polarization or PolarizationSpec(),
    )


@dataclass(frozen=True)
class SpinorPacket:
    positions: np.ndarray  # source coordinates along the inhomogeneity axis
    amplitudes: np.ndarray  # (N, 2) complex

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))


def packet_from_ensemble(ens: SourceEnsemble, chi0: Sequence[complex], axis: int = 2) -> SpinorPacket:
    chi0 = np.asarray(chi0, dtype=complex)
    scalar = np.sqrt(ens.probabilities) * np.exp(1j * math.pi * ens.phases.sum(axis=1))
    return SpinorPacket(positions=ens.positions[:, axis].astype(float), amplitudes=scalar[:, None] * chi0[None, :])


@dataclass(frozen=True)
class SpinorField:
    grid: np.ndarray
    chi: np.ndarray  # (M, 2) complex
    t: float
    axis: int = 2
    raw_norm: float = 1.0


def default_grid(packet: SpinorPacket, t: float, phi: float) -> np.ndarray:
    """Periodic work grid: four reachable spans rounded up to a power of two, centred on the packet."""
    reach = t + abs(phi) * t * t / 2.0 + 1.0
    span = float(packet.positions.max() - packet.positions.min()) + 2.0 * reach
    size = 1 << math.ceil(math.log2(4.0 * span))
    lo = math.floor((packet.positions.min() + packet.positions.max()) / 2.0) - size // 2
    return np.arange(lo, lo + size, dtype=float)


def sg_propagate(
    packet: SpinorPacket, t: float, phi: float, axis: int = 2, grid: Optional[np.ndarray] = None
) -> SpinorField:
    """Unitary lattice propagation of both spinor components through the SG field.

    Free motion is applied in momentum space over the Brillouin zone, whose
    edge is the light cone ``|dx| <= t``. The up component is then displaced by
    ``+phi t^2 / 2`` and the down component by ``-phi t^2 / 2``, each taking the
    phase of its linear potential. ``grid`` is the periodic work grid: a run of
    consecutive nodes holding every source. Raises :class:`NormDriftError` when
    the norm moves by more than ``NORM_TOLERANCE``.
    """
    if abs(packet.norm - 1.0) > NORM_TOLERANCE:
        raise ValueError(f"spinor packet is not normalized (norm={packet.norm:.6g})")
    if t <= 0:
        raise ValueError("propagation time must be positive")
    grid = default_grid(packet, t, phi) if grid is None else np.asarray(grid, dtype=float)
    if len(grid) < 2 or np.any(np.diff(grid) != 1.0):
        raise ValueError("work grid must be a run of consecutive lattice nodes")
    index = np.rint(packet.positions - grid[0]).astype(np.int64)
    if np.any(index < 0) or np.any(index >= len(grid)) or not np.allclose(grid[0] + index, packet.positions):
        raise ValueError("every source must sit on a work-grid node")

    k = 2.0 * math.pi * np.fft.fftfreq(len(grid))
    chi = np.zeros((len(grid), 2), dtype=complex)
    for component, sigma in ((0, 1), (1, -1)):
        psi = np.zeros(len(grid), dtype=complex)
        np.add.at(psi, index, packet.amplitudes[:, component])
        shift = sigma * phi * t * t / 2.0
        psi = np.fft.ifft(np.fft.fft(psi) * np.exp(-1j * (k * k * t / (2.0 * math.pi) + k * shift)))
        chi[:, component] = psi * np.exp(1j * math.pi * (sigma * phi * t * grid - phi * phi * t**3 / 6.0))

    raw_norm = float(np.sum(np.abs(chi) ** 2))
    if abs(raw_norm - packet.norm) > NORM_TOLERANCE:
        raise NormDriftError(f"SG propagation changed the norm to {raw_norm:.9f} at t={t:g}")
    logger.debug("SG propagation over %d nodes to t=%g, norm %.12f", len(grid), t, raw_norm)
    return SpinorField(grid=grid, chi=chi, t=t, axis=axis, raw_norm=raw_norm)


def densities_from_spinor(field: SpinorField):
    rho = np.sum(np.abs(field.chi) ** 2, axis=1)
    s3 = np.einsum("ni,ij,nj->n", field.chi.conj(), SIGMA_Z, field.chi).real
    return rho, s3


def field_frame(field: SpinorField) -> pd.DataFrame:
    rho, s3 = densities_from_spinor(field)
    return pd.DataFrame({"x": field.grid.astype(np.int64), "density": rho, "s3": s3})


def angular_momentum_matrices(spin: float):
    """``(Jp, Jy, Jz)`` in the basis m = S, S-1, ..., -S."""
    spin = validate_spin_number(spin)
    m = spin - np.arange(int(round(2 * spin)) + 1)
    jp = np.zeros((len(m), len(m)))
    for k in range(1, len(m)):
        jp[k - 1, k] = math.sqrt(spin * (spin + 1.0) - m[k] * (m[k] + 1.0))
    jm = jp.T
    jy = (jp - jm) / 2j
    return jp, jy, np.diag(m)


def wigner_reference(spin: float, y: float, s1: float) -> np.ndarray:
    """Second-stage pmf ``|d^S_{m' m}(theta)|^2`` over grid values +1 ... -1, cos(theta) = y."""
    if abs(y) > 1.0 + 1e-12:
        raise ValueError(f"cosine {y} outside [-1, 1]")
    spin = validate_spin_number(spin)
    theta = math.acos(max(-1.0, min(1.0, y)))
    _, jy, _ = angular_momentum_matrices(spin)
    d = expm(-1j * theta * jy)
    column = int(round(spin - s1 * spin))
    pmf = np.abs(d[:, column]) ** 2
    return pmf / pmf.sum()


def _as_distribution(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    total = float(arr.sum())
    if total <= 0.0:
        raise BinningError(f"{name} has no mass")
    return arr / total


def compare_distributions(
    empirical: Union[Sequence[float], pd.Series], reference: Union[Sequence[float], pd.Series]
) -> Dict[str, float]:
    """Total variation, Pearson chi-square and max abs deviation of two binned distributions.

    Both inputs are normalized to unit mass. Bins with zero reference mass do
    not enter the chi-square.
    """
    if isinstance(empirical, pd.Series) and isinstance(reference, pd.Series):
        if not empirical.index.equals(reference.index):
            raise BinningError("empirical and reference distributions use different bins")
    if len(empirical) != len(reference):
        raise BinningError(f"bin count mismatch: {len(empirical)} vs {len(reference)}")
    counts = float(np.sum(np.asarray(empirical, dtype=float)))
    p = _as_distribution(empirical, "empirical")
    q = _as_distribution(reference, "reference")
    support = q > 0.0
    return {
        "tv": 0.5 * float(np.sum(np.abs(p - q))),
        "chi2": counts * float(np.sum((p[support] - q[support]) ** 2 / q[support])),
        "max_abs": float(np.max(np.abs(p - q))),
    }
