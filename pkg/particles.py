"""Shared domain types, source preparation and the RNG stream contract.

Every stochastic routine in the simulator draws only from the generator it is
handed. Generators come from :class:`RngStream`, a counter-based Philox stream
addressed by ``(seed, replica, index)``, so a draw sequence depends on its
address and never on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError

# Particles per RNG stream in the vectorized ensemble engines.
PARTICLE_BLOCK = 1024

PROBABILITY_TOLERANCE = 1e-12

Vector3 = Tuple[float, float, float]
IntVector3 = Tuple[int, int, int]
ExchangeLabel = Tuple[IntVector3, IntVector3]


class LatticeCoord(NamedTuple):
    x: IntVector3
    n: int


@dataclass(frozen=True)
class RngStream:
    seed: int
    replica: int = 0
    index: int = 0

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(
            entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(int(self.replica), int(self.index)),
        )
        return np.random.Generator(np.random.Philox(sequence))

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.replica, index)


RngLike = Union[RngStream, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return rng.generator()


def block_ranges(count: int, block: int = PARTICLE_BLOCK) -> List[Tuple[int, int, int]]:
    return [(i, start, min(start + block, count)) for i, start in enumerate(range(0, count, block))]


# ---------------------------------------------------------------------------
# Spin numbers and grids
# ---------------------------------------------------------------------------


def validate_spin_number(spin: float) -> float:
    doubled = 2.0 * float(spin)
    if doubled < 1 or abs(doubled - round(doubled)) > 1e-12:
        raise ConfigError("S", f"spin number must be a positive half-integer, got {spin}")
    return round(doubled) / 2.0


def spin_grid(spin: float) -> np.ndarray:
    spin = validate_spin_number(spin)
    count = int(round(2 * spin))
    return np.array([-1.0 + k / spin for k in range(count + 1)])


def round_spin(s0, spin: float):
    """Round source spin onto the (2S+1)-point grid: Round(S(1+s0))/S - 1."""
    values = np.floor(spin * (1.0 + np.asarray(s0, dtype=float)) + 0.5) / spin - 1.0
    if np.ndim(values) == 0:
        return float(values)
    return values


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------


def plane_vector(angle: float, plane: Tuple[int, int] = (2, 0)) -> np.ndarray:
    """Unit vector at ``angle`` in the plane spanned by axes ``plane`` (angle 0 on the first)."""
    vec = np.zeros(3)
    vec[plane[0]] = math.cos(angle)
    vec[plane[1]] = math.sin(angle)
    return vec


def unit(vec: Sequence[float]) -> np.ndarray:
    arr = np.asarray(vec, dtype=float)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ValueError("zero vector has no direction")
    return arr / norm


@dataclass(frozen=True)
class PolarizationSpec:
    mode: str = "sphere"  # sphere | grid | fixed
    direction: Optional[Vector3] = None
    n_mu: int = 16
    plane: Tuple[int, int] = (2, 0)
    offset: float = 0.0

    def validate(self, path: str = "polarization") -> "PolarizationSpec":
        if self.mode not in {"sphere", "grid", "fixed"}:
            raise ConfigError(f"{path}.mode", f"unknown polarization mode {self.mode!r}")
        if self.mode == "fixed":
            if self.direction is None or not np.any(np.asarray(self.direction, dtype=float)):
                raise ConfigError(f"{path}.direction", "fixed polarization needs a non-zero direction")
        if self.mode == "grid" and self.n_mu < 1:
            raise ConfigError(f"{path}.n_mu", "grid needs at least one direction")
        if len(set(self.plane)) != 2 or not all(0 <= a < 3 for a in self.plane):
            raise ConfigError(f"{path}.plane", f"invalid plane axes {self.plane}")
        return self

    def grid_directions(self) -> np.ndarray:
        angles = self.offset + 2.0 * math.pi * np.arange(self.n_mu) / self.n_mu
        return np.stack([plane_vector(a, self.plane) for a in angles])


def draw_directions(spec: PolarizationSpec, gen: np.random.Generator, count: int) -> Tuple[np.ndarray, np.ndarray]:
    if spec.mode == "fixed":
        direction = unit(spec.direction)
        return np.tile(direction, (count, 1)), np.full(count, -1, dtype=np.int64)
    if spec.mode == "grid":
        index = gen.integers(0, spec.n_mu, size=count)
        return spec.grid_directions()[index], index.astype(np.int64)
    raw = gen.standard_normal((count, 3))
    norms = np.linalg.norm(raw, axis=1)
    norms[norms == 0.0] = 1.0
    return raw / norms[:, None], np.full(count, -1, dtype=np.int64)


@dataclass(frozen=True)
class Source:
    position: IntVector3
    probability: float
    phase: Vector3 = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SourceEnsemble:
    sources: Tuple[Source, ...]
    pair_mode: bool = False
    v0_mode: str = "uniform"  # uniform | fixed
    v0: Vector3 = (0.0, 0.0, 0.0)
    active_dims: Tuple[int, ...] = (0, 1, 2)
    rho_mode: str = "fixed"  # fixed | uniform
    rho: Vector3 = (1.0, 0.0, 0.0)
    s0_sampling: str = "random"  # random | stratified
    polarization: PolarizationSpec = field(default_factory=PolarizationSpec)

    def validate(self, path: str = "ensemble") -> "SourceEnsemble":
        if not self.sources:
            raise ConfigError(f"{path}.sources", "ensemble needs at least one source")
        for i, src in enumerate(self.sources):
            if not 0.0 <= src.probability <= 1.0:
                raise ConfigError(f"{path}.sources[{i}].probability", "probability outside [0, 1]")
            if len(src.position) != 3 or len(src.phase) != 3:
                raise ConfigError(f"{path}.sources[{i}]", "position and phase must be 3-vectors")
        total = math.fsum(src.probability for src in self.sources)
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            raise ConfigError(f"{path}.sources", f"probabilities sum to {total!r}, not 1")
        if self.v0_mode not in {"uniform", "fixed"}:
            raise ConfigError(f"{path}.v0_mode", f"unknown v0 mode {self.v0_mode!r}")
        if self.v0_mode == "fixed" and float(np.linalg.norm(self.v0)) > 1.0 + 1e-12:
            raise ConfigError(f"{path}.v0", "source momentum must satisfy sum v0_d^2 <= 1")
        if not self.active_dims or not all(0 <= d < 3 for d in self.active_dims):
            raise ConfigError(f"{path}.active_dims", f"invalid dimensions {self.active_dims}")
        if self.rho_mode not in {"fixed", "uniform"}:
            raise ConfigError(f"{path}.rho_mode", f"unknown rho mode {self.rho_mode!r}")
        if self.rho_mode == "fixed" and abs(float(np.dot(self.rho, self.rho)) - 1.0) > 1e-9:
            raise ConfigError(f"{path}.rho", "momentum polarization must satisfy sum rho_d^2 = 1")
        if self.s0_sampling not in {"random", "stratified"}:
            raise ConfigError(f"{path}.s0_sampling", f"unknown source-spin sampling {self.s0_sampling!r}")
        self.polarization.validate(f"{path}.polarization")
        return self

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sources], dtype=np.int64)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([s.probability for s in self.sources], dtype=float)

    @property
    def phases(self) -> np.ndarray:
        return np.array([s.phase for s in self.sources], dtype=float)


def single_source(position: IntVector3 = (0, 0, 0), **kwargs) -> SourceEnsemble:
    return SourceEnsemble(sources=(Source(position=tuple(position), probability=1.0),), **kwargs)


@dataclass(frozen=True)
class FieldSpec:
    """Magnetic field of one station.

    ``region`` is the lifetime interval ``[start, stop)`` during which the
    particle is inside the field; with a constant propagation momentum this is
    the extent along the propagation axis.
    """

    direction: Vector3 = (0.0, 0.0, 1.0)
    b_m: float = 0.0
    b_f: float = 0.0
    gradient: Vector3 = (0.0, 0.0, 1.0)
    region: Tuple[int, Optional[int]] = (0, None)
    density: float = 1.0

    @property
    def lam(self) -> np.ndarray:
        return np.asarray(self.direction, dtype=float)

    @property
    def nu(self) -> np.ndarray:
        return np.asarray(self.gradient, dtype=float)

    def contains(self, lifetime: int) -> bool:
        start, stop = self.region
        return lifetime >= start and (stop is None or lifetime < stop)

    def validate(self, path: str = "field") -> "FieldSpec":
        for name, vec in (("direction", self.direction), ("gradient", self.gradient)):
            if len(vec) != 3 or abs(float(np.dot(vec, vec)) - 1.0) > 1e-9:
                raise ConfigError(f"{path}.{name}", "must be a unit 3-vector")
        if self.b_m < 0.0 or self.b_f < 0.0:
            raise ConfigError(path, "field magnitudes must be non-negative")
        if not 0.0 <= self.density <= 1.0:
            raise ConfigError(f"{path}.density", "force-boson density outside [0, 1]")
        return self

    def rotated(self, angle: float, plane: Tuple[int, int] = (2, 0)) -> "FieldSpec":
        return replace(self, direction=tuple(plane_vector(angle, plane)))


# ---------------------------------------------------------------------------
# Particles
# ---------------------------------------------------------------------------


@dataclass
class ParticleBoson:
    momentum: float
    lifetime: int


@dataclass
class ParticleState:
    source_position: np.ndarray
    position: np.ndarray
    span: np.ndarray
    v0: np.ndarray
    rho: np.ndarray
    s0: float
    mu: np.ndarray
    tau: np.ndarray
    spin_number: float = 0.5
    lifetime: int = 0
    emitted_at: int = 0
    momentum: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    propensity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_q: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_f: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phase: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0
    bosons: Dict[ExchangeLabel, ParticleBoson] = field(default_factory=dict)
    source_index: int = 0
    grid_index: int = -1
    resets: int = 0

    @property
    def boson_momentum(self) -> float:
        return float(sum(b.momentum for b in self.bosons.values()))

    def re_emit(self) -> None:
        """Take the current propensity as the new source momentum; live bosons keep acting on top of it."""
        self.v0 = self.propensity + self.rho**2 * self.boson_momentum

    @property
    def coord(self) -> LatticeCoord:
        return LatticeCoord(tuple(int(c) for c in self.position), self.emitted_at + self.lifetime)


@dataclass
class EmissionBlock:
    source_index: np.ndarray
    position: np.ndarray
    phase: np.ndarray
    s0: np.ndarray
    v0: np.ndarray
    rho: np.ndarray
    direction: np.ndarray
    grid_index: np.ndarray
    mu: np.ndarray
    tau: np.ndarray

    def __len__(self) -> int:
        return len(self.s0)


def _polarization_norms(s0: np.ndarray, spin: float) -> Tuple[np.ndarray, np.ndarray]:
    if spin == 0.5:
        return np.ones_like(s0), np.zeros_like(s0)
    rounded = round_spin(s0, spin)
    rounded = np.atleast_1d(rounded)
    tau_sq = (spin + 1.0) / spin - rounded**2
    return np.abs(rounded), np.sqrt(np.maximum(tau_sq, 0.0))


def stratify(s0: np.ndarray, groups: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """One source spin per equal slice of [-1, 1) within each group, jittered by the uniform draws ``s0``."""
    jitter = (np.asarray(s0, dtype=float) + 1.0) / 2.0
    out = np.empty_like(jitter)
    for group in np.unique(groups):
        members = np.flatnonzero(groups == group)
        slots = gen.permutation(len(members))
        out[members] = (slots + jitter[members]) / len(members)
    return 2.0 * out - 1.0


def prepare_block(ens: SourceEnsemble, spin: float, gen: np.random.Generator, count: int) -> EmissionBlock:
    spin = validate_spin_number(spin)
    index = gen.choice(len(ens.sources), size=count, p=ens.probabilities)
    s0 = gen.uniform(-1.0, 1.0, size=count)

    v0 = np.zeros((count, 3))
    if ens.v0_mode == "fixed":
        v0[:] = np.asarray(ens.v0, dtype=float)
    else:
        dims = list(ens.active_dims)
        v0[:, dims] = gen.uniform(-1.0, 1.0, size=(count, len(dims)))

    if ens.rho_mode == "fixed":
        rho = np.tile(np.asarray(ens.rho, dtype=float), (count, 1))
    else:
        rho, _ = draw_directions(PolarizationSpec(mode="sphere"), gen, count)

    direction, grid_index = draw_directions(ens.polarization, gen, count)
    if ens.s0_sampling == "stratified":
        s0 = stratify(s0, grid_index, gen)
    mu_norm, tau_norm = _polarization_norms(s0, spin)
    mu = direction * mu_norm[:, None]
    if spin == 0.5:
        tau = np.zeros((count, 3))
    else:
        sign = np.where(np.atleast_1d(round_spin(s0, spin)) < 0, -1.0, 1.0)
        mu = mu * sign[:, None]
        tau = direction * tau_norm[:, None]

    return EmissionBlock(
        source_index=index.astype(np.int64),
        position=ens.positions[index],
        phase=ens.phases[index],
        s0=s0,
        v0=v0,
        rho=rho,
        direction=direction,
        grid_index=grid_index,
        mu=mu,
        tau=tau,
    )


def _particle_from_block(block: EmissionBlock, i: int, spin: float, n0: int, negate: bool = False) -> ParticleState:
    sign = -1.0 if negate else 1.0
    position = block.position[i].copy()
    v0 = sign * block.v0[i]
    return ParticleState(
        source_position=position.copy(),
        position=position,
        span=np.zeros(3, dtype=np.int64),
        v0=v0.copy(),
        rho=block.rho[i].copy(),
        s0=sign * float(block.s0[i]),
        mu=sign * block.mu[i],
        tau=sign * block.tau[i],
        spin_number=spin,
        emitted_at=n0,
        v_q=v0.copy(),
        propensity=v0.copy(),
        phase=block.phase[i].copy(),
        source_index=int(block.source_index[i]),
        grid_index=int(block.grid_index[i]),
    )


def prepare_emission(
    ens: SourceEnsemble, spin: float, rng: RngLike, n0: int = 0
) -> Union[ParticleState, Tuple[ParticleState, ParticleState]]:
    """Emit one particle, or an anti-correlated pair when ``ens.pair_mode`` is set."""
    ens.validate()
    spin = validate_spin_number(spin)
    block = prepare_block(ens, spin, as_generator(rng), 1)
    first = _particle_from_block(block, 0, spin, n0)
    if not ens.pair_mode:
        return first
    return first, _particle_from_block(block, 0, spin, n0, negate=True)
