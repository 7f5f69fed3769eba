"""Microscopic lattice walk.

Per-iteration motion rules for a single particle against a lattice that keeps
memory between emissions: momentum sampling from the propensity, boson decay,
Quantum Reset (QR) exchanges with the visited node, and External Reset (ER)
on capture of a force boson.
"""

from __future__ import annotations

import io
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import PropensityOverflowError, SnapshotError
from particles import (
    ExchangeLabel,
    IntVector3,
    ParticleBoson,
    ParticleState,
    RngLike,
    RngStream,
    SourceEnsemble,
    as_generator,
    prepare_emission,
)

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"LRML1"
SNAPSHOT_VERSION = 2
OVERFLOW_TOLERANCE = 1e-12
HISTOGRAM_COLUMNS = ["x1", "x2", "x3", "count"]


def momentum_pmf(propensity: float) -> np.ndarray:
    """Return ``[P(v=-1), P(v=0), P(v=+1)]`` for one dimension."""
    v = float(propensity)
    if abs(v) > 1.0 + OVERFLOW_TOLERANCE:
        raise PropensityOverflowError(f"momentum propensity {v:.6g} outside [-1, 1]")
    v = max(-1.0, min(1.0, v))
    energy = (1.0 + v * v) / 2.0
    up = (energy + v) / 2.0
    down = (energy - v) / 2.0
    return np.array([down, 1.0 - energy, up])


# ---------------------------------------------------------------------------
# Lattice memory
# ---------------------------------------------------------------------------


@dataclass
class LatticeBoson:
    momentum: float
    lifetime: int
    initial: float
    updated_at: int = 0

    def decay_to(self, exchanges: int) -> None:
        """Decay once per exchange the node has had since this boson was last touched."""
        steps = exchanges - self.updated_at
        if steps <= 0:
            return
        factor = 1.0 - (self.initial / max(self.lifetime, 1)) ** 2
        factor = min(1.0, max(0.0, factor))
        self.momentum *= factor**steps
        self.updated_at = exchanges


@dataclass
class NodeState:
    span_trace: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    phase_trace: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bosons: Dict[ExchangeLabel, LatticeBoson] = field(default_factory=dict)
    force_boson: Optional[np.ndarray] = None
    exchanges: int = 0


class ForceField:
    def capture(self, particle: ParticleState, n: int, gen: np.random.Generator) -> Optional[np.ndarray]:
        return None

    def after_reset(self, particle: ParticleState, gen: np.random.Generator) -> None:
        return None


class UniformForce(ForceField):
    def __init__(self, force: Sequence[float]) -> None:
        self.force = np.asarray(force, dtype=float)

    def capture(self, particle: ParticleState, n: int, gen: np.random.Generator) -> Optional[np.ndarray]:
        return self.force.copy() if np.any(self.force) else None


class Lattice:
    def __init__(self, force_field: Optional[ForceField] = None) -> None:
        self.nodes: Dict[Tuple[IntVector3, int], NodeState] = {}
        self.force_field = force_field or ForceField()
        self.clock = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, x: Sequence[int], t: int) -> NodeState:
        key = (tuple(int(c) for c in x), int(t))
        state = self.nodes.get(key)
        if state is None:
            state = NodeState()
            self.nodes[key] = state
        return state

    def capture_force(self, particle: ParticleState, gen: np.random.Generator) -> Optional[np.ndarray]:
        n = particle.emitted_at + particle.lifetime
        f = self.force_field.capture(particle, n, gen)
        if f is None or not np.any(f):
            return None
        node = self.node(particle.position, particle.lifetime)
        # Captured boson is recreated at the node
        node.force_boson = np.asarray(f, dtype=float)
        return node.force_boson.copy()


# ---------------------------------------------------------------------------
# Resets
# ---------------------------------------------------------------------------


def exchange_label(p: ParticleState, node: NodeState) -> ExchangeLabel:
    """The unordered pair of origins ``x - span`` and ``x - trace``; one boson per pair of paths."""
    here = np.asarray(p.position, dtype=np.int64)
    own = tuple(int(c) for c in here - p.span)
    other = tuple(int(c) for c in here - node.span_trace)
    return (own, other) if own <= other else (other, own)


def quantum_reset(p: ParticleState, node: NodeState) -> bool:
    """Apply a QR between ``p`` and ``node`` in place. Returns whether it fired.

    The node's boson of the same label is handed to the particle as
    ``sin(pi w) / (pi rho^2 . delta)`` and replaced by a fresh one. On a node's
    first exchange the deposit is ``delta . v_q - eps``; afterwards both spans
    are known and the deposit is ``delta . (span + trace) / 2t - eps``.
    """
    if np.array_equal(p.span, node.span_trace):
        return False
    delta = np.abs(p.span - node.span_trace)
    phase_difference = float(np.sum(p.phase - node.phase_trace))
    label = exchange_label(p, node)
    divisor = float(np.dot(p.rho**2, delta))

    previous = node.bosons.get(label)
    if previous is not None and divisor > 0.0:
        previous.decay_to(node.exchanges)
        momentum = math.sin(math.pi * previous.momentum) / (math.pi * divisor)
        p.bosons[label] = ParticleBoson(momentum=momentum, lifetime=previous.lifetime)
    else:
        p.bosons.pop(label, None)

    if node.exchanges:
        carried = (p.span + node.span_trace) / (2.0 * max(p.lifetime, 1))
    else:
        carried = p.v_q
    omega = float(np.dot(delta, carried)) - phase_difference
    node.exchanges += 1
    node.bosons[label] = LatticeBoson(
        momentum=omega, lifetime=max(p.lifetime, 1), initial=omega, updated_at=node.exchanges
    )

    p.span, node.span_trace = node.span_trace.copy(), p.span.copy()
    p.phase, node.phase_trace = node.phase_trace.copy(), p.phase.copy()
    return True


def external_reset(p: ParticleState, f: Sequence[float]) -> ParticleState:
    f = np.asarray(f, dtype=float)
    norm_sq = float(np.dot(f, f))
    if norm_sq == 0.0:
        return p
    p.v_f = p.v_f + f
    p.propensity = p.v_q + p.v_f
    p.re_emit()
    # Force momentum is summed from the reset on
    p.v_f = np.zeros(3)
    reflected = p.span - 2.0 * f * float(np.dot(p.span, f)) / norm_sq
    p.span = np.rint(reflected).astype(np.int64)
    p.phase = p.phase + 1.0
    return p


def _decay_particle_bosons(p: ParticleState) -> None:
    for boson in p.bosons.values():
        boson.momentum *= 1.0 - 1.0 / (2.0 * max(boson.lifetime, 1))


def step(
    p: ParticleState,
    lat: Lattice,
    rng: RngLike,
    active_dims: Sequence[int] = (0, 1, 2),
) -> Tuple[ParticleState, Lattice]:
    """Advance ``p`` by one iteration against ``lat`` (both mutated in place)."""
    gen = as_generator(rng)
    _decay_particle_bosons(p)
    p.v_q = p.v0 - p.rho**2 * p.boson_momentum
    p.propensity = p.v_q + p.v_f

    draws = gen.random(3)
    move = np.zeros(3, dtype=np.int64)
    for d in active_dims:
        pmf = momentum_pmf(p.propensity[d])
        if draws[d] < pmf[0]:
            move[d] = -1
        elif draws[d] >= pmf[0] + pmf[1]:
            move[d] = 1
    p.momentum = move
    p.lifetime += 1
    p.span = p.span + move
    p.position = p.position + move
    lat.clock += 1

    f = lat.capture_force(p, gen)
    if f is not None:
        lat.force_field.after_reset(external_reset(p, f), gen)

    quantum_reset(p, lat.node(p.position, p.lifetime))
    return p, lat


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WalkScenario:
    ensemble: SourceEnsemble
    steps: int
    n_train: int = 0
    active_dims: Tuple[int, ...] = (0, 1, 2)
    spin: float = 0.5
    force: Optional[Tuple[float, float, float]] = None
    replica: int = 0


class LatticeWalker:
    def __init__(
        self,
        scenario: WalkScenario,
        seed: int,
        lattice: Optional[Lattice] = None,
        force_field: Optional[ForceField] = None,
    ) -> None:
        self.scenario = scenario
        self.seed = seed
        if force_field is None and scenario.force is not None:
            force_field = UniformForce(scenario.force)
        self.lattice = lattice or Lattice(force_field)
        self.emitted = 0
        self.overflows = 0

    def _stream(self, index: int) -> RngStream:
        return RngStream(self.seed, self.scenario.replica, index)

    def _emit(self) -> Tuple[ParticleState, np.random.Generator]:
        gen = self._stream(self.emitted).generator()
        particle = prepare_emission(self.scenario.ensemble, self.scenario.spin, gen, n0=self.lattice.clock)
        if isinstance(particle, tuple):
            particle = particle[0]
        self.emitted += 1
        return particle, gen

    def walk(self, particle: ParticleState, gen: np.random.Generator, steps: int) -> Optional[ParticleState]:
        try:
            for _ in range(steps):
                step(particle, self.lattice, gen, self.scenario.active_dims)
        except PropensityOverflowError:
            self.overflows += 1
            return None
        return particle

    def train(self, count: int) -> None:
        for _ in range(count):
            particle, gen = self._emit()
            self.walk(particle, gen, self.scenario.steps)
        if count:
            logger.info("Lattice trained with %d emissions (%d nodes)", count, len(self.lattice))

    def finals(self, count: int) -> Iterator[Optional[ParticleState]]:
        """Emit and walk ``count`` particles; yields each final state, ``None`` on overflow."""
        for _ in range(count):
            particle, gen = self._emit()
            yield self.walk(particle, gen, self.scenario.steps)
        if self.overflows:
            logger.warning("%d particles left the modeled regime (propensity overflow)", self.overflows)

    def run(self, count: int) -> pd.DataFrame:
        hits: Counter = Counter()
        for particle in self.finals(count):
            if particle is not None:
                hits[tuple(int(c) for c in particle.position)] += 1
        return histogram_frame(hits)


def first_passage_times(
    before: float,
    after: np.ndarray,
    distance: int,
    entry: int,
    gen: np.random.Generator,
    max_steps: int,
) -> np.ndarray:
    """Iterations a 1D walk needs to reach ``distance``; NaN when it does not within ``max_steps``.

    Each walker moves with propensity ``before`` until it passes ``entry`` and
    with its own ``after`` from then on. Every iteration draws one uniform per
    walker, finished or not, so the stream position does not depend on outcomes.
    """
    after = np.asarray(after, dtype=float)
    if np.any(np.abs(after) > 1.0 + OVERFLOW_TOLERANCE) or abs(before) > 1.0 + OVERFLOW_TOLERANCE:
        raise PropensityOverflowError("first-passage propensity outside [-1, 1]")
    position = np.zeros(after.shape, dtype=np.int64)
    times = np.full(after.shape, np.nan)
    for n in range(1, max_steps + 1):
        active = np.isnan(times)
        if not np.any(active):
            break
        v = np.where(position >= entry, after, before)
        energy = (1.0 + v * v) / 2.0
        draws = gen.random(after.shape)
        move = (draws >= 1.0 - (energy + v) / 2.0).astype(np.int64) - (draws < (energy - v) / 2.0)
        position += move * active
        times[active & (position >= distance)] = n
    return times


def histogram_frame(hits: Dict[IntVector3, int]) -> pd.DataFrame:
    rows = [(x[0], x[1], x[2], n) for x, n in sorted(hits.items())]
    frame = pd.DataFrame(rows, columns=HISTOGRAM_COLUMNS)
    return frame.astype({c: "int64" for c in HISTOGRAM_COLUMNS})


def merge_histograms(frames: Iterable[pd.DataFrame]) -> pd.DataFrame:
    frames = [f for f in frames if not f.empty]
    if not frames:
        return histogram_frame({})
    merged = pd.concat(frames).groupby(["x1", "x2", "x3"], as_index=False)["count"].sum()
    return merged.sort_values(["x1", "x2", "x3"]).reset_index(drop=True)[HISTOGRAM_COLUMNS]


def run_walk_ensemble(
    scenario: WalkScenario, n_particles: int, seed: int, lattice: Optional[Lattice] = None
) -> pd.DataFrame:
    """Histogram of final positions after ``scenario.steps`` iterations.

    The first ``scenario.n_train`` emissions only train the lattice. Emission
    order is fixed by the stream index, so a given seed always replays the same
    histogram.
    """
    walker = LatticeWalker(scenario, seed, lattice)
    walker.train(scenario.n_train)
    return walker.run(n_particles)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


def dump_snapshot(lat: Lattice, path: str) -> None:
    keys = sorted(lat.nodes)
    coords = np.array([list(x) + [t] for x, t in keys], dtype=np.int64).reshape(-1, 4)
    spans = np.array([lat.nodes[k].span_trace for k in keys], dtype=np.int64).reshape(-1, 3)
    phases = np.array([lat.nodes[k].phase_trace for k in keys], dtype=float).reshape(-1, 3)
    exchanges = np.array([lat.nodes[k].exchanges for k in keys], dtype=np.int64)
    has_force = np.array([lat.nodes[k].force_boson is not None for k in keys], dtype=bool)
    forces = np.array(
        [lat.nodes[k].force_boson if lat.nodes[k].force_boson is not None else np.zeros(3) for k in keys],
        dtype=float,
    ).reshape(-1, 3)

    boson_index, boson_labels, boson_values = [], [], []
    for i, key in enumerate(keys):
        for label in sorted(lat.nodes[key].bosons):
            boson = lat.nodes[key].bosons[label]
            boson_index.append(i)
            boson_labels.append(list(label[0]) + list(label[1]) + [boson.lifetime, boson.updated_at])
            boson_values.append([boson.momentum, boson.initial])

    buffer = io.BytesIO()
    np.savez(
        buffer,
        clock=np.array([lat.clock], dtype=np.int64),
        coords=coords,
        spans=spans,
        phases=phases,
        exchanges=exchanges,
        has_force=has_force,
        forces=forces,
        boson_index=np.array(boson_index, dtype=np.int64),
        boson_labels=np.array(boson_labels, dtype=np.int64).reshape(-1, 8),
        boson_values=np.array(boson_values, dtype=float).reshape(-1, 2),
    )
    try:
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<H", SNAPSHOT_VERSION))
            fh.write(buffer.getvalue())
    except OSError as exc:
        raise SnapshotError(f"cannot write lattice snapshot {path}: {exc}") from exc
    logger.info("Lattice snapshot written to %s (%d nodes)", path, len(keys))


def load_snapshot(path: str, force_field: Optional[ForceField] = None) -> Lattice:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise SnapshotError(f"cannot read lattice snapshot {path}: {exc}") from exc
    header = len(SNAPSHOT_MAGIC)
    if raw[:header] != SNAPSHOT_MAGIC:
        raise SnapshotError(f"{path} is not a lattice snapshot")
    (version,) = struct.unpack("<H", raw[header : header + 2])
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"{path}: unsupported snapshot version {version}")

    data = np.load(io.BytesIO(raw[header + 2 :]), allow_pickle=False)
    lat = Lattice(force_field)
    lat.clock = int(data["clock"][0])
    keys: List[Tuple[IntVector3, int]] = []
    for i, row in enumerate(data["coords"]):
        key = (tuple(int(c) for c in row[:3]), int(row[3]))
        keys.append(key)
        lat.nodes[key] = NodeState(
            span_trace=data["spans"][i].copy(),
            phase_trace=data["phases"][i].copy(),
            force_boson=data["forces"][i].copy() if data["has_force"][i] else None,
            exchanges=int(data["exchanges"][i]),
        )
    for i, labels, values in zip(data["boson_index"], data["boson_labels"], data["boson_values"]):
        label = (tuple(int(c) for c in labels[:3]), tuple(int(c) for c in labels[3:6]))
        lat.nodes[keys[int(i)]].bosons[label] = LatticeBoson(
            momentum=float(values[0]), lifetime=int(labels[6]), initial=float(values[1]), updated_at=int(labels[7])
        )
    return lat
