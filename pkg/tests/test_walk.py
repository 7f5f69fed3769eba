import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from errors import PropensityOverflowError, SnapshotError
from particles import FieldSpec, ParticleBoson, RngStream, prepare_emission
from spin_half import MagneticForceField
from walk import (
    Lattice,
    LatticeBoson,
    LatticeWalker,
    NodeState,
    UniformForce,
    WalkScenario,
    dump_snapshot,
    exchange_label,
    external_reset,
    first_passage_times,
    histogram_frame,
    load_snapshot,
    merge_histograms,
    momentum_pmf,
    quantum_reset,
    run_walk_ensemble,
    step,
)


@pytest.mark.parametrize(
    "v, expected",
    [(0.0, [0.25, 0.5, 0.25]), (1.0, [0.0, 0.0, 1.0]), (-1.0, [1.0, 0.0, 0.0])],
)
def test_momentum_pmf_edges(v, expected):
    np.testing.assert_allclose(momentum_pmf(v), expected)


@pytest.mark.parametrize("v", [-0.7, -0.2, 0.3, 0.9])
def test_momentum_pmf_mean_is_the_propensity(v):
    pmf = momentum_pmf(v)
    assert pmf.sum() == pytest.approx(1.0)
    assert pmf[2] - pmf[0] == pytest.approx(v)
    assert pmf[2] + pmf[0] == pytest.approx((1.0 + v * v) / 2.0)


def test_momentum_pmf_overflow():
    with pytest.raises(PropensityOverflowError):
        momentum_pmf(1.5)


def _particle(point_source, seed=1):
    return prepare_emission(point_source, 0.5, RngStream(seed))


def test_quantum_reset_needs_a_different_trace(point_source):
    p = _particle(point_source)
    node = NodeState()
    assert quantum_reset(p, node) is False

    p.span = np.array([3, 0, 0])
    p.lifetime = 3
    assert quantum_reset(p, node) is True
    np.testing.assert_array_equal(p.span, [0, 0, 0])
    np.testing.assert_array_equal(node.span_trace, [3, 0, 0])
    assert len(node.bosons) == 1


def test_first_exchange_deposits_quantum_momentum_without_a_boson(point_source):
    p = _particle(point_source)
    p.span = np.array([1, 0, 0])
    p.lifetime = 1
    p.v_q = np.array([0.2, 0.0, 0.0])
    node = NodeState()
    assert quantum_reset(p, node) is True
    (boson,) = node.bosons.values()
    assert boson.momentum == pytest.approx(0.2)
    assert p.bosons == {}
    assert p.boson_momentum == 0.0
    assert node.exchanges == 1


def test_quantum_reset_hands_back_previous_boson(point_source):
    node = NodeState()
    first = _particle(point_source)
    first.span = np.array([2, 0, 0])
    first.lifetime = 2
    first.v_q = np.array([0.25, 0.0, 0.0])
    quantum_reset(first, node)

    # A later particle carrying the same span meets the same trace again
    node.span_trace = np.zeros(3, dtype=np.int64)
    second = _particle(point_source, seed=2)
    second.span = np.array([2, 0, 0])
    second.lifetime = 2
    assert quantum_reset(second, node) is True
    (label,) = second.bosons
    # omega = 2 * 0.25 handed back as sin(pi omega) / (pi rho^2 . delta)
    assert second.bosons[label].momentum == pytest.approx(1.0 / (2.0 * math.pi))
    # Later deposits carry the mean span of both paths: 2 * (2 + 0) / (2 * 2)
    assert node.bosons[label].momentum == pytest.approx(1.0)
    assert node.exchanges == 2


def test_quantum_reset_drops_a_boson_the_node_no_longer_holds(point_source):
    p = _particle(point_source)
    p.span = np.array([3, 0, 0])
    p.lifetime = 3
    node = NodeState()
    label = exchange_label(p, node)
    p.bosons[label] = ParticleBoson(momentum=0.1, lifetime=3)
    quantum_reset(p, node)
    assert label not in p.bosons


def test_quantum_reset_twice_restores_span_and_phase(point_source):
    p = _particle(point_source)
    p.span = np.array([2, -1, 0])
    p.phase = np.array([1.0, 1.0, 1.0])
    p.lifetime = 4
    node = NodeState(span_trace=np.array([0, 1, 0]), phase_trace=np.array([0.5, 0.5, 0.5]))
    span, phase = p.span.copy(), p.phase.copy()

    assert quantum_reset(p, node) and quantum_reset(p, node)
    np.testing.assert_array_equal(p.span, span)
    np.testing.assert_array_equal(p.phase, phase)
    np.testing.assert_array_equal(node.span_trace, [0, 1, 0])


def test_lattice_boson_decays_once_per_node_exchange():
    boson = LatticeBoson(momentum=0.5, lifetime=2, initial=0.5, updated_at=1)
    boson.decay_to(3)
    assert boson.momentum == pytest.approx(0.5 * (1.0 - 0.25**2) ** 2)
    boson.decay_to(3)
    assert boson.momentum == pytest.approx(0.5 * (1.0 - 0.25**2) ** 2)


def test_particle_boson_with_unit_lifetime_halves_each_step(point_source):
    p = _particle(replace(point_source, v0_mode="fixed", v0=(0.3, 0.0, 0.0)))
    label = ((9, 0, 0), (9, 0, 0))
    p.bosons[label] = ParticleBoson(momentum=0.8, lifetime=1)
    lat = Lattice()
    gen = RngStream(3).generator()

    step(p, lat, gen, active_dims=(0,))
    assert p.bosons[label].momentum == pytest.approx(0.4)
    assert p.v_q[0] == pytest.approx(0.3 - 0.4)
    step(p, lat, gen, active_dims=(0,))
    assert p.bosons[label].momentum == pytest.approx(0.2)


def test_external_reset_reflects_span_and_restarts_force_sum(point_source):
    p = _particle(point_source)
    p.span = np.array([2, 1, 0])
    p.v_q = np.array([0.1, 0.0, 0.0])
    external_reset(p, [0.05, 0.0, 0.0])

    np.testing.assert_array_equal(p.span, [-2, 1, 0])
    np.testing.assert_allclose(p.propensity, [0.15, 0.0, 0.0])
    np.testing.assert_allclose(p.v0, p.propensity)
    assert not np.any(p.v_f)
    np.testing.assert_allclose(p.phase, 1.0)


def test_external_reset_keeps_live_bosons_acting(point_source):
    p = _particle(replace(point_source, v0_mode="fixed", v0=(0.2, 0.0, 0.0)))
    p.bosons[((0, 0, 0), (4, 0, 0))] = ParticleBoson(momentum=0.1, lifetime=50)
    p.v_q = p.v0 - p.rho**2 * p.boson_momentum
    p.propensity = p.v_q.copy()
    external_reset(p, [0.05, 0.0, 0.0])

    np.testing.assert_allclose(p.propensity, [0.15, 0.0, 0.0])
    # The boson sum is not folded into the new source momentum
    np.testing.assert_allclose(p.v0, [0.25, 0.0, 0.0])
    np.testing.assert_allclose(p.v0 - p.rho**2 * p.boson_momentum, p.propensity)


def test_zero_force_reset_is_a_no_op(point_source):
    p = _particle(point_source)
    span = p.span.copy()
    external_reset(p, [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(p.span, span)


def test_step_moves_only_active_dims(point_source):
    p = _particle(point_source)
    lat = Lattice()
    gen = RngStream(3).generator()
    for _ in range(20):
        step(p, lat, gen, active_dims=(0,))
    assert p.lifetime == 20
    assert p.position[1] == 0 and p.position[2] == 0
    assert lat.clock == 20


def _walk_alone(ens, steps, count, force_field=None, seed=11):
    # Each particle on its own empty lattice: no node is revisited, so no boson is ever handed back
    finals = []
    for index in range(count):
        gen = RngStream(seed, 0, index).generator()
        p = prepare_emission(ens, 0.5, gen)
        lat = Lattice(force_field)
        for _ in range(steps):
            step(p, lat, gen, ens.active_dims)
        finals.append(p)
    return finals


def test_free_drift_follows_the_source_momentum(point_source):
    ens = replace(point_source, v0_mode="fixed", v0=(0.3, 0.0, 0.0))
    finals = _walk_alone(ens, 100, 1000)
    drift = np.mean([p.position[0] for p in finals]) / 100.0
    assert drift == pytest.approx(0.3, abs=0.02)


def test_uniform_force_accumulates_into_free_fall(point_source):
    ens = replace(point_source, v0_mode="fixed", v0=(0.0, 0.0, 0.0))
    finals = _walk_alone(ens, 64, 500, UniformForce((-0.01, 0.0, 0.0)))
    # Step n moves with (n - 1) f: sum is f t (t - 1) / 2
    assert np.mean([p.position[0] for p in finals]) == pytest.approx(-0.01 * 64 * 63 / 2.0, abs=1.0)


def test_magnetic_force_splits_the_spins_in_opposite_directions(point_source):
    ens = replace(point_source, v0_mode="fixed", v0=(0.0, 0.0, 0.0))
    field = FieldSpec(direction=(1.0, 0.0, 0.0), gradient=(1.0, 0.0, 0.0), b_f=0.01)
    force_field = MagneticForceField(field, 1.0)
    finals = _walk_alone(ens, 64, 600, force_field)
    up = [p.position[0] for p in finals if p.s == 1]
    down = [p.position[0] for p in finals if p.s == -1]

    # First capture only aligns (M = 0); from step 2 on spin s moves with -(n - 2) b_f s
    assert np.mean(up) == pytest.approx(-0.01 * 63 * 62 / 2.0, abs=1.5)
    assert np.mean(down) == pytest.approx(0.01 * 63 * 62 / 2.0, abs=1.5)
    assert force_field.trials == 600 * 63
    assert force_field.flips == 0


def test_first_passage_with_unit_propensity_is_ballistic():
    times = first_passage_times(1.0, np.ones(5), distance=10, entry=3, gen=RngStream(1).generator(), max_steps=50)
    np.testing.assert_array_equal(times, np.full(5, 10.0))


def test_first_passage_marks_walkers_that_do_not_arrive():
    after = np.array([1.0, 0.0])
    times = first_passage_times(1.0, after, distance=30, entry=5, gen=RngStream(2).generator(), max_steps=40)
    assert times[0] == 30.0
    assert np.isnan(times[1])


def test_first_passage_overflow():
    with pytest.raises(PropensityOverflowError):
        first_passage_times(0.7, np.array([1.2]), distance=5, entry=0, gen=RngStream(1).generator(), max_steps=10)


def test_walk_ensemble_is_deterministic(point_source):
    scenario = WalkScenario(point_source, steps=12, n_train=20, active_dims=(0,))
    first = run_walk_ensemble(scenario, 60, seed=5)
    again = run_walk_ensemble(scenario, 60, seed=5)
    other = run_walk_ensemble(scenario, 60, seed=6)

    pd.testing.assert_frame_equal(first, again)
    assert 0 < int(first["count"].sum()) <= 60
    assert not first.equals(other)


def test_walker_finals_yield_every_particle(two_slit):
    walker = LatticeWalker(WalkScenario(two_slit, steps=8, active_dims=(0,)), seed=2)
    finals = list(walker.finals(25))
    assert len(finals) == 25
    assert walker.emitted == 25
    assert all(p is None or p.lifetime == 8 for p in finals)


def test_merge_histograms_is_order_independent():
    a = histogram_frame({(0, 0, 0): 2, (1, 0, 0): 1})
    b = histogram_frame({(1, 0, 0): 4, (-1, 0, 0): 3})
    pd.testing.assert_frame_equal(merge_histograms([a, b]), merge_histograms([b, a]))
    assert merge_histograms([a, b])["count"].tolist() == [3, 2, 5]


def test_snapshot_restores_lattice_memory(tmp_path, two_slit):
    walker = LatticeWalker(WalkScenario(two_slit, steps=10, active_dims=(0,)), seed=4)
    walker.train(30)
    path = str(tmp_path / "lattice.snap")
    dump_snapshot(walker.lattice, path)

    restored = load_snapshot(path)
    assert restored.clock == walker.lattice.clock
    assert len(restored) == len(walker.lattice)
    key = sorted(walker.lattice.nodes)[0]
    np.testing.assert_array_equal(restored.nodes[key].span_trace, walker.lattice.nodes[key].span_trace)
    assert sorted(restored.nodes[key].bosons) == sorted(walker.lattice.nodes[key].bosons)
    assert all(restored.nodes[k].exchanges == node.exchanges for k, node in walker.lattice.nodes.items())
    assert any(node.exchanges for node in restored.nodes.values())


def test_snapshot_rejects_foreign_files(tmp_path):
    path = tmp_path / "bogus.snap"
    path.write_bytes(b"not a snapshot")
    with pytest.raises(SnapshotError):
        load_snapshot(str(path))


def test_uniform_force_capture():
    lat = Lattice(UniformForce((0.0, 0.0, 0.0)))
    assert lat.force_field.capture(None, 0, RngStream(1).generator()) is None
