import math

import numpy as np
import pytest

from errors import ConfigError
from particles import (
    FieldSpec,
    PolarizationSpec,
    RngStream,
    Source,
    SourceEnsemble,
    block_ranges,
    draw_directions,
    plane_vector,
    prepare_block,
    prepare_emission,
    round_spin,
    single_source,
    spin_grid,
    validate_spin_number,
)


def test_stream_is_addressed_by_seed_replica_and_index():
    first = RngStream(7, 0, 3).generator().random(5)
    again = RngStream(7, 0, 3).generator().random(5)
    other_index = RngStream(7, 0, 4).generator().random(5)
    other_replica = RngStream(7, 1, 3).generator().random(5)

    np.testing.assert_array_equal(first, again)
    assert not np.allclose(first, other_index)
    assert not np.allclose(first, other_replica)


def test_block_ranges_cover_count_in_fixed_blocks():
    assert block_ranges(2500) == [(0, 0, 1024), (1, 1024, 2048), (2, 2048, 2500)]
    assert block_ranges(0) == []


@pytest.mark.parametrize("spin", [0.5, 1, 1.5, 2])
def test_valid_spin_numbers(spin):
    assert validate_spin_number(spin) == spin


@pytest.mark.parametrize("spin", [0, 0.3, -0.5])
def test_invalid_spin_numbers(spin):
    with pytest.raises(ConfigError) as exc:
        validate_spin_number(spin)
    assert exc.value.path == "S"


def test_spin_grid_and_rounding():
    np.testing.assert_allclose(spin_grid(1), [-1.0, 0.0, 1.0])
    np.testing.assert_allclose(spin_grid(1.5), [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0])
    assert round_spin(0.2, 1) == 0.0
    assert round_spin(0.6, 1) == 1.0
    assert round_spin(-0.6, 1) == -1.0


def test_plane_vector_starts_on_first_axis():
    np.testing.assert_allclose(plane_vector(0.0), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(plane_vector(math.pi / 2.0), [1.0, 0.0, 0.0], atol=1e-15)


def test_ensemble_validation_reports_field_path():
    ens = SourceEnsemble(sources=(Source((0, 0, 0), 0.5), Source((1, 0, 0), 0.4)))
    with pytest.raises(ConfigError) as exc:
        ens.validate()
    assert exc.value.path == "ensemble.sources"

    bad_probability = SourceEnsemble(sources=(Source((0, 0, 0), 1.5),))
    with pytest.raises(ConfigError) as exc:
        bad_probability.validate()
    assert exc.value.path == "ensemble.sources[0].probability"


def test_fixed_polarization_needs_direction():
    with pytest.raises(ConfigError) as exc:
        PolarizationSpec(mode="fixed").validate("ensemble.polarization")
    assert exc.value.path == "ensemble.polarization.direction"


def test_grid_directions_are_drawn_on_the_grid():
    spec = PolarizationSpec(mode="grid", n_mu=16, offset=0.3)
    gen = RngStream(1).generator()
    directions, index = draw_directions(spec, gen, 500)

    assert index.min() >= 0 and index.max() < 16
    np.testing.assert_allclose(directions, spec.grid_directions()[index])
    np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)


def test_stratified_source_spins_fill_every_slice_per_direction():
    ens = single_source(s0_sampling="stratified", polarization=PolarizationSpec(mode="grid", n_mu=4))
    block = prepare_block(ens, 0.5, RngStream(3).generator(), 1000)

    assert block.s0.min() >= -1.0 and block.s0.max() < 1.0
    for group in range(4):
        s0 = block.s0[block.grid_index == group]
        slices = np.floor((s0 + 1.0) / 2.0 * len(s0)).astype(int)
        assert sorted(slices.tolist()) == list(range(len(s0)))


def test_unknown_source_spin_sampling_is_rejected():
    with pytest.raises(ConfigError) as exc:
        single_source(s0_sampling="sobol").validate()
    assert exc.value.path == "ensemble.s0_sampling"


def test_sphere_directions_are_unit_vectors():
    directions, index = draw_directions(PolarizationSpec(), RngStream(2).generator(), 1000)
    np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)
    assert np.all(index == -1)
    assert np.abs(directions.mean(axis=0)).max() < 0.1


def test_higher_spin_block_satisfies_norm_constraint():
    ens = single_source(polarization=PolarizationSpec(mode="sphere"))
    block = prepare_block(ens, 1.0, RngStream(3).generator(), 2000)
    norm_sq = np.sum(block.mu**2, axis=1) + np.sum(block.tau**2, axis=1)
    np.testing.assert_allclose(norm_sq, 2.0)


def test_spin_half_block_has_unit_polarization_and_no_tau():
    ens = single_source(polarization=PolarizationSpec(mode="sphere"))
    block = prepare_block(ens, 0.5, RngStream(4).generator(), 100)
    np.testing.assert_allclose(np.linalg.norm(block.mu, axis=1), 1.0)
    assert not np.any(block.tau)
    assert np.all((block.s0 >= -1.0) & (block.s0 < 1.0))


def test_pair_emission_negates_the_second_particle():
    ens = single_source(pair_mode=True, polarization=PolarizationSpec(mode="grid", n_mu=16))
    first, second = prepare_emission(ens, 0.5, RngStream(5))

    np.testing.assert_allclose(second.mu, -first.mu)
    np.testing.assert_allclose(second.v0, -first.v0)
    assert second.s0 == -first.s0
    np.testing.assert_array_equal(second.position, first.position)
    np.testing.assert_allclose(second.rho, first.rho)
    assert second.grid_index == first.grid_index


def test_emission_is_reproducible_from_its_stream():
    ens = single_source(polarization=PolarizationSpec(mode="sphere"))
    a = prepare_emission(ens, 0.5, RngStream(9, 0, 12))
    b = prepare_emission(ens, 0.5, RngStream(9, 0, 12))
    np.testing.assert_array_equal(a.mu, b.mu)
    assert a.s0 == b.s0


def test_field_region_is_a_lifetime_interval():
    open_region = FieldSpec(region=(1, None))
    assert not open_region.contains(0)
    assert open_region.contains(1) and open_region.contains(10_000)

    closed = FieldSpec(region=(2, 5))
    assert [closed.contains(n) for n in range(7)] == [False, False, True, True, True, False, False]


def test_rotated_field_keeps_magnitudes():
    field = FieldSpec(b_m=0.04, b_f=0.02)
    rotated = field.rotated(math.pi / 2.0)
    np.testing.assert_allclose(rotated.lam, [1.0, 0.0, 0.0], atol=1e-15)
    assert rotated.b_m == 0.04 and rotated.b_f == 0.02


def test_field_validation():
    with pytest.raises(ConfigError) as exc:
        FieldSpec(direction=(0.0, 0.0, 2.0)).validate()
    assert exc.value.path == "field.direction"
    with pytest.raises(ConfigError):
        FieldSpec(density=1.5).validate()
