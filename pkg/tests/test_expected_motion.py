import math

import numpy as np
import pytest

from errors import SingularTimeError
from expected_motion import (
    KinematicCoeffs,
    QuantumMomentumFilter,
    ensemble_centre,
    expected_position,
    integrate_trajectory,
    interference_sum,
    momentum_pdf,
    position_pdf,
    quantum_propensity,
    solve_expected_position,
    transport_positions,
)
from oracle import gaussian_source


def _line(xs, axis=0):
    points = np.zeros((len(xs), 3))
    points[:, axis] = xs
    return points


def test_kinematic_coefficients():
    a, b, c = KinematicCoeffs.free().evaluate(4)
    np.testing.assert_allclose(a, 1.0)
    np.testing.assert_allclose(b, 4.0)
    np.testing.assert_allclose(c, 0.0)

    _, _, c = KinematicCoeffs.free_fall((0.0, 0.0, -0.1)).evaluate(10)
    np.testing.assert_allclose(c, [0.0, 0.0, -5.0])

    a, b, _ = KinematicCoeffs.harmonic(0.5).evaluate(math.pi)
    np.testing.assert_allclose(a, 0.0, atol=1e-15)
    np.testing.assert_allclose(b, 2.0)


def test_expected_position_free_fall():
    x = expected_position([1.0, 0.0, 0.0], [0.5, 0.0, 0.0], KinematicCoeffs.free_fall((0.2, 0.0, 0.0)), 10)
    np.testing.assert_allclose(x, [1.0 + 5.0 + 10.0, 0.0, 0.0])


def test_single_source_density_integrates_to_one(point_source):
    t = 10
    xs = np.arange(-t - 2, t + 3)
    density = position_pdf(_line(xs), t, point_source, KinematicCoeffs.free())
    assert density.sum() == pytest.approx(1.0)
    assert density[0] == 0.0 and density[-1] == 0.0
    # Support edges carry half weight
    assert density[2] == pytest.approx(density[3] / 2.0)


def test_two_source_density_shows_fringes(two_slit):
    t = 64
    xs = np.arange(-t, t + 1)
    density = position_pdf(_line(xs), t, two_slit, KinematicCoeffs.free())
    assert np.all(density >= -1e-15)
    np.testing.assert_allclose(density, density[::-1], atol=1e-15)
    # Fringe period 2t / |delta| = 32 nodes with a maximum at the centre
    assert density[t] == pytest.approx(2.0 / (2.0 * t))
    assert density[t + 16] == pytest.approx(0.0, abs=1e-12)


def test_singular_time_is_reported(two_slit):
    with pytest.raises(SingularTimeError):
        position_pdf(_line([0.0]), 2.0 * math.pi, two_slit, KinematicCoeffs.harmonic(0.5))


def test_momentum_density_of_two_sources(two_slit):
    assert momentum_pdf(np.array([0.0, 0.0, 0.0]), two_slit) == pytest.approx(1.0)
    assert momentum_pdf(np.array([0.25, 0.0, 0.0]), two_slit) == pytest.approx(0.0, abs=1e-12)


def test_gaussian_source_momentum_is_peaked_at_phase_momentum():
    ens = gaussian_source(33, m=(0.0, 0.0, 0.25), axis=2)
    vs = np.linspace(-1.0, 1.0, 4001)
    points = np.zeros((len(vs), 3))
    points[:, 2] = vs
    density = momentum_pdf(points, ens)
    dv = vs[1] - vs[0]
    total = float(density.sum() * dv)
    near = float(density[np.abs(vs - 0.25) <= 0.2].sum() * dv)
    assert total == pytest.approx(1.0, abs=0.01)
    assert near / total > 0.95


def test_quantum_propensity_is_source_momentum_without_pairs(point_source):
    v = quantum_propensity(np.array([3.0, 0.0, 0.0]), 10, point_source, (1.0, 0.0, 0.0), KinematicCoeffs.free(), v0=(0.3, 0, 0))
    np.testing.assert_allclose(v, [0.3, 0.0, 0.0])


def test_solve_inverts_the_implicit_position_equation(two_slit):
    t = 32
    x, v_q = solve_expected_position(ensemble_centre(two_slit), [0.4, 0.0, 0.0], t, two_slit, (1.0, 0.0, 0.0), KinematicCoeffs.free())
    shift = interference_sum(x, t, two_slit, (1.0, 0.0, 0.0), KinematicCoeffs.free())[0]
    assert v_q[0] + shift == pytest.approx(0.4, abs=1e-9)
    assert x[0] == pytest.approx(t * v_q[0])


def test_transport_without_pairs_is_ballistic(point_source):
    v0 = np.array([[0.5, 0.0, 0.0], [-0.25, 0.0, 0.0]])
    x = transport_positions(v0, 8, point_source, (1.0, 0.0, 0.0), KinematicCoeffs.free())
    np.testing.assert_allclose(x[:, 0], [4.0, -2.0])


def test_transport_matches_the_root_solver(two_slit):
    t = 32
    v0 = np.array([[-0.9, 0, 0], [-0.3, 0, 0], [0.05, 0, 0], [0.6, 0, 0]], dtype=float)
    fast = transport_positions(v0, t, two_slit, (1.0, 0.0, 0.0), KinematicCoeffs.free())
    centre = ensemble_centre(two_slit)
    for row, expected in zip(v0, fast):
        x, _ = solve_expected_position(centre, row, t, two_slit, (1.0, 0.0, 0.0), KinematicCoeffs.free())
        assert expected[0] == pytest.approx(x[0], abs=0.05)


def test_transported_samples_follow_the_density(two_slit):
    t = 32
    gen = np.random.default_rng(3)
    v0 = np.zeros((20000, 3))
    v0[:, 0] = gen.uniform(-1.0, 1.0, size=len(v0))
    x = np.rint(transport_positions(v0, t, two_slit, (1.0, 0.0, 0.0), KinematicCoeffs.free())[:, 0])

    xs = np.arange(-t, t + 1)
    reference = position_pdf(_line(xs), t, two_slit, KinematicCoeffs.free())
    counts = np.array([np.count_nonzero(x == v) for v in xs]) / len(x)
    assert 0.5 * np.abs(counts - reference).sum() < 0.06


def test_trajectory_shapes_and_start(two_slit):
    positions, propensities = integrate_trajectory(
        ensemble_centre(two_slit), [0.3, 0.0, 0.0], two_slit, (1.0, 0.0, 0.0), KinematicCoeffs.free(), 16, 4.0
    )
    assert positions.shape == (17, 3)
    assert propensities.shape == (17, 3)
    np.testing.assert_allclose(positions[0], ensemble_centre(two_slit))
    assert np.all(np.abs(propensities[:, 0]) <= 1.5)


def test_filter_time_constant_is_validated():
    with pytest.raises(ValueError):
        QuantumMomentumFilter(0.5)
    lag = QuantumMomentumFilter(2.0)
    assert lag.update(np.array(1.0)) == pytest.approx(0.5)
    assert lag.update(np.array(1.0)) == pytest.approx(0.75)
