import math

import numpy as np
import pandas as pd
import pytest

from errors import BinningError, ConfigError
from oracle import (
    SpinorPacket,
    angular_momentum_matrices,
    compare_distributions,
    densities_from_spinor,
    field_frame,
    gaussian_source,
    packet_from_ensemble,
    sg_propagate,
    wigner_reference,
)

HALF = 1.0 / math.sqrt(2.0)


def test_gaussian_source_weights():
    ens = gaussian_source(9)
    assert ens.probabilities.sum() == pytest.approx(1.0)
    assert ens.probabilities[4] == pytest.approx(70.0 / 256.0)
    assert ens.positions[:, 2].tolist() == list(range(-4, 5))

    with pytest.raises(ConfigError) as exc:
        gaussian_source(8)
    assert exc.value.path == "ensemble.n_s"


def test_x_polarized_packet_splits_evenly():
    packet = packet_from_ensemble(gaussian_source(9), [HALF, HALF])
    field = sg_propagate(packet, 20.0, 0.01)
    rho, s3 = densities_from_spinor(field)
    assert rho.sum() == pytest.approx(1.0)
    assert s3.sum() == pytest.approx(0.0, abs=1e-9)
    # Spin-up mass drifts towards positive phi
    centre = np.average(field.grid, weights=(rho + s3) / 2.0)
    assert centre > 0.0


def test_up_spinor_density_is_all_spin_up():
    packet = packet_from_ensemble(gaussian_source(5), [1.0, 0.0])
    field = sg_propagate(packet, 10.0, 0.02)
    rho, s3 = densities_from_spinor(field)
    np.testing.assert_allclose(s3, rho)

    frame = field_frame(field)
    assert list(frame.columns) == ["x", "density", "s3"]
    assert len(frame) == len(field.grid)


@pytest.mark.parametrize("t", [8.0, 16.0, 32.0, 64.0])
def test_propagation_keeps_the_raw_norm(t):
    packet = packet_from_ensemble(gaussian_source(9), [HALF, HALF])
    field = sg_propagate(packet, t, 0.1 / math.pi**2)
    assert abs(field.raw_norm - 1.0) <= 1e-6
    rho, _ = densities_from_spinor(field)
    assert abs(rho.sum() - 1.0) <= 1e-6


def test_deflection_moves_the_up_component_by_half_phi_t_squared():
    packet = packet_from_ensemble(gaussian_source(5), [1.0, 0.0])
    field = sg_propagate(packet, 20.0, 0.02)
    rho, _ = densities_from_spinor(field)
    assert np.average(field.grid, weights=rho) == pytest.approx(0.02 * 20.0**2 / 2.0, abs=0.05)
    # Light cone: almost all mass within t of the deflected centre
    inside = np.abs(field.grid - 4.0) <= 20.0 + 4.0
    assert rho[inside].sum() > 0.98


def test_work_grid_must_hold_the_sources():
    packet = packet_from_ensemble(gaussian_source(5), [1.0, 0.0])
    with pytest.raises(ValueError):
        sg_propagate(packet, 5.0, 0.0, grid=np.arange(0.0, 64.0))
    with pytest.raises(ValueError):
        sg_propagate(packet, 5.0, 0.0, grid=np.arange(-32.0, 32.0, 2.0))


def test_unnormalized_packet_is_rejected():
    packet = SpinorPacket(positions=np.array([0.0]), amplitudes=np.array([[1.0, 1.0]], dtype=complex))
    with pytest.raises(ValueError):
        sg_propagate(packet, 5.0, 0.0)


@pytest.mark.parametrize("y", [1.0, 0.5, 0.0, -0.3, -1.0])
def test_spin_half_wigner_pmf(y):
    np.testing.assert_allclose(wigner_reference(0.5, y, 1.0), [(1.0 + y) / 2.0, (1.0 - y) / 2.0], atol=1e-12)
    np.testing.assert_allclose(wigner_reference(0.5, y, -1.0), [(1.0 - y) / 2.0, (1.0 + y) / 2.0], atol=1e-12)


def test_angular_momentum_matrices_spin_one():
    jp, jy, jz = angular_momentum_matrices(1)
    np.testing.assert_allclose(np.diag(jz), [1.0, 0.0, -1.0])
    np.testing.assert_allclose(jp[0, 1], math.sqrt(2.0))
    np.testing.assert_allclose(jy, jy.conj().T)


def test_compare_distributions():
    same = compare_distributions([1, 2, 3], [1, 2, 3])
    assert same["tv"] == 0.0 and same["chi2"] == 0.0

    metrics = compare_distributions([1, 0], [0.5, 0.5])
    assert metrics["tv"] == pytest.approx(0.5)
    assert metrics["max_abs"] == pytest.approx(0.5)

    with pytest.raises(BinningError):
        compare_distributions([1, 2], [1, 2, 3])
    with pytest.raises(BinningError):
        compare_distributions(pd.Series([1.0, 2.0], index=[0, 1]), pd.Series([1.0, 2.0], index=[1, 2]))
