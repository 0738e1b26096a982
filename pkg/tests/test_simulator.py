from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import chisquare, norm

from lsqtomo.errors import ConfigError, GeometryMismatchError
from lsqtomo.tomography.oscillators import OscillatorModel, build_grid, eigenfrequencies
from lsqtomo.tomography.simulator import (
    DensityMatrix,
    DistributionTable,
    GridCounts,
    LiouvillianSpec,
    MeasurementGeometry,
    SmearingWindows,
    TimeSampling,
    build_propagator,
    distribution_table,
    evolve,
    grid_counts,
    position_distribution,
    prepare_state,
    sample_events,
    signed_counts,
    smear_distribution,
    time_averaged_table,
)


def test_prepare_state_amplitude_ratios():
    alpha = 0.7 - 0.4j
    state = prepare_state(alpha, 4)
    state.check_physical()
    assert state.trace == pytest.approx(1.0)
    rho = state.entries
    assert rho[1, 0] / rho[0, 0] == pytest.approx(alpha)
    assert rho[3, 0] / rho[2, 0] == pytest.approx(alpha / math.sqrt(3))


def test_prepare_state_without_displacement_is_the_ground_state():
    rho = prepare_state(0.0, 3).entries
    expected = np.zeros((4, 4))
    expected[0, 0] = 1.0
    assert_allclose(rho, expected)


def test_density_matrix_must_be_square():
    with pytest.raises(ConfigError):
        DensityMatrix(np.ones((2, 3)))


def test_check_physical_rejects_non_hermitian_state():
    with pytest.raises(ConfigError, match="Hermitian"):
        DensityMatrix(np.array([[0.5, 0.1], [0.0, 0.5]])).check_physical()


def test_truncate_and_pad():
    state = prepare_state(1.0, 3)
    assert state.truncated(1).dim == 2
    padded = state.truncated(1).padded(3)
    assert padded.dim == 4
    assert_allclose(padded.entries[2:, :], 0.0)
    with pytest.raises(ConfigError):
        state.truncated(5)


def test_unitary_evolution_phases(morse):
    state = prepare_state(0.9, 3)
    t = 1.7
    omega = eigenfrequencies(morse, 3)
    rho_t = evolve(state, morse, t).entries
    expected = state.entries * np.exp(-1j * (omega[:, None] - omega[None, :]) * t)
    assert_allclose(rho_t, expected, atol=1e-14)
    assert_allclose(np.diag(rho_t), np.diag(state.entries), atol=1e-14)


def test_unitary_propagator_agrees_with_direct_evolution(morse):
    state = prepare_state(0.9, 3)
    propagator = build_propagator(morse, 3, LiouvillianSpec.unitary(), [0.3, 1.1])
    assert_allclose(evolve(state, morse, 1.1, propagator).entries, evolve(state, morse, 1.1).entries, atol=1e-13)
    with pytest.raises(GeometryMismatchError):
        propagator.index_of(0.5)


def test_amplitude_damping_relaxes_the_first_level(harmonic):
    gamma = 0.2
    times = [0.5, 2.0, 5.0]
    propagator = build_propagator(harmonic, 3, LiouvillianSpec.amplitude_damping(gamma), times)
    assert propagator.trace_error() < 1e-12
    excited = np.zeros((4, 4))
    excited[1, 1] = 1.0
    for t in times:
        rho = evolve(DensityMatrix(excited), harmonic, t, propagator).entries
        assert rho[1, 1].real == pytest.approx(math.exp(-gamma * t), rel=1e-10)
        assert rho[0, 0].real == pytest.approx(1 - math.exp(-gamma * t), rel=1e-10)


def test_negative_damping_rate_is_rejected():
    with pytest.raises(ConfigError):
        LiouvillianSpec.amplitude_damping(-0.1)


def test_distribution_is_normalized(harmonic, harmonic_grid):
    state = prepare_state(0.8, 4)
    geometry = MeasurementGeometry.on_grid(harmonic_grid, TimeSampling.midpoints(2 * math.pi, 5))
    table = distribution_table(state, harmonic, geometry)
    assert table.values.shape == (5, len(harmonic_grid))
    assert_allclose(table.normalization(), 1.0, atol=1e-9)


def test_harmonic_half_period_mirrors_the_distribution(harmonic):
    state = prepare_state(0.6 + 0.3j, 4)
    x = np.linspace(-3, 3, 25)
    later = position_distribution(state, harmonic, x, 0.4 + math.pi)
    mirrored = position_distribution(state, harmonic, -x, 0.4)
    assert_allclose(later, mirrored, atol=1e-12)


def test_full_period_average_equals_time_averaged_table(harmonic):
    state = prepare_state(0.8, 4)
    geometry = MeasurementGeometry.cells((-4.0, 4.0), 41, TimeSampling.midpoints(2 * math.pi, 64))
    table = distribution_table(state, harmonic, geometry)
    averaged = time_averaged_table(state, harmonic, geometry)
    assert averaged.geometry.timing.stationary
    assert_allclose(table.values.mean(axis=0), averaged.values[0], atol=1e-12)


def test_time_sampling_midpoints():
    timing = TimeSampling.midpoints(2.0, 4)
    assert_allclose(timing.times, [0.25, 0.75, 1.25, 1.75])
    assert_allclose(timing.weights, 0.5)
    with pytest.raises(ConfigError):
        TimeSampling.midpoints(0.0, 4)


def test_geometry_cells_and_refinement():
    geometry = MeasurementGeometry.cells((-1.0, 1.0), 5, TimeSampling.midpoints(1.0, 3))
    assert geometry.shape == (3, 5)
    assert_allclose(geometry.position_weights, 0.5)
    finer = geometry.refined()
    assert finer.shape == (6, 9)
    assert finer.bounds == geometry.bounds
    assert not finer.matches(geometry)
    assert geometry.matches(MeasurementGeometry.cells((-1.0, 1.0), 5, TimeSampling.midpoints(1.0, 3)))


def _ground_state_table(model, grid, n_times=3):
    geometry = MeasurementGeometry.on_grid(grid, TimeSampling.midpoints(2 * math.pi, n_times))
    return distribution_table(prepare_state(0.0, 0), model, geometry)


def test_sample_events_is_reproducible(harmonic, harmonic_grid):
    table = _ground_state_table(harmonic, harmonic_grid)
    a = sample_events(table, 500, seed=5)
    b = sample_events(table, 500, seed=5)
    c = sample_events(table, 500, seed=6)
    assert all(np.array_equal(x, y) for x, y in zip(a.events, b.events))
    assert not np.array_equal(a.events[0], c.events[0])
    assert list(a.totals) == [500, 500, 500]
    lo, hi = table.geometry.bounds
    assert all(e.min() >= lo and e.max() <= hi for e in a.events)


def test_sampled_ground_state_moments(harmonic, harmonic_grid):
    events = sample_events(_ground_state_table(harmonic, harmonic_grid, 1), 20000, seed=1).events[0]
    assert abs(events.mean()) < 0.03
    assert events.var() == pytest.approx(0.5, abs=0.03)


def test_sample_events_rejects_unnormalized_table(harmonic, harmonic_grid):
    with pytest.raises(ConfigError, match="normalized"):
        sample_events(_ground_state_table(harmonic, harmonic_grid).scaled(2.0), 10, seed=0)


def test_grid_counts_total(harmonic):
    geometry = MeasurementGeometry.cells((-5.0, 5.0), 41, TimeSampling.midpoints(2 * math.pi, 4))
    table = distribution_table(prepare_state(0.5, 2), harmonic, geometry)
    total = 100_000
    counts = grid_counts(table, total, seed=3)
    assert isinstance(counts, GridCounts)
    assert abs(int(counts.counts.sum()) - total) < 5 * math.sqrt(total)
    again = grid_counts(table, total, seed=3)
    assert np.array_equal(counts.counts, again.counts)


def test_grid_count_estimate_converges(harmonic):
    geometry = MeasurementGeometry.cells((-5.0, 5.0), 41, TimeSampling.midpoints(2 * math.pi, 4))
    table = distribution_table(prepare_state(0.5, 2), harmonic, geometry)
    estimate = grid_counts(table, 10 ** 9, seed=4).estimate()
    assert_allclose(estimate.values, table.values, atol=2e-3)


def test_counts_must_match_geometry():
    geometry = MeasurementGeometry.cells((-1.0, 1.0), 3, TimeSampling.midpoints(1.0, 2))
    with pytest.raises(GeometryMismatchError):
        GridCounts(geometry, np.zeros((3, 3)), 10)


def test_spatial_smearing_of_the_ground_state(harmonic):
    sigma = 0.3
    windows = SmearingWindows(sigma_x=sigma)
    timing = TimeSampling.midpoints(1.0, 2)
    pad = windows.position_padding
    grid = build_grid(harmonic, 0, cover=(-4.0 - pad, 4.0 + pad))
    source = distribution_table(prepare_state(0.0, 0), harmonic, MeasurementGeometry.on_grid(grid, timing))
    target = MeasurementGeometry.cells((-4.0, 4.0), 17, timing)
    smeared = smear_distribution(source, windows, target)
    expected = norm.pdf(target.positions, scale=math.sqrt(0.5 + sigma ** 2))
    assert_allclose(smeared.values, np.tile(expected, (2, 1)), atol=1e-7)


def test_smearing_needs_padded_input(harmonic):
    timing = TimeSampling.midpoints(1.0, 2)
    grid = build_grid(harmonic, 0)
    source = distribution_table(prepare_state(0.0, 0), harmonic, MeasurementGeometry.on_grid(grid, timing))
    target = MeasurementGeometry.cells((-4.0, 4.0), 17, timing)
    with pytest.raises(ConfigError, match="pad"):
        smear_distribution(source, SmearingWindows(sigma_x=1.0), target)


def test_negative_window_width_is_rejected():
    with pytest.raises(ConfigError):
        SmearingWindows(sigma_t=-1.0)
    assert SmearingWindows().is_trivial


def test_sampled_events_follow_the_distribution(harmonic, harmonic_grid):
    total = 100_000
    events = sample_events(_ground_state_table(harmonic, harmonic_grid, 1), total, seed=8).events[0]
    edges = norm.ppf(np.linspace(0, 1, 21)[1:-1], scale=math.sqrt(0.5))
    observed = np.bincount(np.searchsorted(edges, events), minlength=20)
    assert chisquare(observed, np.full(20, total / 20)).pvalue > 1e-3


def test_signed_counts_keep_the_sign_of_the_mean():
    geometry = MeasurementGeometry.cells((-1.0, 1.0), 5, TimeSampling.midpoints(1.0, 2))
    values = np.array([[1.0, -1.0, 0.5, 0.0, -0.5], [0.2, 0.2, -2.0, 1.0, 0.0]])
    table = DistributionTable(geometry, values)
    counts = signed_counts(table, 10 ** 6, seed=4)
    assert counts.signed
    mean = counts.cell_exposure * values
    assert_array_equal(np.sign(counts.counts), np.sign(values))
    assert np.all(np.abs(counts.counts - mean) <= 5 * np.sqrt(np.abs(mean)))
    assert np.array_equal(counts.counts, signed_counts(table, 10 ** 6, seed=4).counts)
    with pytest.raises(ConfigError, match="nonnegative"):
        GridCounts(geometry, counts.counts, 10 ** 6)
    with pytest.raises(ConfigError):
        signed_counts(table, 0, seed=4)


def test_time_smearing_damps_the_oscillating_part(harmonic):
    sigma = 0.3
    windows = SmearingWindows(sigma_t=sigma)
    state = prepare_state(0.8, 1)
    target = MeasurementGeometry.cells((-4.0, 4.0), 17, TimeSampling.midpoints(2 * math.pi, 6))
    pad = windows.time_padding
    source_timing = TimeSampling.gauss_legendre(-pad, 2 * math.pi + pad, 40)
    source = distribution_table(state, harmonic, MeasurementGeometry(target.positions, target.position_weights,
                                                                     source_timing))
    smeared = smear_distribution(source, windows, target)
    static = time_averaged_table(state, harmonic, target).values
    exact = distribution_table(state, harmonic, target).values
    expected = static + math.exp(-0.5 * sigma ** 2) * (exact - static)
    assert_allclose(smeared.values, expected, atol=1e-8)


@pytest.mark.parametrize("model", [OscillatorModel.harmonic(1.0), OscillatorModel.morse(0.279)])
def test_damped_coherence_decays_at_half_the_rate(model):
    gamma = 0.2
    times = [0.5, 2.0, 5.0]
    omega = eigenfrequencies(model, 1)
    gap = omega[1] - omega[0]
    # Levels 2 and 3 start empty, so nothing feeds rho_01.
    state = prepare_state(0.5, 1).padded(3)
    propagator = build_propagator(model, 3, LiouvillianSpec.amplitude_damping(gamma), times)
    for t in times:
        rho = evolve(state, model, t, propagator).entries
        expected = state.entries[0, 1] * np.exp(-0.5 * gamma * t + 1j * gap * t)
        assert rho[0, 1] == pytest.approx(expected, rel=1e-10)
