from __future__ import annotations

import math

import numpy as np
import pytest
import yaml
from numpy.testing import assert_allclose, assert_array_equal

from lsqtomo.errors import SchemaVersionError, StorageError
from lsqtomo.services.storage_service import StorageService
from lsqtomo.tomography.kernels import class_kernel_sets, harmonic_kernels
from lsqtomo.tomography.lsq_core import LCurve, LCurvePoint
from lsqtomo.tomography.reconstruct import reconstruct_by_class
from lsqtomo.tomography.simulator import (
    GridCounts,
    MeasurementGeometry,
    RawEvents,
    SmearingWindows,
    TimeSampling,
    distribution_table,
    grid_counts,
    prepare_state,
    sample_events,
    time_averaged_table,
)


@pytest.fixture
def events(harmonic, harmonic_grid):
    geometry = MeasurementGeometry.on_grid(harmonic_grid, TimeSampling.midpoints(2 * math.pi, 3))
    return sample_events(distribution_table(prepare_state(0.5, 2), harmonic, geometry), 50, seed=2)


@pytest.fixture
def counts(harmonic):
    geometry = MeasurementGeometry.cells((-4.0, 4.0), 9, TimeSampling.midpoints(2 * math.pi, 3))
    table = distribution_table(prepare_state(0.5, 2), harmonic, geometry)
    return grid_counts(table, 5000, seed=2, windows=SmearingWindows(0.0, 0.2))


def test_event_dataset_roundtrip(tmp_path, events):
    truth = prepare_state(0.5, 2)
    StorageService(tmp_path).write_dataset(events, truth, extra={"seed": 2})
    dataset, stored_truth, meta = StorageService(tmp_path).read_dataset()
    assert isinstance(dataset, RawEvents)
    assert dataset.timing.matches(events.timing)
    for a, b in zip(dataset.events, events.events):
        assert_array_equal(a, b)
    assert dataset.bounds == events.bounds
    assert_array_equal(stored_truth.entries, truth.entries)
    assert meta["seed"] == 2
    assert meta["events_per_time"] == [50]


def test_grid_dataset_roundtrip(tmp_path, counts):
    StorageService(tmp_path).write_dataset(counts)
    dataset, truth, meta = StorageService(tmp_path).read_dataset()
    assert isinstance(dataset, GridCounts)
    assert truth is None
    assert dataset.geometry.matches(counts.geometry)
    assert_array_equal(dataset.counts, counts.counts)
    assert dataset.total == 5000
    assert dataset.windows == SmearingWindows(0.0, 0.2)


def test_repeated_writes_are_byte_identical(tmp_path, events):
    first, second = tmp_path / "a", tmp_path / "b"
    StorageService(first).write_dataset(events)
    StorageService(second).write_dataset(events)
    for name in ("dataset.yaml", "times.csv", "events.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_other_schema_versions_are_refused(tmp_path, events):
    StorageService(tmp_path).write_dataset(events)
    meta_path = tmp_path / "dataset.yaml"
    meta = yaml.safe_load(meta_path.read_text())
    meta["schema_version"] = 99
    meta_path.write_text(yaml.safe_dump(meta))
    with pytest.raises(SchemaVersionError):
        StorageService(tmp_path).read_dataset()


def test_missing_files_are_storage_errors(tmp_path, events):
    with pytest.raises(StorageError):
        StorageService(tmp_path / "empty").read_dataset()
    StorageService(tmp_path).write_dataset(events)
    (tmp_path / "events.csv").unlink()
    with pytest.raises(StorageError, match="missing"):
        StorageService(tmp_path).read_dataset()


def test_result_roundtrip_with_comparison(tmp_path, harmonic, harmonic_grid):
    truth = prepare_state(0.5, 2)
    geometry = MeasurementGeometry.cells((-4.0, 4.0), 41, TimeSampling.time_averaged())
    dataset = grid_counts(time_averaged_table(truth, harmonic, geometry), 20000, seed=5)
    result = reconstruct_by_class(dataset, class_kernel_sets(harmonic, 2, harmonic_grid), harmonic)
    result = result.with_bias(np.full((3, 3), 0.01 + 0.0j))

    storage = StorageService(tmp_path)
    storage.write_result(result, truth)
    meta = yaml.safe_load((tmp_path / "result.yaml").read_text())
    assert meta["max_abs_error"] == pytest.approx(np.max(np.abs(result.estimate.entries - truth.entries)))
    assert (tmp_path / "comparison.csv").exists()

    loaded = storage.read_result()
    assert_array_equal(loaded.estimate.entries, result.estimate.entries)
    assert_array_equal(loaded.std_real, result.std_real)
    assert_array_equal(loaded.covered, result.covered)
    assert_allclose(loaded.bias, result.bias)
    assert loaded.diagnostics == result.diagnostics


def test_lcurve_roundtrip(tmp_path):
    curve = LCurve([LCurvePoint(1e-3, 0.5, 4.0), LCurvePoint(1e-2, 0.6, 2.0), LCurvePoint(1e-1, 2.0, 1.9)], 1e-2)
    storage = StorageService(tmp_path)
    storage.write_lcurve(curve)
    assert storage.read_lcurve() == curve


def test_kernel_table(tmp_path, harmonic, harmonic_grid):
    kset = harmonic_kernels(harmonic, 0, 0, harmonic_grid)
    x = np.array([-1.0, 0.0, 1.0])
    StorageService(tmp_path).write_kernels([kset], x)
    rows = StorageService(tmp_path).read_kernel_table()
    assert len(rows) == 3
    assert [r["x"] for r in rows] == [-1.0, 0.0, 1.0]
    assert_allclose([r["real"] for r in rows], math.sqrt(2) * np.exp(-x ** 2), rtol=1e-9)
    assert all(math.isnan(r["time"]) for r in rows)
    meta = yaml.safe_load((tmp_path / "kernels.yaml").read_text())
    assert meta["kernel_kind"] == "spatial_per_class"


def test_event_rows_carry_their_time(tmp_path, events):
    StorageService(tmp_path).write_dataset(events)
    path = tmp_path / "events.csv"
    lines = path.read_text().splitlines()
    assert lines[0] == "time_index,time,position"
    index, time, _ = lines[1].split(",")
    assert float(time) == pytest.approx(events.timing.times[int(index)])
    fields = lines[1].split(",")
    fields[1] = "99.0"
    lines[1] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(StorageError, match="times"):
        StorageService(tmp_path).read_dataset()
