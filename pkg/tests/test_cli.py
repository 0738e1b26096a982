from __future__ import annotations

import pytest
import yaml

from lsqtomo.config import ExperimentConfig
from lsqtomo.database import Database
from lsqtomo.main import main


async def _ledger(tmp_path) -> Database:
    db = Database(ExperimentConfig(ledger_path=str(tmp_path / "ledger.db")))
    await db.initialize()
    return db


async def test_simulate_writes_a_dataset(tmp_path, write_config, harmonic_events_config):
    path = write_config(harmonic_events_config)
    assert await main(["simulate", "--config", str(path)]) == 0
    out = tmp_path / "out"
    for name in ("dataset.yaml", "times.csv", "events.csv", "truth.csv", "config.yaml"):
        assert (out / name).exists()
    meta = yaml.safe_load((out / "dataset.yaml").read_text())
    assert meta["mode"] == "events"
    assert meta["seed"] == 7


async def test_same_seed_gives_identical_datasets(tmp_path, write_config, harmonic_events_config):
    path = write_config(harmonic_events_config)
    assert await main(["simulate", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert await main(["simulate", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
    assert await main(["simulate", "--config", str(path), "--out", str(tmp_path / "c"), "--seed", "8"]) == 0
    for name in ("dataset.yaml", "events.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "events.csv").read_bytes() != (tmp_path / "c" / "events.csv").read_bytes()


async def test_invalid_config_exits_with_2(write_config, harmonic_events_config):
    harmonic_events_config["measurement"]["events_per_time"] = 0
    assert await main(["simulate", "--config", str(write_config(harmonic_events_config))]) == 2


async def test_missing_config_exits_with_4(tmp_path):
    assert await main(["simulate", "--config", str(tmp_path / "nope.yaml")]) == 4


async def test_quasi_singular_kernels_exit_with_3(tmp_path, write_config, harmonic_grid_config):
    harmonic_grid_config["state"]["n_max"] = 3
    harmonic_grid_config["measurement"]["n_positions"] = 2
    assert await main(["kernels", "--config", str(write_config(harmonic_grid_config))]) == 3
    db = await _ledger(tmp_path)
    try:
        (run,) = await db.get_runs()
        assert run["status"] == "failed"
        assert await db.get_metrics(run["id"]) == {}
    finally:
        await db.close()


async def test_kernels_export_with_plots(tmp_path, write_config, harmonic_events_config):
    assert await main(["kernels", "--config", str(write_config(harmonic_events_config)), "--plots"]) == 0
    out = tmp_path / "out"
    assert (out / "kernels.csv").exists()
    assert (out / "kernels.svg").exists()
    meta = yaml.safe_load((out / "kernels.yaml").read_text())
    assert meta["kernel_kind"] == "space_time"
    assert meta["max_biorthogonality_error"] < 1e-6


async def test_reconstruct_needs_a_dataset(write_config, harmonic_events_config):
    assert await main(["reconstruct", "--config", str(write_config(harmonic_events_config))]) == 2


async def test_reconstruct_rejects_a_mismatched_time_grid(tmp_path, write_config, harmonic_events_config):
    path = write_config(harmonic_events_config)
    assert await main(["simulate", "--config", str(path), "--out", str(tmp_path / "data")]) == 0
    harmonic_events_config["evolution"]["n_times"] = 16
    other = write_config(harmonic_events_config, "other.yaml")
    assert await main(["reconstruct", "--config", str(other), "--dataset", str(tmp_path / "data")]) == 2


async def test_simulate_then_reconstruct(tmp_path, write_config, harmonic_events_config):
    path = write_config(harmonic_events_config)
    assert await main(["simulate", "--config", str(path), "--out", str(tmp_path / "data")]) == 0
    assert await main(["reconstruct", "--config", str(path), "--dataset", str(tmp_path / "data"),
                       "--out", str(tmp_path / "rec")]) == 0
    meta = yaml.safe_load((tmp_path / "rec" / "result.yaml").read_text())
    assert meta["n_max"] == 2
    assert "max_abs_error" in meta


async def test_pipeline_records_metrics(tmp_path, write_config, harmonic_events_config):
    harmonic_events_config["measurement"]["events_per_time"] = 2000
    assert await main(["pipeline", "--config", str(write_config(harmonic_events_config)), "--plots"]) == 0
    out = tmp_path / "out"
    assert (out / "result.csv").exists()
    assert (out / "comparison.csv").exists()
    assert (out / "populations.svg").exists()
    assert (out / "coherences.svg").exists()
    db = await _ledger(tmp_path)
    try:
        (run,) = await db.get_runs(command="pipeline")
        assert run["status"] == "ok"
        metrics = await db.get_metrics(run["id"])
        assert metrics["trace"] == pytest.approx(1.0, abs=0.1)
        assert metrics["max_abs_error"] < 0.2
    finally:
        await db.close()


async def test_lcurve_with_plots(tmp_path, write_config, harmonic_grid_config):
    assert await main(["lcurve", "--config", str(write_config(harmonic_grid_config)), "--plots"]) == 0
    out = tmp_path / "out"
    rows = (out / "lcurve.csv").read_text().splitlines()
    assert rows[0] == "lambda,residual_norm,solution_norm"
    assert len(rows) == 6
    assert (out / "lcurve.svg").exists()


async def test_lcurve_lambda_flag_is_validated(write_config, harmonic_grid_config):
    path = write_config(harmonic_grid_config)
    assert await main(["lcurve", "--config", str(path), "--lambda", "0.1", "0.01", "1.0"]) == 2


async def test_lcurve_writes_the_tradeoff(tmp_path, write_config, harmonic_grid_config):
    assert await main(["lcurve", "--config", str(write_config(harmonic_grid_config))]) == 0
    rows = (tmp_path / "out" / "tradeoff.csv").read_text().splitlines()
    assert rows[0] == "lambda,bias_norm,std_norm"
    assert len(rows) == 6


async def test_pipeline_with_truncation_and_baseline(tmp_path, write_config, harmonic_events_config):
    harmonic_events_config["state"]["n_max"] = 4
    harmonic_events_config["reconstruction"] = {"kernels": "factorable", "classes": "diagonal", "n_max": 2}
    harmonic_events_config["export"].update(truncation=True, baseline=True)
    assert await main(["pipeline", "--config", str(write_config(harmonic_events_config))]) == 0
    out = tmp_path / "out"
    assert yaml.safe_load((out / "result.yaml").read_text())["n_max"] == 2
    assert (out / "truncation.csv").read_text().startswith("n,n_prime,real,imag")
    assert (out / "baseline.csv").read_text().startswith("n,estimate,std,baseline,baseline_std,truth")
    db = await _ledger(tmp_path)
    try:
        (run,) = await db.get_runs(command="pipeline")
        metrics = await db.get_metrics(run["id"])
        assert metrics["max_truncation_offset"] > 0
        assert metrics["baseline_std_ratio"] > 0
        assert "baseline_error_ratio" in metrics
    finally:
        await db.close()
