from __future__ import annotations

import pytest
import yaml

from lsqtomo.tomography.oscillators import OscillatorModel, build_grid


@pytest.fixture(scope="session")
def harmonic():
    return OscillatorModel.harmonic(1.0)


@pytest.fixture(scope="session")
def morse():
    return OscillatorModel.morse(0.279)


@pytest.fixture(scope="session")
def harmonic_grid(harmonic):
    """Quadrature grid good for harmonic levels up to 10."""
    return build_grid(harmonic, 10)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("LSQTOMO_SEED", "LSQTOMO_OUTPUT_DIR", "LSQTOMO_LEDGER"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def write_config(tmp_path):
    """Write a config mapping to tmp_path/config.yaml with the ledger kept inside tmp_path."""

    def _write(body: dict, name: str = "config.yaml"):
        body = {"ledger_path": str(tmp_path / "ledger.db"), "output_dir": str(tmp_path / "out"), **body}
        path = tmp_path / name
        path.write_text(yaml.safe_dump(body))
        return path

    return _write


@pytest.fixture
def harmonic_events_config():
    """Small harmonic experiment: 3 levels, one full period, raw events."""
    return {
        "seed": 7,
        "model": {"kind": "harmonic", "frequency": 1.0},
        "state": {"alpha": 0.5, "n_max": 2},
        "evolution": {"duration": 2.0, "time_units": "pi_over_gap", "n_times": 8},
        "measurement": {"mode": "events", "events_per_time": 200},
        "reconstruction": {"kernels": "spacetime"},
        "export": {"kernel_levels": [0, 1], "plot_x_min": -4.0, "plot_x_max": 4.0, "plot_points": 81},
    }


@pytest.fixture
def harmonic_grid_config():
    """Small harmonic experiment on 25 measurement cells with Poisson counts."""
    return {
        "seed": 11,
        "model": {"kind": "harmonic", "frequency": 1.0},
        "state": {"alpha": 0.5, "n_max": 2},
        "evolution": {"duration": 2.0, "time_units": "pi_over_gap", "n_times": 8},
        "measurement": {"mode": "grid", "total_events": 100000, "n_positions": 25, "x_min": -5.0, "x_max": 5.0},
        "reconstruction": {"kernels": "spacetime", "lambdas": [1e-4, 1e-3, 1e-2, 1e-1, 1.0]},
        "export": {"kernel_levels": [0, 1], "plot_x_min": -4.0, "plot_x_max": 4.0, "plot_points": 81},
    }
