from __future__ import annotations

import logging

import pytest

from lsqtomo.config import (
    ExperimentConfig,
    config_hash,
    dump_config,
    load_config,
    validate_config,
)
from lsqtomo.errors import ConfigError, SchemaVersionError, StorageError


def test_defaults_are_valid():
    config = validate_config(ExperimentConfig())
    assert config.model.kind == "morse"
    assert config.state.n_max == 12


def test_yaml_values_are_merged(write_config, harmonic_events_config):
    config = load_config(write_config(harmonic_events_config))
    assert config.seed == 7
    assert config.model.kind == "harmonic"
    assert config.state.alpha == 0.5
    # Untouched keys keep their defaults.
    assert config.measurement.n_positions == 15
    validate_config(config)


def test_unknown_keys_are_ignored_with_a_warning(write_config, caplog):
    with caplog.at_level(logging.WARNING):
        config = load_config(write_config({"state": {"bogus": 1}}))
    assert "Ignoring unknown config key state.bogus" in caplog.text
    assert not hasattr(config.state, "bogus")


def test_section_must_be_a_mapping(write_config):
    with pytest.raises(ConfigError):
        load_config(write_config({"state": 3}))


def test_missing_explicit_path_is_a_storage_error(tmp_path):
    with pytest.raises(StorageError):
        load_config(tmp_path / "missing.yaml")


def test_defaults_without_a_config_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert load_config() == ExperimentConfig()


def test_environment_overrides(write_config, monkeypatch):
    path = write_config({"seed": 1})
    monkeypatch.setenv("LSQTOMO_SEED", "99")
    monkeypatch.setenv("LSQTOMO_OUTPUT_DIR", "elsewhere")
    config = load_config(path)
    assert config.seed == 99
    assert config.output_dir == "elsewhere"
    monkeypatch.setenv("LSQTOMO_SEED", "abc")
    with pytest.raises(ConfigError):
        load_config(path)


def test_unsupported_schema_version(write_config):
    with pytest.raises(SchemaVersionError):
        load_config(write_config({"schema_version": 2}))


def test_dump_and_load_agree(tmp_path, write_config, harmonic_grid_config):
    config = load_config(write_config(harmonic_grid_config))
    path = dump_config(config, tmp_path / "nested" / "dumped.yaml")
    assert load_config(path) == config


def test_integer_fields_are_coerced():
    config = ExperimentConfig()
    config.state.n_max = 3.0
    assert validate_config(config).state.n_max == 3
    assert isinstance(config.state.n_max, int)
    config.state.n_max = 2.5
    with pytest.raises(ConfigError, match="state.n_max"):
        validate_config(config)


def _with(section: str, **values) -> ExperimentConfig:
    config = ExperimentConfig()
    for key, value in values.items():
        setattr(getattr(config, section), key, value)
    return config


@pytest.mark.parametrize("config, name", [
    (_with("measurement", events_per_time=0), "measurement.events_per_time"),
    (_with("state", n_max=13), "state.n_max"),
    (_with("evolution", duration=0.0), "evolution.duration"),
    (_with("model", kind="quartic"), "model.kind"),
    (_with("measurement", sigma_t=0.5), "measurement.mode"),
    (_with("reconstruction", lambdas=[1e-2, 1e-3, 1e-1]), "reconstruction.lambdas"),
    (_with("reconstruction", regularization="tikhonov", strength=0.0), "reconstruction.strength"),
    (_with("reconstruction", bias_replicates=1), "reconstruction.bias_replicates"),
    (_with("export", kernel_levels=[14]), "export.kernel_levels"),
])
def test_invalid_values_name_the_field(config, name):
    with pytest.raises(ConfigError, match=name.replace(".", r"\.")):
        validate_config(config)


def test_damping_needs_spacetime_kernels():
    config = _with("evolution", damping=0.1)
    config.reconstruction.kernels = "factorable"
    with pytest.raises(ConfigError, match="space-time"):
        validate_config(config)


def test_time_averaged_data_need_diagonal_factorable_kernels():
    config = _with("measurement", time_averaged=True)
    with pytest.raises(ConfigError, match="time_averaged"):
        validate_config(config)
    config.reconstruction.kernels = "factorable"
    validate_config(config)


def test_period_scheme_rejects_morse_frequencies():
    config = _with("reconstruction", kernels="factorable", scheme="period")
    with pytest.raises(ConfigError, match=r"reconstruction\.scheme.*biorthonormal"):
        validate_config(config)
    config.reconstruction.scheme = "biorthonormal"
    validate_config(config)


def test_period_scheme_needs_whole_harmonic_periods():
    config = _with("model", kind="harmonic")
    config.reconstruction.kernels = "factorable"
    config.evolution.duration = 3.0
    with pytest.raises(ConfigError, match=r"evolution\.duration"):
        validate_config(config)
    config.evolution.duration = 4.0
    validate_config(config)
    config.evolution.time_units = "absolute"
    config.evolution.duration = 4 * 3.141592653589793
    validate_config(config)


def test_reconstruction_truncation():
    config = _with("reconstruction", n_max=4.0)
    assert validate_config(config).reconstruction.n_max == 4
    config.export.kernel_levels = [5]
    with pytest.raises(ConfigError, match=r"export\.kernel_levels"):
        validate_config(config)
    config.export.kernel_levels = [2]
    config.reconstruction.n_max = 13
    with pytest.raises(ConfigError, match=r"reconstruction\.n_max"):
        validate_config(config)
    config.reconstruction.n_max = 2.5
    with pytest.raises(ConfigError, match=r"reconstruction\.n_max"):
        validate_config(config)


def test_baseline_and_truncation_exports():
    config = _with("export", truncation=True)
    with pytest.raises(ConfigError, match=r"export\.truncation"):
        validate_config(config)
    config = _with("export", baseline=True)
    validate_config(config)
    config.evolution.damping = 0.1
    with pytest.raises(ConfigError, match=r"export\.baseline"):
        validate_config(config)


def test_theme_color():
    assert ExperimentConfig().theme.color("accent") == pytest.approx((233 / 255, 69 / 255, 96 / 255))


def test_config_hash():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert config_hash(a) == config_hash(b)
    b.output_dir = "somewhere/else"
    assert config_hash(a) == config_hash(b)
    b.seed += 1
    assert config_hash(a) != config_hash(b)
