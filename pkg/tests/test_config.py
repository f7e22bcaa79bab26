import pytest

from relaxpa.config import (
    ExperimentConfig,
    bundled_config_path,
    config_from_dict,
    load_config,
)
from relaxpa.errors import ConfigError

BUNDLED = ["lq_benchmark", "bsde_xt", "bsde_linear", "bsde_mixed", "constrained", "degenerate", "zero_contract"]


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_configs_load(name):
    cfg = load_config(bundled_config_path(name))
    assert cfg.name == name
    assert cfg.hash() == load_config(bundled_config_path(name)).hash()


def test_defaults_validate():
    cfg = config_from_dict({})
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.model.n_cells == 16 and cfg.model.n_steps == 50 and cfg.run.n_paths == 10000


def test_zero_cells_rejected_with_key():
    with pytest.raises(ConfigError, match="model.n_cells"):
        config_from_dict({"model": {"n_cells": 0}})


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="unknown key 'principal.utilty'"):
        config_from_dict({"principal": {"utilty": "x"}})


@pytest.mark.parametrize(
    "data, key",
    [
        ({"model": {"n_steps": 2.5}}, "model.n_steps"),
        ({"model": {"family": "quadratic"}}, "model.family"),
        ({"principal": {"constraints": ["nope"]}}, "principal.constraints"),
        ({"run": {"stages": ["simulate", "fly"]}}, "run.stages"),
        ({"weakform": {"pairs": [[0.5, 0.2]]}}, "weakform.pairs"),
        ({"model": {"sigma": [[1.0, 0.0]]}}, "model.sigma"),
        ({"optimizer": {"randomized": "yes"}}, "optimizer.randomized"),
    ],
)
def test_schema_errors_name_the_key(data, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(data)


def test_yaml_error_reports_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("model:\n  T: 1.0\n  n_cells: [3\n")
    with pytest.raises(ConfigError, match="line"):
        load_config(p)


def test_overrides_and_hash_change():
    a = config_from_dict({"run": {"seed": 1}})
    b = config_from_dict({"run": {"seed": 1}}, {"run.seed": 2})
    assert b.run.seed == 2 and a.hash() != b.hash()


def test_infinite_bound_and_missing_file(tmp_path):
    assert config_from_dict({"principal": {"R": ".inf"}}).principal.R == float("inf")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        bundled_config_path("no_such_config")
