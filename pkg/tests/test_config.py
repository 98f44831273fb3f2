"""Experiment configuration: validation and round-trips."""
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gtddp.config import ExperimentConfig, from_dict, load, loads, lq_fixture_config
from gtddp.errors import ConfigError


@pytest.mark.parametrize("cfg", [ExperimentConfig(), lq_fixture_config()])
def test_round_trip_idempotent(cfg):
    text = cfg.dumps()
    again = loads(text)
    assert again.dumps() == text
    assert again.hash() == cfg.hash()


@given(st.floats(1e-6, 1e6), st.floats(1e-3, 1.0), st.integers(0, 2**64 - 1))
def test_round_trip_exact_floats(gamma, sigma, seed):
    d = lq_fixture_config().to_dict()
    d["cost"]["gamma"] = gamma
    d["sim"]["noise_sigma"] = sigma
    d["seed"] = seed
    c = loads(json.dumps(d))
    assert c.cost.gamma == gamma and c.sim.noise_sigma == sigma and c.seed == seed
    assert loads(c.dumps()).dumps() == c.dumps()


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"solver": {"dtt": 0.1}},
        {"plant": {"name": "quadcopter", "params": {"mas": 1.0}}},
        {"gp": {"init": {"sigma_s": 1, "sigma_w": 1, "m_diag": [1] * 20, "x": 1}}},
    ],
)
def test_unknown_keys_rejected(patch):
    with pytest.raises(ConfigError):
        from_dict(patch)


@pytest.mark.parametrize(
    "patch",
    [
        {"seed": -1},
        {"seed": 2**64},
        {"seed": True},
        {"plant": {"name": "submarine"}},
        {"cost": {"gamma": 0.0}},
        {"solver": {"dt": -0.01}},
        {"sim": {"n_runs": 0}},
        {"gp": {"n_max": 0}},
    ],
)
def test_invalid_values_rejected(patch):
    with pytest.raises(ConfigError):
        from_dict(patch)


def test_malformed_json_names_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "seed": 1,\n  "oops"\n}\n')
    with pytest.raises(ConfigError, match="line 4"):
        load(p)


def test_missing_file():
    with pytest.raises(ConfigError):
        load("/nonexistent/config.json")


def test_derived_sizes():
    assert ExperimentConfig().n_state == 16 and ExperimentConfig().n_control == 4
    c = lq_fixture_config()
    assert (c.n_state, c.n_control, c.cost_preset) == (2, 1, "lq_fixture")


def test_with_seed_changes_hash_only_by_seed():
    c = lq_fixture_config()
    d = c.with_seed(42)
    assert d.seed == 42 and d.hash() != c.hash()
    assert d.with_seed(0).hash() == c.hash()


def test_defaults_match_quadcopter_task():
    c = ExperimentConfig()
    assert c.cost.gamma == 0.05 and c.sim.n_runs == 100 and c.gp.n_max == 200
    assert np.isclose(c.plant.inertia_scale, 1.2) and np.isclose(c.plant.arm_scale, 1.1)
