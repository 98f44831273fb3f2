"""Artifact files: exact round-trips, headers and parse errors."""
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gtddp import io
from gtddp.config import lq_fixture_config
from gtddp.errors import ParseError
from gtddp.gp import GpDataset, GpHyperparams
from gtddp.pipeline import build_plant, solve_game

floats = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(arrays(float, (5, 4), elements=floats), arrays(float, (5, 2), elements=floats))
def test_dataset_round_trip_is_exact(X, Y):
    import tempfile, pathlib

    data = GpDataset(X, Y, np.arange(5) * 0.1)
    with tempfile.TemporaryDirectory() as d:
        p = io.write_dataset(pathlib.Path(d) / "data.csv", data)
        back = io.read_dataset(p)
        assert back.inputs.tobytes() == data.inputs.tobytes()
        assert back.targets.tobytes() == data.targets.tobytes()
        assert back.times.tobytes() == data.times.tobytes()


def test_dataset_header(tmp_path):
    data = GpDataset(np.zeros((2, 3)), np.zeros((2, 2)))
    p = io.write_dataset(tmp_path / "d.csv", data)
    assert p.read_text().splitlines()[0] == "t,x0,x1,u0,dx0,dx1"


@pytest.mark.parametrize(
    "body,line",
    [
        ("t,x0,u0,dx0\n0,1,2,3\n0,1,zz,3\n", 3),
        ("t,x0,u0,dx0\n0,1,2,3\n0,1,2\n", 3),
        ("t,x0,u0,dx0\n0,1,2,nan\n", 2),
        ("t,x0,dx0,u0\n0,1,2,3\n", 1),
    ],
)
def test_malformed_dataset_names_line(tmp_path, body, line):
    p = tmp_path / "d.csv"
    p.write_text(body)
    with pytest.raises(ParseError) as exc:
        io.read_dataset(p)
    assert exc.value.line == line
    assert f":{line}:" in str(exc.value)


def test_model_round_trip_and_hash_check(tmp_path):
    data = GpDataset(np.random.default_rng(0).normal(size=(4, 3)), np.ones((4, 2)))
    dp = io.write_dataset(tmp_path / "d.csv", data)
    hyper = [GpHyperparams(0.1 + 1 / 3, 1e-7, [1.0, 2.0, 3.0]), GpHyperparams(2.0, 0.5, [0.1, 0.2, 0.3])]
    mp = io.write_model(tmp_path / "m.json", hyper, dp, [1.5, -2.0])
    back_data, back_hyper = io.read_model(mp)
    assert back_hyper[0].sigma_s == hyper[0].sigma_s
    np.testing.assert_array_equal(back_hyper[1].m_diag, hyper[1].m_diag)
    assert back_data.inputs.tobytes() == data.inputs.tobytes()
    assert set(json.loads(mp.read_text())["hyperparameters"][0]) == {"sigma_s", "sigma_w", "m_diag"}
    dp.write_text(dp.read_text() + "\n")  # same rows, different bytes
    with pytest.raises(ParseError, match="changed"):
        io.read_model(mp)


def test_policy_and_log_round_trip(tmp_path):
    cfg = lq_fixture_config(dt=1e-2)
    res = solve_game(cfg, build_plant(cfg))
    pp = io.write_policy(tmp_path / "policy.json", res, 1.0)
    pol = io.read_policy(pp)
    assert pol.K_u.tobytes() == res.gains.K_u.tobytes()
    assert pol.x_star.tobytes() == res.trajectory.x.tobytes()
    lp = io.write_iteration_log(tmp_path / "it.csv", res.log)
    assert lp.read_text().splitlines()[0] == "iter,cost,alpha,lambda,grad_norm"
    log = io.read_iteration_log(lp)
    np.testing.assert_array_equal(log["cost"], res.costs)


def test_json_rejects_nothing_non_finite(tmp_path):
    p = io.write_json(tmp_path / "a.json", {"x": np.array([1.0, np.inf]), "n": np.int64(3)})
    assert json.loads(p.read_text()) == {"x": [1.0, None], "n": 3}


def test_bad_json_names_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n"a": 1,\n}\n')
    with pytest.raises(ParseError) as exc:
        io.read_json(p)
    assert exc.value.line == 3


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    with pytest.raises(TypeError):
        io.atomic_write(tmp_path / "x.txt", 12345)
    assert list(tmp_path.iterdir()) == []
