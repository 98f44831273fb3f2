"""Euler-Maruyama rollouts, ensembles, seeding and training-data generation."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from gtddp.config import lq_fixture_config
from gtddp.dynamics import linear_model
from gtddp.errors import DivergenceError
from gtddp.pipeline import build_plant, solve_game
from gtddp.sim import (
    ExcitationConfig,
    SdeConfig,
    em_step,
    generate_training_rollouts,
    make_rng,
    monte_carlo,
    rollout_closed_loop,
    split_seed,
)
from gtddp.solver import FeedbackPolicy, feedback_policy

A = np.array([[0.0, 1.0], [-1.0, -0.2]])
B = np.array([[0.0], [1.0]])
G = np.array([[0.5, 0.0], [0.2, 1.0]])
f = linear_model(A, B)


def test_split_seed_reference_value():
    # first output of the SplitMix64 generator started from state 0
    assert split_seed(0, 0) == 0xE220A8397B1DCDAF


@given(st.integers(0, 2**64 - 1), st.integers(0, 1000))
def test_split_seed_range_and_spread(seed, i):
    a, b = split_seed(seed, i), split_seed(seed, i + 1)
    assert 0 <= a < 2**64 and a != b


def test_zero_noise_is_plain_euler():
    cfg = SdeConfig(0.01, np.zeros((2, 2)))
    x, u = np.array([1.0, -0.5]), np.array([0.3])
    out = em_step(x, u, f, G, cfg, make_rng(1))
    np.testing.assert_array_equal(out, x + 0.01 * f(x, u))


def test_single_step_statistics():
    Sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
    cfg = SdeConfig(0.01, Sigma)
    x, u = np.array([1.0, -0.5]), np.array([0.3])
    rng = make_rng(11)
    N = 100_000
    steps = np.array([em_step(x, u, f, G, cfg, rng) for _ in range(N)])
    mean_ref = x + 0.01 * f(x, u)
    cov_ref = G @ Sigma @ G.T * 0.01
    se = np.sqrt(np.diag(cov_ref) / N)
    assert np.all(np.abs(steps.mean(0) - mean_ref) < 4 * se)
    cov = np.cov((steps - mean_ref).T)
    np.testing.assert_allclose(np.diag(cov), np.diag(cov_ref), rtol=0.05)
    assert cov[0, 1] == pytest.approx(cov_ref[0, 1], rel=0.05)


def test_sde_config_validation():
    with pytest.raises(ValueError):
        SdeConfig(0.0, np.eye(2))
    with pytest.raises(ValueError):
        SdeConfig(0.1, -np.eye(2))
    with pytest.raises(ValueError):
        SdeConfig(0.1, np.eye(2), seed=-1)


def _lq_policy():
    cfg = lq_fixture_config(dt=1e-2)
    setup = build_plant(cfg)
    res = solve_game(cfg, setup)
    return setup, res


def test_noise_free_rollout_matches_solver_when_disturbance_off():
    cfg = lq_fixture_config(gamma=1e6, dt=1e-2)
    setup = build_plant(cfg)
    res = solve_game(cfg, setup)
    r = rollout_closed_loop(setup.x0, feedback_policy(res), setup.plant, setup.G, SdeConfig(0.01, np.zeros((1, 1))))
    np.testing.assert_allclose(r.x, res.trajectory.x, rtol=1e-9, atol=1e-12)


def test_fixed_seed_repeats_bitwise():
    setup, res = _lq_policy()
    pol = feedback_policy(res)
    sde = SdeConfig(0.01, np.eye(1), seed=99)
    a = rollout_closed_loop(setup.x0, pol, setup.plant, setup.G, sde)
    b = rollout_closed_loop(setup.x0, pol, setup.plant, setup.G, sde)
    assert a.x.tobytes() == b.x.tobytes() and a.u.tobytes() == b.u.tobytes()


def test_ensemble_semantics():
    setup, res = _lq_policy()
    pol = feedback_policy(res)
    sde = SdeConfig(0.01, 4 * np.eye(1), seed=5, n_runs=6)
    ens = monte_carlo(setup.x0, pol, setup.plant, setup.G, sde)
    again = monte_carlo(setup.x0, pol, setup.plant, setup.G, sde)
    assert ens.states.tobytes() == again.states.tobytes()
    np.testing.assert_allclose(ens.mean, sum(ens.states[i] for i in range(6)) / 6, rtol=1e-12, atol=1e-15)
    single = monte_carlo(setup.x0, pol, setup.plant, setup.G, SdeConfig(0.01, 4 * np.eye(1), seed=5, n_runs=1))
    direct = rollout_closed_loop(setup.x0, pol, setup.plant, setup.G, sde, seed=split_seed(5, 0))
    np.testing.assert_array_equal(single.states[0], direct.x)
    np.testing.assert_array_equal(single.states[0], ens.states[0])
    np.testing.assert_array_equal(single.mean, direct.x)


def test_divergent_runs_are_flagged():
    pol = FeedbackPolicy(np.arange(21) * 0.1, np.zeros((21, 1)), np.zeros((20, 1)), np.zeros((20, 1, 1)))

    def plant(x, u):
        return np.where(x > 0.3, np.inf, 0.0)

    sde = SdeConfig(0.1, np.eye(1), seed=3, n_runs=40)
    ens = monte_carlo(np.zeros(1), pol, plant, np.eye(1), sde)
    assert 0 < ens.failed.sum() < 40
    assert np.isnan(ens.terminal_error([0.0])[ens.failed]).all()
    np.testing.assert_allclose(ens.mean, ens.states[ens.ok].mean(0))
    with pytest.raises(DivergenceError):
        monte_carlo(np.ones(1), pol, plant, np.eye(1), sde)


# ------------------------------------------------------------ training data

def test_noise_free_nominal_plant_gives_zero_targets():
    sde = SdeConfig(0.01, np.zeros((2, 2)), seed=1)
    exc = ExcitationConfig(amplitude=2.0, hold_steps=5, n_steps=60, n_max=1000, scheme="forward")
    data = generate_training_rollouts(np.zeros((3, 2)), f, f, G, 1, sde, exc)
    assert len(data) == 3 * 60
    np.testing.assert_allclose(data.targets, 0.0, atol=1e-12)


def test_training_rows_capped():
    sde = SdeConfig(0.01, np.eye(2), seed=1)
    exc = ExcitationConfig(amplitude=2.0, hold_steps=5, n_steps=400, n_max=50)
    data = generate_training_rollouts(np.zeros((4, 2)), f, f, G, 1, sde, exc)
    assert len(data) <= 50


def test_residual_recovered_from_forward_differences():
    sde = SdeConfig(0.01, np.zeros((2, 2)), seed=2)
    exc = ExcitationConfig(amplitude=1.0, hold_steps=4, n_steps=30, scheme="forward")
    plant = lambda x, u: f(x, u) + np.array([0.0, 0.7])  # noqa: E731
    data = generate_training_rollouts(np.ones((1, 2)), plant, f, G, 1, sde, exc)
    np.testing.assert_allclose(data.targets, np.tile([0.0, 0.7], (30, 1)), atol=1e-11)
