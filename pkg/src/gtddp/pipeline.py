"""Config-driven glue for the learn, solve and simulate stages.

Stage seeds are derived from the master seed with :func:`split_seed`, so
each stage is reproducible on its own and the stages do not share random
streams.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import ExperimentConfig, noise_dim, solver_config, weight_matrix
from .cost import QuadraticGameCost, paper_cost_preset
from .dynamics import (
    GameDynamics,
    PlanarParams,
    QuadcopterParams,
    compose_game_dynamics,
    linear_model,
    perturbed_plant,
    planar_model,
    quad_hover_state,
    quad_input_matrix,
    quadcopter_model,
)
from .gp import GpDataset, GpHyperparams, GpModel, OptimizerConfig, default_hyperparams, fit, optimize_hyperparams
from .sim import ExcitationConfig, RolloutEnsemble, SdeConfig, generate_training_rollouts, make_rng, monte_carlo, split_seed
from .solver import FeedbackPolicy, SolveResult, solve

# stream indices for split_seed
STREAM_STARTS = 0
STREAM_COLLECT = 1
STREAM_SIMULATE = 2
STREAM_HOLDOUT = 3


@dataclass(frozen=True, eq=False)
class PlantSetup:
    """Everything the stages need to know about the selected system."""

    name: str
    nominal: Callable
    plant: Callable
    G: np.ndarray
    C: np.ndarray
    noise_std: np.ndarray | None
    x0: np.ndarray
    spread: np.ndarray
    n: int
    m: int


def build_plant(cfg: ExperimentConfig) -> PlantSetup:
    p = cfg.plant
    if p.name == "quadcopter":
        qp = QuadcopterParams(**p.params)
        nominal = quadcopter_model(qp)
        plant = perturbed_plant(qp, p.inertia_scale, p.arm_scale)
        G = quad_input_matrix(qp)
        x0 = quad_hover_state(qp)
        spread = np.zeros(16)
        spread[0:3], spread[3:6], spread[9:12], spread[12:16] = 2.0, 0.2, 0.5, 300.0
        C, noise_std = G, None
    elif p.name == "planar_fixture":
        pp = PlanarParams(**p.params)
        nominal = planar_model(pp)
        plant = planar_model(PlanarParams(pp.mass, p.inertia_scale * pp.inertia, p.arm_scale * pp.arm_length, pp.gravity))
        # input matrix at level attitude
        G = np.zeros((6, 2))
        G[4, :] = 1.0 / pp.mass
        G[5, :] = pp.arm_length / pp.inertia * np.array([1.0, -1.0])
        x0 = np.zeros(6)
        spread = np.array([1.0, 1.0, 0.2, 0.5, 0.5, 0.5])
        C, noise_std = G, None
    else:
        A = np.asarray(p.params["A"], float)
        B = np.asarray(p.params["B"], float)
        D = np.asarray(p.params["D"], float)
        nominal = plant = linear_model(A, B)
        G = C = D
        noise_std = np.ones(A.shape[0])
        x0 = np.zeros(A.shape[0])
        x0[0] = 1.0
        spread = np.ones(A.shape[0])
    if p.x0 is not None:
        x0 = np.asarray(p.x0, float)
    if cfg.collect.start_spread is not None:
        spread = np.asarray(cfg.collect.start_spread, float)
    return PlantSetup(p.name, nominal, plant, G, C, noise_std, x0, spread, x0.size, cfg.n_control)


def build_cost(cfg: ExperimentConfig, setup: PlantSetup | None = None, gamma: float | None = None) -> QuadraticGameCost:
    n, m = cfg.n_state, cfg.n_control
    c = cfg.cost
    g = c.gamma if gamma is None else gamma
    preset = cfg.cost_preset
    if preset == "quadcopter":
        base = paper_cost_preset(gamma=g)
        Q, R, Qf, xf = base.Q, base.R_u, base.Q_f, base.x_f
    elif preset == "lq_fixture":
        Q, R, Qf, xf = np.eye(n), np.eye(m), 10.0 * np.eye(n), np.zeros(n)
    elif preset == "planar_fixture":
        Q = np.diag([1.0, 1.0, 1.0, 0.1, 0.1, 0.1])[:n, :n]
        R, Qf = 1e-2 * np.eye(m), 100.0 * np.eye(n)
        xf = np.zeros(n)
        xf[:2] = 1.0
    else:
        Q = R = Qf = xf = None
    Q = Q if c.Q is None else weight_matrix(c.Q, n, "cost.Q")
    R = R if c.R_u is None else weight_matrix(c.R_u, m, "cost.R_u")
    Qf = Qf if c.Q_f is None else weight_matrix(c.Q_f, n, "cost.Q_f")
    xf = xf if c.x_f is None else np.asarray(c.x_f, float)
    q = setup.C.shape[1] if setup is not None else None
    return QuadraticGameCost(Q=Q, R_u=R, Q_f=Qf, x_f=xf, gamma=g, q=q)


def noise_cov(cfg: ExperimentConfig) -> np.ndarray:
    nq = noise_dim(cfg)
    if cfg.sim.noise_cov is not None:
        return weight_matrix(cfg.sim.noise_cov, nq, "sim.noise_cov")
    return cfg.sim.noise_sigma**2 * np.eye(nq)


def start_states(cfg: ExperimentConfig, setup: PlantSetup, stream: int = STREAM_STARTS, count: int | None = None) -> np.ndarray:
    """Start states drawn uniformly in ``x0 +/- spread``."""
    rng = make_rng(split_seed(cfg.seed, stream))
    k = cfg.collect.n_rollouts if count is None else count
    return setup.x0 + rng.uniform(-1.0, 1.0, size=(k, setup.n)) * setup.spread


def excitation(cfg: ExperimentConfig) -> ExcitationConfig:
    k = cfg.collect
    return ExcitationConfig(k.amplitude, k.hold_steps, k.n_steps, cfg.gp.n_max, k.scheme)


def collect(cfg: ExperimentConfig, setup: PlantSetup | None = None) -> GpDataset:
    setup = setup or build_plant(cfg)
    sde = SdeConfig(cfg.solver.dt, noise_cov(cfg), seed=split_seed(cfg.seed, STREAM_COLLECT))
    return generate_training_rollouts(start_states(cfg, setup), setup.plant, setup.nominal, setup.G, setup.m, sde, excitation(cfg))


def train(cfg: ExperimentConfig, data: GpDataset):
    """Returns ``(hyperparameters, log evidences)`` per output dimension."""
    if cfg.gp.init is not None:
        init = GpHyperparams.from_dict(cfg.gp.init)
    else:
        init = default_hyperparams(data)
    opt = OptimizerConfig(tol=cfg.gp.tol, max_iters=cfg.gp.max_iters, noise_test=cfg.gp.noise_test)
    hyper = optimize_hyperparams(data, init, opt)
    model = fit(data, hyper)
    lml = [model.log_marginal_likelihood(d)[0] for d in range(data.n_state)]
    return hyper, lml


def game_dynamics(cfg: ExperimentConfig, setup: PlantSetup, gp: GpModel | None) -> GameDynamics:
    noise_std = setup.noise_std if gp is None else None
    return compose_game_dynamics(setup.nominal, setup.n, setup.m, C=setup.C, gp=gp, noise_std=noise_std)


def solve_game(cfg: ExperimentConfig, setup: PlantSetup, gp: GpModel | None = None, gamma: float | None = None) -> SolveResult:
    dyn = game_dynamics(cfg, setup, gp)
    return solve(setup.x0, dyn, build_cost(cfg, setup, gamma), solver_config(cfg))


def simulate(cfg: ExperimentConfig, setup: PlantSetup, policy: FeedbackPolicy, n_runs: int | None = None) -> RolloutEnsemble:
    sde = SdeConfig(
        cfg.solver.dt,
        noise_cov(cfg),
        seed=split_seed(cfg.seed, STREAM_SIMULATE),
        n_runs=cfg.sim.n_runs if n_runs is None else n_runs,
    )
    return monte_carlo(setup.x0, policy, setup.plant, setup.G, sde)
