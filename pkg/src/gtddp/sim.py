"""Stochastic closed-loop simulation and training-data generation.

Increments follow the Euler-Maruyama convention: ``noise_cov`` is a
covariance *density*, so one step draws ``xi ~ N(0, noise_cov * dt)``.
Every run owns a generator seeded through :func:`split_seed`, which makes
ensembles reproducible and independent of execution order.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dynamics import collect_training_data
from .errors import DivergenceError, GtddpError, InsufficientDataError, ShapeError
from .gp import GpDataset

_MASK64 = (1 << 64) - 1


def split_seed(seed: int, index: int) -> int:
    """SplitMix64 finalizer applied to ``seed + index`` (mod 2**64)."""
    z = (int(seed) + int(index) + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class SdeConfig:
    dt: float
    noise_cov: np.ndarray
    seed: int = 0
    n_runs: int = 1

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        object.__setattr__(self, "noise_cov", S)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if S.shape[0] != S.shape[1] or not np.allclose(S, S.T):
            raise ValueError("noise covariance must be square and symmetric")
        if np.linalg.eigvalsh(S).min() < -1e-12 * max(1.0, np.abs(S).max()):
            raise ValueError("noise covariance must be positive semidefinite")
        if int(self.n_runs) < 1:
            raise ValueError("n_runs must be at least 1")
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def noise_factor(self) -> np.ndarray:
        """Matrix ``S`` with ``S S^T = noise_cov`` (eigen-factor, tolerates singular covariances)."""
        ev, U = np.linalg.eigh(self.noise_cov)
        return U * np.sqrt(np.clip(ev, 0.0, None))


def em_step(x, u, plant, G, cfg: SdeConfig, rng: np.random.Generator, xi=None) -> np.ndarray:
    """One Euler-Maruyama step ``x + f(x, u) dt + G xi``.

    ``xi`` may be supplied pre-drawn (already scaled by ``sqrt(dt)``);
    otherwise it is drawn from ``rng``.
    """
    G = np.atleast_2d(G)
    if xi is None:
        xi = draw_increments(rng, cfg, 1)[0]
    with np.errstate(over="ignore", invalid="ignore"):
        return np.asarray(x, float) + plant(x, u) * cfg.dt + G @ xi


def draw_increments(rng, cfg: SdeConfig, n_steps: int) -> np.ndarray:
    q = cfg.noise_cov.shape[0]
    z = rng.standard_normal((n_steps, q))
    return np.sqrt(cfg.dt) * z @ cfg.noise_factor.T


@dataclass(frozen=True, eq=False)
class Rollout:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    failed: bool = False
    fail_knot: int = -1


def rollout_closed_loop(x0, policy, plant, G, cfg: SdeConfig, seed: int | None = None, n_steps: int | None = None, run_id: int = 0) -> Rollout:
    """Apply ``policy(x, k)`` at each knot and integrate with Euler-Maruyama.

    Raises :class:`DivergenceError` if the state leaves the finite range.
    """
    K = policy.n_steps if n_steps is None else int(n_steps)
    if hasattr(policy, "n_steps") and K > policy.n_steps:
        raise ShapeError(f"policy covers {policy.n_steps} steps, {K} requested")
    if hasattr(policy, "dt") and abs(policy.dt - cfg.dt) > 1e-12 * cfg.dt:
        raise ShapeError(f"policy grid step {policy.dt} differs from simulation step {cfg.dt}")
    rng = make_rng(cfg.seed if seed is None else seed)
    xi = draw_increments(rng, cfg, K)
    G = np.atleast_2d(G)
    x0 = np.asarray(x0, float)
    xs = np.empty((K + 1, x0.size))
    xs[0] = x0
    us = None
    for k in range(K):
        u = policy(xs[k], k)
        if us is None:
            us = np.empty((K, np.size(u)))
        us[k] = u
        try:
            xs[k + 1] = em_step(xs[k], u, plant, G, cfg, rng, xi[k])
        except GtddpError as exc:
            raise DivergenceError(f"run {run_id} failed at knot {k}: {exc}", knot=k, run=run_id) from exc
        if not np.all(np.isfinite(xs[k + 1])):
            raise DivergenceError(f"run {run_id} diverged at knot {k + 1}", knot=k + 1, run=run_id)
    return Rollout(cfg.dt * np.arange(K + 1), xs, us if us is not None else np.zeros((0, 0)))


@dataclass(frozen=True, eq=False)
class RolloutEnsemble:
    """Monte-Carlo batch; statistics are taken over the runs that did not fail."""

    t: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    failed: np.ndarray
    seeds: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return ~self.failed

    @property
    def mean(self) -> np.ndarray:
        return self.states[self.ok].mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.states[self.ok].std(axis=0)

    def terminal_error(self, goal, idx=None) -> np.ndarray:
        """Per-run terminal deviation from ``goal`` (restricted to ``idx``); NaN for failed runs."""
        idx = slice(None) if idx is None else idx
        err = self.states[:, -1, idx] - np.asarray(goal, float)[idx]
        err[self.failed] = np.nan
        return err


def monte_carlo(x0, policy, plant, G, cfg: SdeConfig, n_steps: int | None = None) -> RolloutEnsemble:
    """``cfg.n_runs`` independent rollouts seeded by ``split_seed(cfg.seed, i)``."""
    K = policy.n_steps if n_steps is None else int(n_steps)
    n = np.size(x0)
    R = int(cfg.n_runs)
    states = np.full((R, K + 1, n), np.nan)
    controls = None
    failed = np.zeros(R, dtype=bool)
    seeds = np.array([split_seed(cfg.seed, i) for i in range(R)], dtype=np.uint64)
    for i in range(R):
        try:
            r = rollout_closed_loop(x0, policy, plant, G, cfg, seed=int(seeds[i]), n_steps=K, run_id=i)
        except DivergenceError:
            failed[i] = True
            continue
        if controls is None:
            controls = np.full((R, K, r.u.shape[1]), np.nan)
        states[i] = r.x
        controls[i] = r.u
    if failed.all():
        raise DivergenceError(f"all {R} runs diverged")
    return RolloutEnsemble(cfg.dt * np.arange(K + 1), states, controls, failed, seeds)


@dataclass(frozen=True)
class ExcitationConfig:
    """Random excitation for data collection: ``u = u_ff + U(-amplitude, amplitude)`` held ``hold_steps``."""

    amplitude: float = 1000.0
    hold_steps: int = 10
    n_steps: int = 100
    n_max: int = 200
    scheme: str = "central"


def excitation_controls(rng, m, cfg: ExcitationConfig, u_ff=None) -> np.ndarray:
    n_hold = -(-cfg.n_steps // cfg.hold_steps)
    levels = rng.uniform(-cfg.amplitude, cfg.amplitude, size=(n_hold, m))
    us = np.repeat(levels, cfg.hold_steps, axis=0)[: cfg.n_steps]
    if u_ff is not None:
        us = us + np.asarray(u_ff, float)
    return us


def generate_training_rollouts(x0_set, plant, nominal, G, m: int, sde: SdeConfig, exc: ExcitationConfig, u_ff=None) -> GpDataset:
    """Excite the plant from each start state, log, and turn logs into residual samples.

    Rollout ``i`` uses the generator seeded with ``split_seed(sde.seed, i)``
    for both excitation and noise. Diverging rollouts are truncated at the
    last finite state (with a warning); the concatenated dataset is thinned
    to at most ``exc.n_max`` rows by uniform stride.
    """
    x0_set = np.atleast_2d(np.asarray(x0_set, dtype=float))
    if x0_set.shape[0] < 1:
        raise InsufficientDataError("need at least one start state")
    G = np.atleast_2d(G)
    parts = []
    for i, x0 in enumerate(x0_set):
        rng = make_rng(split_seed(sde.seed, i))
        us = excitation_controls(rng, m, exc, u_ff)
        xi = draw_increments(rng, sde, exc.n_steps)
        xs = np.empty((exc.n_steps + 1, x0.size))
        xs[0] = x0
        last = exc.n_steps
        for k in range(exc.n_steps):
            try:
                xs[k + 1] = em_step(xs[k], us[k], plant, G, sde, rng, xi[k])
            except GtddpError:
                last = k
                break
            if not np.all(np.isfinite(xs[k + 1])):
                last = k
                break
        if last < exc.n_steps:
            warnings.warn(f"training rollout {i} diverged at knot {last + 1}; keeping {last + 1} knots", RuntimeWarning)
        if last + 1 < 3:
            continue
        t = sde.dt * np.arange(last + 1)
        parts.append(collect_training_data(plant, nominal, t, xs[: last + 1], us[:last], exc.scheme))
    if not parts:
        raise InsufficientDataError("every training rollout diverged before producing samples")
    return GpDataset.concatenate(parts).subsample(exc.n_max)
