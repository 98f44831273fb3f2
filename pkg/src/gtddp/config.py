"""Experiment configuration: one JSON file drives every pipeline stage.

Every section is a dataclass. Loading rejects unknown keys and validates
shapes and ranges; :func:`to_dict` writes every field including defaults, so
``dump(load(dump(load(f))))`` equals ``dump(load(f))``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .dynamics import PlanarParams, QuadcopterParams
from .errors import ConfigError

PLANTS = ("quadcopter", "linear_fixture", "planar_fixture")

# the two-state game fixture: a double integrator with a weak disturbance channel
LQ_FIXTURE = {
    "A": [[0.0, 1.0], [0.0, 0.0]],
    "B": [[0.0], [1.0]],
    "D": [[0.0], [0.02]],
}


@dataclass
class PlantSection:
    name: str = "quadcopter"
    params: dict = field(default_factory=dict)
    inertia_scale: float = 1.2
    arm_scale: float = 1.1
    x0: list | None = None


@dataclass
class CollectSection:
    n_rollouts: int = 10
    n_steps: int = 50
    hold_steps: int = 10
    amplitude: float = 1000.0
    scheme: str = "forward"
    start_spread: list | None = None


@dataclass
class GpSection:
    n_max: int = 200
    init: dict | None = None
    tol: float = 1e-5
    max_iters: int = 100
    noise_test: bool = True


@dataclass
class CostSection:
    preset: str | None = None
    gamma: float = 0.05
    Q: list | None = None
    R_u: list | None = None
    Q_f: list | None = None
    x_f: list | None = None


@dataclass
class SolverSection:
    t_final: float = 3.0
    dt: float = 0.01
    max_iters: int = 100
    cost_tol: float = 1e-7
    reg_init: float = 1e-6
    reg_scale: float = 10.0
    reg_max: float = 1e10
    line_search_alphas: list = field(default_factory=lambda: [2.0**-k for k in range(11)])
    accept_ratio: float = 0.0
    value_scheme: str = "discrete"


@dataclass
class SimSection:
    noise_sigma: float = 10.0
    noise_cov: list | None = None
    n_runs: int = 100


_SECTIONS = {
    "plant": PlantSection,
    "collect": CollectSection,
    "gp": GpSection,
    "cost": CostSection,
    "solver": SolverSection,
    "sim": SimSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    plant: PlantSection = field(default_factory=PlantSection)
    collect: CollectSection = field(default_factory=CollectSection)
    gp: GpSection = field(default_factory=GpSection)
    cost: CostSection = field(default_factory=CostSection)
    solver: SolverSection = field(default_factory=SolverSection)
    sim: SimSection = field(default_factory=SimSection)

    def __post_init__(self):
        _validate(self)

    # ------------------------------------------------------------------ derived
    @property
    def n_state(self) -> int:
        if self.plant.name == "quadcopter":
            return 16
        if self.plant.name == "planar_fixture":
            return 6
        return len(self.plant.params["A"])

    @property
    def n_control(self) -> int:
        if self.plant.name == "quadcopter":
            return 4
        if self.plant.name == "planar_fixture":
            return 2
        return len(self.plant.params["B"][0])

    @property
    def cost_preset(self) -> str:
        if self.cost.preset is not None:
            return self.cost.preset
        return {"quadcopter": "quadcopter", "linear_fixture": "lq_fixture", "planar_fixture": "planar_fixture"}[self.plant.name]

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "output_dir": self.output_dir}
        for name in _SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: _copy(getattr(sec, f.name)) for f in fields(sec)}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def hash(self) -> str:
        """SHA-256 of the canonical serialization."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["seed"] = seed
        return from_dict(d)


def _copy(v):
    return json.loads(json.dumps(v))


def _section(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(extra))}")
    return cls(**data)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    extra = set(data) - {"seed", "output_dir", *_SECTIONS}
    if extra:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(extra))}")
    kw = {name: _section(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    try:
        return ExperimentConfig(seed=data.get("seed", 0), output_dir=data.get("output_dir", "runs"), **kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: {exc.msg}") from None
    return from_dict(data)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


# ---------------------------------------------------------------- validation

def _num(v, name, positive=False, nonneg=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(f"{name} must be a finite number")
    if positive and not v > 0:
        raise ConfigError(f"{name} must be positive")
    if nonneg and v < 0:
        raise ConfigError(f"{name} must be nonnegative")
    return v


def _int(v, name, minimum=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{name} must be at least {minimum}")
    return v


def _vec(v, n, name):
    a = np.asarray(v, dtype=float)
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} must be a list of {n} finite numbers")
    return a


def weight_matrix(v, n, name) -> np.ndarray:
    """A diagonal given as a vector, or a full n x n matrix."""
    a = np.asarray(v, dtype=float)
    if a.shape == (n,):
        return np.diag(a)
    if a.shape == (n, n):
        return a
    raise ConfigError(f"{name} must be a length-{n} diagonal or an {n}x{n} matrix")


def _validate(c: ExperimentConfig):
    _int(c.seed, "seed", 0)
    if c.seed >= 1 << 64:
        raise ConfigError("seed must fit in 64 bits")
    if not isinstance(c.output_dir, str) or not c.output_dir:
        raise ConfigError("output_dir must be a nonempty string")

    p = c.plant
    if p.name not in PLANTS:
        raise ConfigError(f"plant.name must be one of {', '.join(PLANTS)}")
    if not isinstance(p.params, dict):
        raise ConfigError("plant.params must be an object")
    if p.name == "quadcopter":
        base = QuadcopterParams().to_dict()
    elif p.name == "planar_fixture":
        base = {f.name: getattr(PlanarParams(), f.name) for f in fields(PlanarParams)}
    else:
        base = dict(LQ_FIXTURE)
    extra = set(p.params) - set(base)
    if extra:
        raise ConfigError(f"unknown key(s) in plant.params: {', '.join(sorted(extra))}")
    base.update(p.params)
    p.params = _copy(base)
    try:
        if p.name == "quadcopter":
            QuadcopterParams(**p.params)
        elif p.name == "planar_fixture":
            PlanarParams(**p.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"plant.params: {exc}") from None
    if p.name == "linear_fixture":
        A = np.asarray(p.params["A"], float)
        B = np.asarray(p.params["B"], float)
        D = np.asarray(p.params["D"], float)
        n = A.shape[0] if A.ndim == 2 else -1
        if A.shape != (n, n) or B.ndim != 2 or B.shape[0] != n or D.ndim != 2 or D.shape[0] != n:
            raise ConfigError("plant.params: A must be n x n, B and D must have n rows")
    _num(p.inertia_scale, "plant.inertia_scale", positive=True)
    _num(p.arm_scale, "plant.arm_scale", positive=True)
    n, m = c.n_state, c.n_control
    if p.x0 is not None:
        p.x0 = _vec(p.x0, n, "plant.x0").tolist()

    k = c.collect
    _int(k.n_rollouts, "collect.n_rollouts", 1)
    _int(k.n_steps, "collect.n_steps", 2)
    _int(k.hold_steps, "collect.hold_steps", 1)
    _num(k.amplitude, "collect.amplitude", nonneg=True)
    if k.scheme not in ("forward", "central"):
        raise ConfigError("collect.scheme must be 'forward' or 'central'")
    if k.start_spread is not None:
        k.start_spread = _vec(k.start_spread, n, "collect.start_spread").tolist()
        if min(k.start_spread) < 0:
            raise ConfigError("collect.start_spread entries must be nonnegative")

    g = c.gp
    _int(g.n_max, "gp.n_max", 1)
    _num(g.tol, "gp.tol", positive=True)
    _int(g.max_iters, "gp.max_iters", 1)
    if not isinstance(g.noise_test, bool):
        raise ConfigError("gp.noise_test must be true or false")
    if g.init is not None:
        if not isinstance(g.init, dict) or set(g.init) != {"sigma_s", "sigma_w", "m_diag"}:
            raise ConfigError("gp.init must have exactly the keys sigma_s, sigma_w, m_diag")
        _num(g.init["sigma_s"], "gp.init.sigma_s", positive=True)
        _num(g.init["sigma_w"], "gp.init.sigma_w", positive=True)
        md = _vec(g.init["m_diag"], n + m, "gp.init.m_diag")
        if np.any(md <= 0):
            raise ConfigError("gp.init.m_diag entries must be positive")

    w = c.cost
    if w.preset is not None and w.preset not in ("quadcopter", "lq_fixture", "planar_fixture", "custom"):
        raise ConfigError("cost.preset must be quadcopter, lq_fixture, planar_fixture, custom or null")
    preset = c.cost_preset
    if preset == "quadcopter" and n != 16:
        raise ConfigError("the quadcopter cost preset needs the quadcopter plant")
    if preset == "custom" and any(v is None for v in (w.Q, w.R_u, w.Q_f, w.x_f)):
        raise ConfigError("a custom cost needs Q, R_u, Q_f and x_f")
    _num(w.gamma, "cost.gamma", positive=True)
    for name, dim in (("Q", n), ("R_u", m), ("Q_f", n)):
        v = getattr(w, name)
        if v is not None:
            weight_matrix(v, dim, f"cost.{name}")
    if w.x_f is not None:
        w.x_f = _vec(w.x_f, n, "cost.x_f").tolist()

    s = c.solver
    for name in ("t_final", "dt", "cost_tol", "reg_init", "reg_scale", "reg_max"):
        _num(getattr(s, name), f"solver.{name}", positive=True)
    _num(s.accept_ratio, "solver.accept_ratio", nonneg=True)
    _int(s.max_iters, "solver.max_iters", 1)
    if not isinstance(s.line_search_alphas, list) or not s.line_search_alphas:
        raise ConfigError("solver.line_search_alphas must be a nonempty list")
    try:
        solver_config(c).n_steps
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from None

    q = c.sim
    _num(q.noise_sigma, "sim.noise_sigma", nonneg=True)
    _int(q.n_runs, "sim.n_runs", 1)
    if q.noise_cov is not None:
        nq = noise_dim(c)
        S = weight_matrix(q.noise_cov, nq, "sim.noise_cov")
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() < -1e-12 * max(1.0, np.abs(S).max()):
            raise ConfigError("sim.noise_cov must be symmetric positive semidefinite")


def noise_dim(c: ExperimentConfig) -> int:
    """Number of noise channels of the simulated plant."""
    if c.plant.name == "linear_fixture":
        return len(c.plant.params["D"][0])
    return c.n_control


def solver_config(c: ExperimentConfig):
    from .solver import SolverConfig

    s = c.solver
    return SolverConfig(
        t_final=s.t_final,
        dt=s.dt,
        max_iters=s.max_iters,
        cost_tol=s.cost_tol,
        reg_init=s.reg_init,
        reg_scale=s.reg_scale,
        reg_max=s.reg_max,
        line_search_alphas=tuple(s.line_search_alphas),
        accept_ratio=s.accept_ratio,
        value_scheme=s.value_scheme,
    )


def lq_fixture_config(gamma: float = 1.0, dt: float = 1e-3, **solver) -> ExperimentConfig:
    """Configuration of the linear-quadratic game fixture."""
    return from_dict(
        {
            "plant": {"name": "linear_fixture", "x0": [1.0, 0.0]},
            "collect": {"amplitude": 1.0, "n_steps": 100, "hold_steps": 20},
            "cost": {"preset": "lq_fixture", "gamma": gamma},
            "solver": {"t_final": 1.0, "dt": dt, **solver},
            "sim": {"noise_sigma": 1.0, "n_runs": 10},
        }
    )
