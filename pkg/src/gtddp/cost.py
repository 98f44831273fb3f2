"""Soft-constrained quadratic game cost.

Running cost ``(x-x_f)^T Q (x-x_f) + u^T R u - gamma^2 w^T w`` and terminal
cost ``(x-x_f)^T Q_f (x-x_f)``. There are no 1/2 factors, so gradients carry
a factor of two.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class CostExpansion:
    L: np.ndarray
    L_x: np.ndarray
    L_u: np.ndarray
    L_w: np.ndarray
    L_xx: np.ndarray
    L_uu: np.ndarray
    L_ww: np.ndarray
    L_ux: np.ndarray
    L_wx: np.ndarray
    L_uw: np.ndarray


def _sym_psd(M, name, strict=False):
    if not np.allclose(M, M.T, rtol=1e-12, atol=0):
        raise ValueError(f"{name} must be symmetric")
    ev = np.linalg.eigvalsh(M)
    tol = 1e-12 * max(1.0, np.abs(ev).max())
    if strict and ev.min() <= 0 or ev.min() < -tol:
        raise ValueError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")


@dataclass(frozen=True, eq=False)
class QuadraticGameCost:
    Q: np.ndarray
    R_u: np.ndarray
    Q_f: np.ndarray
    x_f: np.ndarray
    gamma: float
    q: int | None = None

    def __post_init__(self):
        for name in ("Q", "R_u", "Q_f"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "x_f", np.asarray(self.x_f, dtype=float).ravel())
        n = self.x_f.size
        if self.Q.shape != (n, n) or self.Q_f.shape != (n, n):
            raise ShapeError(f"state weights must be {n}x{n}")
        if self.R_u.shape[0] != self.R_u.shape[1]:
            raise ShapeError("R_u must be square")
        _sym_psd(self.Q, "Q")
        _sym_psd(self.Q_f, "Q_f")
        _sym_psd(self.R_u, "R_u", strict=True)
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n(self) -> int:
        return self.x_f.size

    @property
    def m(self) -> int:
        return self.R_u.shape[0]

    def with_gamma(self, gamma: float) -> "QuadraticGameCost":
        return QuadraticGameCost(self.Q, self.R_u, self.Q_f, self.x_f, gamma, self.q)


def _check(c: QuadraticGameCost, x, u, w):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape[-1] != c.n or u.shape[-1] != c.m:
        raise ShapeError(f"cost expects x of size {c.n} and u of size {c.m}, got {x.shape}, {u.shape}")
    if c.q is not None and w.shape[-1] != c.q:
        raise ShapeError(f"cost expects w of size {c.q}, got {w.shape}")
    return x, u, w


def running_cost_value(c: QuadraticGameCost, x, u, w) -> np.ndarray:
    """Penalized running cost; batched over leading axes."""
    x, u, w = _check(c, x, u, w)
    dx = x - c.x_f
    return (
        np.einsum("...i,ij,...j->...", dx, c.Q, dx)
        + np.einsum("...i,ij,...j->...", u, c.R_u, u)
        - c.gamma**2 * np.einsum("...i,...i->...", w, w)
    )


def running_cost(c: QuadraticGameCost, x, u, w):
    """Value and exact derivatives of the penalized running cost.

    Works on single points or batches; second-order blocks are returned
    unbatched since they are constant.
    """
    x, u, w = _check(c, x, u, w)
    dx = x - c.x_f
    q = w.shape[-1]
    L = running_cost_value(c, x, u, w)
    exp = CostExpansion(
        L=L,
        L_x=2.0 * dx @ c.Q.T,
        L_u=2.0 * u @ c.R_u.T,
        L_w=-2.0 * c.gamma**2 * w,
        L_xx=2.0 * c.Q,
        L_uu=2.0 * c.R_u,
        L_ww=-2.0 * c.gamma**2 * np.eye(q),
        L_ux=np.zeros((c.m, c.n)),
        L_wx=np.zeros((q, c.n)),
        L_uw=np.zeros((c.m, q)),
    )
    return L, exp


def terminal_cost(c: QuadraticGameCost, x):
    """Terminal value, gradient and Hessian."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != c.n:
        raise ShapeError(f"terminal cost expects x of size {c.n}, got {x.shape}")
    dx = x - c.x_f
    val = np.einsum("...i,ij,...j->...", dx, c.Q_f, dx)
    return val, 2.0 * dx @ c.Q_f.T, 2.0 * c.Q_f


def trajectory_cost(c: QuadraticGameCost, xs, us, ws, dt: float, penalized: bool = True) -> float:
    """Rectangle-rule integral of the running cost plus the terminal cost.

    With ``penalized=False`` the disturbance penalty is dropped, giving the
    plain performance index.
    """
    xs, us, ws = np.asarray(xs, float), np.asarray(us, float), np.asarray(ws, float)
    run = running_cost_value(c, xs[:-1], us, ws)
    if not penalized:
        run = run + c.gamma**2 * np.einsum("ki,ki->k", ws, ws)
    term, _, _ = terminal_cost(c, xs[-1])
    return float(run.sum() * dt + term)


def paper_cost_preset(n: int = 16, m: int = 4, gamma: float = 0.05) -> QuadraticGameCost:
    """Quadcopter steering weights: reach (3, 5, 1) with yaw pi."""
    if n != 16:
        raise ShapeError("the quadcopter preset is defined for 16 states")
    qf = np.zeros(16)
    qf[0:3] = 1e7
    qf[3:9] = 1e6
    qf[9:12] = 1e5
    Q_f = np.diag(qf)
    x_f = np.zeros(16)
    x_f[0], x_f[1], x_f[2], x_f[5] = 3.0, 5.0, 1.0, np.pi
    return QuadraticGameCost(Q=1e-5 * Q_f, R_u=1e-4 * np.eye(m), Q_f=Q_f, x_f=x_f, gamma=gamma)
