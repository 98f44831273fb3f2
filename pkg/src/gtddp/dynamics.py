"""System models and the composed game vector field.

All vector fields accept batched inputs: ``x`` of shape (..., n) and ``u`` of
shape (..., m) broadcast against each other.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import EvaluationError, InsufficientDataError, KinematicSingularityError, ShapeError
from .gp import GpDataset, GpModel

N_QUAD_STATE = 16
N_QUAD_CONTROL = 4
SINGULARITY_MARGIN = 1e-3

# motor mixing: columns are (thrust, roll, pitch, yaw) commands
_MIX = np.array(
    [
        [1.0, 0.0, -1.0, 1.0],
        [1.0, 1.0, 0.0, -1.0],
        [1.0, 0.0, 1.0, 1.0],
        [1.0, -1.0, 0.0, -1.0],
    ]
)


@dataclass(frozen=True)
class QuadcopterParams:
    """Physical constants of the quadcopter. Speeds are in rpm."""

    mass: float = 0.5
    gravity: float = 9.81
    arm_length: float = 0.175
    inertia: tuple = (2.32e-3, 2.32e-3, 4.0e-3)
    k_m: float = 1.0 / 20.0
    k_F: float = 6.11e-8
    k_M: float = 1.5e-9

    def __post_init__(self):
        object.__setattr__(self, "inertia", tuple(float(v) for v in np.ravel(self.inertia)))
        if len(self.inertia) != 3:
            raise ShapeError("inertia must hold the three principal moments")
        for name in ("mass", "gravity", "arm_length", "k_m", "k_F", "k_M"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.inertia) <= 0:
            raise ValueError("inertia must be positive definite")

    @property
    def omega_h(self) -> float:
        """Motor speed at which total thrust balances gravity."""
        return float(np.sqrt(self.mass * self.gravity / (4.0 * self.k_F)))

    @property
    def I(self) -> np.ndarray:
        return np.diag(self.inertia)

    def to_dict(self) -> dict:
        return {
            "mass": self.mass,
            "gravity": self.gravity,
            "arm_length": self.arm_length,
            "inertia": list(self.inertia),
            "k_m": self.k_m,
            "k_F": self.k_F,
            "k_M": self.k_M,
        }


def quad_input_matrix(p: QuadcopterParams) -> np.ndarray:
    """The constant 16x4 control matrix; only the motor rows are nonzero."""
    G = np.zeros((N_QUAD_STATE, N_QUAD_CONTROL))
    G[12:, :] = p.k_m * _MIX
    return G


def rotation_matrix(phi, theta, psi) -> np.ndarray:
    """Body-to-inertial rotation for Z-X-Y Euler angles, shape (..., 3, 3)."""
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cps, sps = np.cos(psi), np.sin(psi)
    R = np.empty(np.broadcast(phi, theta, psi).shape + (3, 3))
    R[..., 0, 0] = cps * cth - sph * sps * sth
    R[..., 0, 1] = -cph * sps
    R[..., 0, 2] = cps * sth + cth * sph * sps
    R[..., 1, 0] = cth * sps + cps * sph * sth
    R[..., 1, 1] = cph * cps
    R[..., 1, 2] = sps * sth - cps * cth * sph
    R[..., 2, 0] = -cph * sth
    R[..., 2, 1] = sph
    R[..., 2, 2] = cph * cth
    return R


def quad_nominal(x, u, p: QuadcopterParams = QuadcopterParams()) -> np.ndarray:
    """Time derivative of the 16-state quadcopter.

    State order: position, Euler angles (roll, pitch, yaw), velocity, body
    rates, motor speeds. Gravity acts along -z and thrust along the body z
    axis so that all motors at ``omega_h`` hover.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != N_QUAD_STATE or u.shape[-1] != N_QUAD_CONTROL:
        raise ShapeError(f"quadcopter expects (...,16) states and (...,4) controls, got {x.shape}, {u.shape}")
    phi, theta, psi = x[..., 3], x[..., 4], x[..., 5]
    cph = np.cos(phi)
    bad = np.abs(cph) < np.sin(SINGULARITY_MARGIN)
    if np.any(bad):
        angle = float(np.ravel(phi)[np.argmax(np.ravel(bad))])
        raise KinematicSingularityError(f"Euler-rate map singular at roll angle {angle:.6g} rad", angle=angle)
    sph = np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    pr, qr, rr = x[..., 9], x[..., 10], x[..., 11]
    omega = x[..., 12:16]

    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (N_QUAD_STATE,)))
    out[..., 0:3] = x[..., 6:9]

    psi_dot = (-sth * pr + cth * rr) / cph
    out[..., 3] = cth * pr + sth * rr
    out[..., 4] = qr - sph * psi_dot
    out[..., 5] = psi_dot

    F = p.k_F * omega**2
    M = p.k_M * omega**2
    thrust = F.sum(-1) / p.mass
    R = rotation_matrix(phi, theta, psi)
    out[..., 6:9] = R[..., :, 2] * thrust[..., None]
    out[..., 8] -= p.gravity

    L = p.arm_length
    Ix, Iy, Iz = p.inertia
    tau_x = L * (F[..., 1] - F[..., 3])
    tau_y = L * (F[..., 2] - F[..., 0])
    tau_z = M[..., 0] - M[..., 1] + M[..., 2] - M[..., 3]
    out[..., 9] = (tau_x - (qr * Iz * rr - rr * Iy * qr)) / Ix
    out[..., 10] = (tau_y - (rr * Ix * pr - pr * Iz * rr)) / Iy
    out[..., 11] = (tau_z - (pr * Iy * qr - qr * Ix * pr)) / Iz

    out[..., 12:16] = p.k_m * (p.omega_h - omega) + p.k_m * np.einsum("ij,...j->...i", _MIX, u)
    return out


def quad_hover_state(p: QuadcopterParams = QuadcopterParams(), position=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(N_QUAD_STATE)
    x[:3] = position
    x[12:] = p.omega_h
    return x


def perturbed_plant(p: QuadcopterParams = QuadcopterParams(), inertia_scale=1.2, arm_scale=1.1):
    """Quadcopter with inertia and arm length scaled; stands in for the true system."""
    if not (inertia_scale > 0 and arm_scale > 0):
        raise ValueError("perturbation factors must be positive")
    pp = replace(p, inertia=tuple(inertia_scale * v for v in p.inertia), arm_length=arm_scale * p.arm_length)

    def plant(x, u):
        return quad_nominal(x, u, pp)

    plant.params = pp
    return plant


def quadcopter_model(p: QuadcopterParams = QuadcopterParams()):
    def nominal(x, u):
        return quad_nominal(x, u, p)

    nominal.params = p
    return nominal


def linear_model(A, B):
    """``x' = A x + B u`` as a batched vector field."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)

    def f(x, u):
        return np.einsum("ij,...j->...i", A, x) + np.einsum("ij,...j->...i", B, u)

    f.A, f.B = A, B
    return f


@dataclass(frozen=True)
class PlanarParams:
    mass: float = 0.5
    inertia: float = 2.5e-3
    arm_length: float = 0.175
    gravity: float = 9.81


def planar_model(p: PlanarParams = PlanarParams()):
    """Planar birotor: state (y, z, theta, y', z', theta'), controls are rotor thrusts about hover."""
    hover = 0.5 * p.mass * p.gravity

    def f(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        th = x[..., 2]
        T1 = hover + u[..., 0]
        T2 = hover + u[..., 1]
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (6,)))
        out[..., 0:3] = x[..., 3:6]
        out[..., 3] = -np.sin(th) * (T1 + T2) / p.mass
        out[..., 4] = np.cos(th) * (T1 + T2) / p.mass - p.gravity
        out[..., 5] = p.arm_length * (T1 - T2) / p.inertia
        return out

    f.params = p
    return f


@dataclass(frozen=True)
class Linearization:
    F_x: np.ndarray
    F_u: np.ndarray
    F_w: np.ndarray


def _fd_jacobians(f, x, u, h_floor=1e-6, h_rel=1e-6):
    """Central-difference Jacobians of ``f(x, u)`` for a batch of points.

    ``x`` (B, n), ``u`` (B, m); returns (B, n_out, n) and (B, n_out, m).
    """
    z = np.concatenate([x, u], axis=-1)
    B, nz = z.shape
    n = x.shape[-1]
    h = np.maximum(h_floor, h_rel * np.abs(z))  # (B, nz)
    E = np.eye(nz)
    zp = z[:, None, :] + h[:, :, None] * E[None]
    zm = z[:, None, :] - h[:, :, None] * E[None]
    zz = np.concatenate([zp, zm], axis=1)  # (B, 2nz, nz)
    vals = f(zz[..., :n], zz[..., n:])
    jac = (vals[:, :nz] - vals[:, nz:]) / (2.0 * h[:, :, None])  # (B, nz, n_out)
    jac = np.swapaxes(jac, 1, 2)
    return jac[..., :n], jac[..., n:]


@dataclass(frozen=True, eq=False)
class GameDynamics:
    """``F(x, u, w) = f(x, u) + mu(x, u) + W(x, u) C w``.

    ``mu`` and ``W = diag(sqrt(var))`` come from the attached GP. Without a
    GP both vanish unless a constant ``noise_std`` diagonal is given, which
    is how fixed-channel fixtures (``x' = Ax + Bu + Dw``) are expressed.
    """

    nominal: Callable
    n: int
    m: int
    C: np.ndarray
    gp: GpModel | None = None
    noise_std: np.ndarray | None = None

    @property
    def q(self) -> int:
        return self.C.shape[1]

    def residual_mean(self, x, u) -> np.ndarray:
        x, u = np.asarray(x, float), np.asarray(u, float)
        if self.gp is None:
            return np.zeros(np.broadcast_shapes(x.shape, u.shape[:-1] + (self.n,)))
        return self._gp_call(self.gp.predict_mean, x, u)

    def W(self, x, u) -> np.ndarray:
        """Diagonal of the disturbance scale, shape (..., n)."""
        x, u = np.asarray(x, float), np.asarray(u, float)
        shape = np.broadcast_shapes(x.shape, u.shape[:-1] + (self.n,))
        if self.gp is None:
            if self.noise_std is None:
                return np.zeros(shape)
            return np.broadcast_to(self.noise_std, shape).copy()
        return np.sqrt(self._gp_call(self.gp.predict_var, x, u))

    def _gp_call(self, fn, x, u):
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        xb = np.broadcast_to(x, shape + (self.n,))
        ub = np.broadcast_to(u, shape + (self.m,))
        z = np.concatenate([xb, ub], axis=-1).reshape(-1, self.n + self.m)
        out = fn(z)
        return out.reshape(shape + out.shape[1:])

    def __call__(self, x, u, w) -> np.ndarray:
        x, u, w = np.asarray(x, float), np.asarray(u, float), np.asarray(w, float)
        out = self.nominal(x, u)
        if self.gp is not None:
            z_shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
            xb = np.broadcast_to(x, z_shape + (self.n,))
            ub = np.broadcast_to(u, z_shape + (self.m,))
            z = np.concatenate([xb, ub], axis=-1).reshape(-1, self.n + self.m)
            if np.any(w != 0):
                mu, var = self.gp.predict_mean_var(z)
                sd = np.sqrt(var).reshape(z_shape + (self.n,))
                out = out + mu.reshape(z_shape + (self.n,)) + sd * np.einsum("ij,...j->...i", self.C, w)
            else:
                out = out + self.gp.predict_mean(z).reshape(z_shape + (self.n,))
        elif self.noise_std is not None:
            out = out + self.noise_std * np.einsum("ij,...j->...i", self.C, w)
        return out

    def linearize(self, x, u, w) -> Linearization:
        """Jacobians at one point."""
        Fx, Fu, Fw = self.linearize_batch(np.atleast_2d(x), np.atleast_2d(u), np.atleast_2d(w))
        return Linearization(Fx[0], Fu[0], Fw[0])

    def linearize_batch(self, X, U, Wd):
        """Jacobians at K points: returns F_x (K,n,n), F_u (K,n,m), F_w (K,n,q).

        The nominal part is differenced numerically; the GP mean and the
        disturbance-scale terms use the GP's analytic query gradients.
        """
        X, U, Wd = np.asarray(X, float), np.asarray(U, float), np.asarray(Wd, float)
        Fx, Fu = _fd_jacobians(self.nominal, X, U)
        if not (np.all(np.isfinite(Fx)) and np.all(np.isfinite(Fu))):
            k = int(np.argmax(~np.isfinite(Fx).all(axis=(1, 2)) | ~np.isfinite(Fu).all(axis=(1, 2))))
            raise EvaluationError(f"non-finite dynamics Jacobian at knot {k}")
        Cw = Wd @ self.C.T  # (K, n)
        if self.gp is not None:
            z = np.concatenate([X, U], axis=-1)
            gm = self.gp.predict_grad_mean(z)  # (K, n, n+m)
            var = self.gp.predict_var(z)
            sd = np.sqrt(var)
            Fw = sd[:, :, None] * self.C[None]
            if np.any(Cw != 0):
                gv = self.gp.predict_var_grad(z)
                with np.errstate(divide="ignore", invalid="ignore"):
                    dsd = np.where(sd[..., None] > 0, gv / (2.0 * sd[..., None]), 0.0)
                gm = gm + dsd * Cw[:, :, None]
            Fx = Fx + gm[..., : self.n]
            Fu = Fu + gm[..., self.n :]
        else:
            sd = self.W(X, U)
            Fw = sd[:, :, None] * self.C[None]
        return Fx, Fu, Fw


def compose_game_dynamics(nominal, n: int, m: int, C=None, gp: GpModel | None = None, noise_std=None) -> GameDynamics:
    """Build the game vector field; ``C`` defaults to the identity (q = n)."""
    C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[0] != n:
        raise ShapeError(f"disturbance channel has {C.shape[0]} rows for {n} states")
    if gp is not None and (gp.n_state != n or gp.n_input != n + m):
        raise ShapeError(f"GP maps {gp.n_input} inputs to {gp.n_state} outputs; system has n={n}, m={m}")
    if noise_std is not None:
        noise_std = np.broadcast_to(np.asarray(noise_std, float), (n,)).copy()
    return GameDynamics(nominal, n, m, C, gp, noise_std)


def collect_training_data(plant, nominal, times, states, controls, scheme: str = "central") -> GpDataset:
    """Residual targets from a logged rollout on a uniform grid.

    ``states`` has K+1 rows (or K), ``controls`` at least as many rows as
    interior knots need. Interior knot ``i`` yields the target
    ``(x[i+1] - x[i-1]) / (2 dt) - f(x[i], u[i])``. With
    ``scheme="forward"`` every knot but the last yields
    ``(x[i+1] - x[i]) / dt - f(x[i], u[i])``, which is exact for logs produced
    by an Euler(-Maruyama) integrator and keeps the increment noise
    independent of the input. ``plant`` is unused and only kept so callers
    can pass the pair that produced the log.
    """
    if scheme not in ("central", "forward"):
        raise ValueError(f"unknown differencing scheme {scheme!r}")
    t = np.asarray(times, dtype=float)
    Xs = np.asarray(states, dtype=float)
    Us = np.asarray(controls, dtype=float)
    n_knots = Xs.shape[0]
    if n_knots < 3:
        raise InsufficientDataError(f"need at least 3 knots, got {n_knots}")
    if Us.shape[0] < n_knots - 1:
        raise ShapeError("fewer controls than interior knots")
    dt = np.diff(t[:n_knots])
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError("rollout must be on a uniform time grid")
    dt = dt[0]
    if scheme == "central":
        idx = np.arange(1, n_knots - 1)
        xdot = (Xs[idx + 1] - Xs[idx - 1]) / (2.0 * dt)
    else:
        idx = np.arange(0, n_knots - 1)
        xdot = (Xs[idx + 1] - Xs[idx]) / dt
    targets = xdot - nominal(Xs[idx], Us[idx])
    inputs = np.concatenate([Xs[idx], Us[idx]], axis=1)
    return GpDataset(inputs, targets, t[idx])
