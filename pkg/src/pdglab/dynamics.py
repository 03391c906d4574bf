"""
Rigid-body lander dynamics.

Packed state layout (last axis), 6-DOF::

    x = [r(3), v(3), q(4), w(3), m]      # 14 values

    r : position, target-centred inertial frame [m]
    v : velocity, inertial frame [m/s]
    q : attitude quaternion, scalar last [rho1, rho2, rho3, q4]
    w : body rates [rad/s]
    m : mass [kg]

3-DOF point-mass layout::

    y = [r(3), v(3), m]                  # 7 values

Every function broadcasts over leading batch axes, so one call can advance a
whole batch of episodes. The attitude matrix maps inertial vectors into the
body frame; its transpose maps body forces back to the inertial frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

R = slice(0, 3)
V = slice(3, 6)
Q = slice(6, 10)
W = slice(10, 13)
M = 13
STATE_DIM = 14
POINT_STATE_DIM = 7

MARS_GRAVITY = np.array([0.0, 0.0, -3.7114])
G_REF = 9.8
ISP = 225.0


class DynamicsError(ValueError):
    """Raised when a propagated state leaves the finite domain."""


def skew(a):
    """Cross-product matrix, ``skew(a) @ b == cross(a, b)``."""
    a = np.asarray(a, dtype=float)
    out = np.zeros(a.shape[:-1] + (3, 3))
    out[..., 0, 1] = -a[..., 2]
    out[..., 0, 2] = a[..., 1]
    out[..., 1, 0] = a[..., 2]
    out[..., 1, 2] = -a[..., 0]
    out[..., 2, 0] = -a[..., 1]
    out[..., 2, 1] = a[..., 0]
    return out


def xi_matrix(q):
    """4x3 matrix ``[q4 I + [rho x]; -rho^T]``."""
    q = np.asarray(q, dtype=float)
    rho, q4 = q[..., :3], q[..., 3]
    out = np.empty(q.shape[:-1] + (4, 3))
    out[..., :3, :] = q4[..., None, None] * np.eye(3) + skew(rho)
    out[..., 3, :] = -rho
    return out


def psi_matrix(q):
    """4x3 matrix ``[q4 I - [rho x]; -rho^T]``."""
    q = np.asarray(q, dtype=float)
    rho, q4 = q[..., :3], q[..., 3]
    out = np.empty(q.shape[:-1] + (4, 3))
    out[..., :3, :] = q4[..., None, None] * np.eye(3) - skew(rho)
    out[..., 3, :] = -rho
    return out


def _attitude_matrix(q):
    return np.swapaxes(xi_matrix(q), -1, -2) @ psi_matrix(q)


def attitude_matrix(q, tol=1e-6):
    """Direction cosine matrix (inertial -> body) of a unit quaternion.

    Raises
    ------
    ValueError
        If ``|q|`` differs from one by more than `tol`.
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    err = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
    if np.any(err > tol):
        raise ValueError(f"quaternion is not unit norm (max error {np.max(err):.3g})")
    return _attitude_matrix(q)


def normalize_quaternion(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def euler_to_quaternion(yaw, pitch, roll):
    """Quaternion of a yaw (z), pitch (y), roll (x) rotation sequence."""
    cy, sy = np.cos(np.asarray(yaw) / 2), np.sin(np.asarray(yaw) / 2)
    cp, sp = np.cos(np.asarray(pitch) / 2), np.sin(np.asarray(pitch) / 2)
    cr, sr = np.cos(np.asarray(roll) / 2), np.sin(np.asarray(roll) / 2)
    return np.stack(
        [
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
            cr * cp * cy + sr * sp * sy,
        ],
        axis=-1,
    )


def quaternion_to_euler(q):
    """Return ``(..., 3)`` array of [yaw, pitch, roll] for a z-y-x sequence."""
    a = _attitude_matrix(normalize_quaternion(q))
    yaw = np.arctan2(a[..., 0, 1], a[..., 0, 0])
    pitch = -np.arcsin(np.clip(a[..., 0, 2], -1.0, 1.0))
    roll = np.arctan2(a[..., 1, 2], a[..., 2, 2])
    return np.stack([yaw, pitch, roll], axis=-1)


def ellipsoid_inertia(m, a, b, c):
    """Inertia of a uniform solid ellipsoid with semi-axes a, b, c along x, y, z."""
    m = np.asarray(m, dtype=float)
    if np.any(m <= 0) or min(a, b, c) <= 0:
        raise ValueError("mass and semi-axes must be positive")
    diag = np.array([b * b + c * c, a * a + c * c, a * a + b * b])
    return (m / 5.0)[..., None, None] * np.diag(diag)


@dataclass
class ThrusterLayout:
    """Body-frame engine geometry. Rows of `positions`/`directions` are engines."""

    positions: np.ndarray = field(
        default_factory=lambda: np.array(
            [[0.0, -2.0, -1.0], [0.0, 2.0, -1.0], [-2.0, 0.0, -1.0], [2.0, 0.0, -1.0]]
        )
    )
    directions: np.ndarray = field(default_factory=lambda: np.tile([0.0, 0.0, 1.0], (4, 1)))
    t_min: float = 1000.0
    t_max: float = 5000.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.directions = np.asarray(self.directions, dtype=float)
        if self.positions.shape != self.directions.shape or self.positions.shape[-1] != 3:
            raise ValueError("positions and directions must both be (k, 3)")
        if not np.allclose(np.linalg.norm(self.directions, axis=1), 1.0, atol=1e-12):
            raise ValueError("thruster directions must be unit vectors")
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        self._moment_arms = np.cross(self.positions, self.directions)

    @property
    def n_engines(self):
        return self.positions.shape[0]

    @property
    def moment_arms(self):
        return self._moment_arms


@dataclass
class Wrench:
    force: np.ndarray
    torque: np.ndarray


@dataclass
class Disturbance:
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class LanderParams:
    """Physical parameters. `gravity` and `inertia_noise` may carry batch axes."""

    semi_axes: tuple = (2.0, 2.0, 1.0)
    isp: float = ISP
    g_ref: float = G_REF
    gravity: np.ndarray = field(default_factory=lambda: MARS_GRAVITY.copy())
    inertia_noise: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dry_mass: float = 1500.0
    layout: ThrusterLayout = field(default_factory=ThrusterLayout)

    def inertia(self, m):
        return ellipsoid_inertia(m, *self.semi_axes) + self.inertia_noise


@dataclass
class LanderState:
    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray
    m: float

    def to_array(self):
        return np.concatenate([self.r, self.v, self.q, self.w, [self.m]]).astype(float)

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[R].copy(), x[V].copy(), x[Q].copy(), x[W].copy(), float(x[M]))


def thruster_wrench(layout, t_cmd):
    """Body force and torque from per-engine thrust commands (..., k)."""
    t_cmd = np.asarray(t_cmd, dtype=float)
    if not np.all(np.isfinite(t_cmd)):
        raise ValueError("thrust commands must be finite")
    return Wrench(t_cmd @ layout.directions, t_cmd @ layout.moment_arms)


def _mass_flow(total_thrust, params):
    return -total_thrust / (params.isp * params.g_ref)


def state_derivative(x, t_cmd, params, dist=None):
    """Time derivative of packed 6-DOF state(s) under engine commands `t_cmd`.

    The inertia tensor is re-evaluated at the current mass before the
    per-episode noise matrix is added.
    """
    x = np.asarray(x, dtype=float)
    wrench = thruster_wrench(params.layout, t_cmd)
    f_env = np.zeros(3) if dist is None else dist.force
    l_env = np.zeros(3) if dist is None else dist.torque

    q, w, m = x[..., Q], x[..., W], x[..., M]
    a = _attitude_matrix(q)
    f_inertial = np.einsum("...ji,...j->...i", a, wrench.force)

    J = params.inertia(m)
    if not np.all(np.isfinite(J)):
        raise DynamicsError("inertia became non-finite")
    h = np.einsum("...ij,...j->...i", J, w)
    rhs = -np.cross(w, h) + wrench.torque + l_env
    try:
        w_dot = np.linalg.solve(J, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise DynamicsError("singular inertia tensor") from exc

    dx = np.empty_like(x)
    dx[..., R] = x[..., V]
    dx[..., V] = (f_inertial + f_env) / m[..., None] + params.gravity
    dx[..., Q] = 0.5 * np.einsum("...ij,...j->...i", xi_matrix(q), w)
    dx[..., W] = w_dot
    # unit directions: ||d_i T_i|| == T_i
    dx[..., M] = _mass_flow(np.sum(np.abs(t_cmd), axis=-1), params)
    return dx


def _rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(x, t_cmd, params, dt, dist=None, renormalize=True):
    """One classical RK4 step with engine commands held constant.

    The quaternion is renormalised (unless `renormalize` is False) and the
    mass floored at ``params.dry_mass``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x_new = _rk4(lambda s: state_derivative(s, t_cmd, params, dist), np.asarray(x, float), dt)
    if not np.all(np.isfinite(x_new)):
        raise DynamicsError("state became non-finite")
    if renormalize:
        x_new[..., Q] = normalize_quaternion(x_new[..., Q])
    x_new[..., M] = np.maximum(x_new[..., M], params.dry_mass)
    return x_new


def point_mass_derivative(y, thrust, params, dist=None):
    """Translational and mass dynamics of the 3-DOF model; `thrust` is inertial."""
    y = np.asarray(y, dtype=float)
    thrust = np.asarray(thrust, dtype=float)
    f_env = np.zeros(3) if dist is None else dist.force
    dy = np.empty_like(y)
    dy[..., R] = y[..., V]
    dy[..., V] = (thrust + f_env) / y[..., 6, None] + params.gravity
    dy[..., 6] = _mass_flow(np.linalg.norm(thrust, axis=-1), params)
    return dy


def rk4_step_3dof(y, thrust, params, dt, dist=None):
    if dt <= 0:
        raise ValueError("dt must be positive")
    y_new = _rk4(lambda s: point_mass_derivative(s, thrust, params, dist), np.asarray(y, float), dt)
    if not np.all(np.isfinite(y_new)):
        raise DynamicsError("state became non-finite")
    y_new[..., 6] = np.maximum(y_new[..., 6], params.dry_mass)
    return y_new


def angular_momentum_inertial(x, params):
    """Inertial-frame angular momentum ``A(q)^T J w``."""
    J = params.inertia(x[..., M])
    h_body = np.einsum("...ij,...j->...i", J, x[..., W])
    return np.einsum("...ji,...j->...i", _attitude_matrix(x[..., Q]), h_body)


def rotational_energy(x, params):
    J = params.inertia(x[..., M])
    w = x[..., W]
    return 0.5 * np.einsum("...i,...ij,...j->...", w, J, w)
