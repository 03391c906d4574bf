"""
Energy-optimal closed-loop (DR/DV) guidance for the point-mass lander.

For a target position ``r_f`` and velocity ``v_f`` reached after ``t`` seconds
under constant gravity ``g``, the acceleration minimising the integral of
``|a|^2`` is::

    a = 6 (r_f - r) / t^2 - (4 v + 2 v_f) / t - g

Writing ``r_rel = r - r_f`` and ``v_rel = v - v_f`` this becomes
``-6 r_rel / t^2 - 4 v_rel / t - 6 v_f / t - g``.

When the final time is free and the cost is ``Gamma t + 1/2 int |a|^2``, the
optimal time-to-go is a root of::

    (Gamma + |g|^2 / 2) t^4 - 2 (|v|^2 + v.v_f + |v_f|^2) t^2
        - 12 r_rel.(v + v_f) t - 18 |r_rel|^2 = 0

whose value divided by ``t^4`` is the derivative of the cost with respect
to ``t``. The first positive crossing is a local cost minimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator

from .dynamics import MARS_GRAVITY
from .environment import clip_thrust_vector


class NoPositiveRoot(ValueError):
    """The time-to-go quartic has no positive root for this state."""


@dataclass
class GuidanceCommand:
    accel: np.ndarray
    thrust: np.ndarray
    t_go: np.ndarray


def drdv_accel(r_rel, v_rel, g, t_go, v_f=None):
    """Commanded thrust acceleration (gravity already removed).

    Parameters
    ----------
    r_rel, v_rel : array_like (..., 3)
        Position and velocity relative to the target state.
    g : array_like (3,)
    t_go : float or array (...)
        Time to go, must be positive.
    v_f : array_like (..., 3), optional
        Target velocity; zero by default.
    """
    t = np.asarray(t_go, dtype=float)
    if np.any(~(t > 0)):
        raise ValueError("t_go must be positive")
    t = t[..., None]
    r_rel = np.asarray(r_rel, float)
    v_rel = np.asarray(v_rel, float)
    a = -6.0 * r_rel / t**2 - 4.0 * v_rel / t - np.asarray(g, float)
    if v_f is not None:
        a = a - 6.0 * np.asarray(v_f, float) / t
    return a


def tgo_coefficients(r_rel, v, g, v_f=None, gamma=0.0):
    """Coefficients ``(c4, c2, c1, c0)`` of the time-to-go quartic.

    `v` is the absolute velocity (not relative to `v_f`).
    """
    r_rel = np.asarray(r_rel, float)
    v = np.asarray(v, float)
    v_f = np.zeros_like(v) if v_f is None else np.broadcast_to(np.asarray(v_f, float), v.shape)
    g = np.asarray(g, float)
    c4 = gamma + 0.5 * np.dot(g, g)
    c2 = -2.0 * (np.sum(v * v, -1) + np.sum(v * v_f, -1) + np.sum(v_f * v_f, -1))
    c1 = -12.0 * np.sum(r_rel * (v + v_f), -1)
    c0 = -18.0 * np.sum(r_rel * r_rel, -1)
    return c4 + 0.0 * c2, c2, c1, c0


def tgo_quartic(t, coeffs):
    c4, c2, c1, c0 = coeffs
    t2 = t * t
    return c4 * t2 * t2 + c2 * t2 + c1 * t + c0


def tgo_stationarity(t, coeffs):
    """Derivative of the free-final-time cost, ``quartic(t) / t^4``."""
    return tgo_quartic(t, coeffs) / t**4


def _grid(scale):
    return scale * np.geomspace(1e-6, 1e6, 241)


def solve_tgo(r_rel, v_rel, g, tol=1e-12, v_f=None, gamma=0.0):
    """Smallest positive root of the time-to-go quartic for one state.

    A geometric grid brackets the first sign change, Brent's method finds the
    root to relative tolerance `tol`, and one Newton step polishes it.

    Raises
    ------
    NoPositiveRoot
        If no sign change exists; callers may fall back to ``|r| / |v|``.
    """
    r_rel = np.asarray(r_rel, float)
    v_rel = np.asarray(v_rel, float)
    v = v_rel if v_f is None else v_rel + np.asarray(v_f, float)
    if not (np.any(r_rel) or np.any(v_rel)):
        raise ValueError("state coincides with the target")
    c = tuple(float(x) for x in tgo_coefficients(r_rel, v, g, v_f, gamma))
    r_n, v_n = np.linalg.norm(r_rel), np.linalg.norm(v) + np.linalg.norm(v if v_f is None else v_f)
    scale = r_n / v_n if v_n > 0 and r_n > 0 else 1.0
    ts = _grid(scale)
    f = tgo_quartic(ts, c)
    if f[0] == 0.0:
        return float(ts[0])
    change = np.flatnonzero(np.sign(f[:-1]) * np.sign(f[1:]) <= 0)
    if len(change) == 0:
        raise NoPositiveRoot(
            "time-to-go quartic has no positive root; fall back to t_go = |r| / |v|")
    k = change[0]
    t = brentq(lambda s: tgo_quartic(s, c), ts[k], ts[k + 1], xtol=1e-300, rtol=max(tol, 4.5e-16), maxiter=200)
    df = 4 * c[0] * t**3 + 2 * c[1] * t + c[2]
    if df != 0:
        t_newton = t - tgo_quartic(t, c) / df
        if ts[k] <= t_newton <= ts[k + 1] and abs(tgo_quartic(t_newton, c)) <= abs(tgo_quartic(t, c)):
            t = t_newton
    return float(t)


APPROACH, FINAL, TERMINAL = 0, 1, 2


class DRDVGuidance(BaseEstimator):
    """DR/DV guidance with a single waypoint above the landing site.

    Phases (monotone within an episode):

    * approach: target the waypoint `waypoint_altitude` above the site with
      velocity `waypoint_velocity`;
    * final: target the site with `final_velocity`, entered when the lander
      descends through the waypoint altitude or the approach time-to-go
      drops below `terminal_tgo`;
    * terminal: hold `final_velocity` with time constant `velocity_tau`,
      entered when the final time-to-go drops below `terminal_tgo`.

    Re-solving for a vanishing time-to-go makes the gains ``4/t`` and
    ``6/t^2`` exceed what a 0.2 s zero-order hold can follow, and any fixed
    floor on ``t`` leaves an equilibrium hovering above the target. The
    terminal phase avoids both.

    The commanded thrust is ``m a`` with its magnitude clipped to
    ``[t_min, t_max]``. ``predict`` infers the phase from the state alone;
    ``act`` latches it per environment slot.

    Parameters
    ----------
    gamma : float
        Weight on flight time in the free-final-time cost.
    gravity : array_like or None
        Gravity assumed by the guidance law; nominal Mars gravity if None.
    """

    def __init__(self, waypoint_altitude=15.0, waypoint_velocity=(0.0, 0.0, -2.0),
                 final_velocity=(0.0, 0.0, -1.0), t_min=4000.0, t_max=20000.0, gamma=0.0,
                 tol=1e-12, terminal_tgo=1.0, velocity_tau=0.5, gravity=None):
        self.waypoint_altitude = waypoint_altitude
        self.waypoint_velocity = waypoint_velocity
        self.final_velocity = final_velocity
        self.t_min = t_min
        self.t_max = t_max
        self.gamma = gamma
        self.tol = tol
        self.terminal_tgo = terminal_tgo
        self.velocity_tau = velocity_tau
        self.gravity = gravity

    def _check(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError("thrust envelope must satisfy 0 < t_min < t_max")
        if self.terminal_tgo <= 0 or self.velocity_tau <= 0:
            raise ValueError("terminal_tgo and velocity_tau must be positive")

    @property
    def g_(self):
        return MARS_GRAVITY if self.gravity is None else np.asarray(self.gravity, float)

    def _target(self, phase):
        if phase == APPROACH:
            return np.array([0.0, 0.0, self.waypoint_altitude]), np.asarray(self.waypoint_velocity, float)
        return np.zeros(3), np.asarray(self.final_velocity, float)

    def _tgo(self, r_rel, v, v_f):
        try:
            return solve_tgo(r_rel, v - v_f, self.g_, self.tol, v_f=v_f, gamma=self.gamma)
        except (NoPositiveRoot, ValueError):
            speed = np.linalg.norm(v)
            return np.linalg.norm(r_rel) / speed if speed > 0 else 0.0

    def _single(self, r, v, phase):
        """Acceleration, time-to-go and (possibly advanced) phase for one state."""
        if phase == APPROACH and r[2] <= self.waypoint_altitude:
            phase = FINAL
        while phase < TERMINAL:
            target, v_f = self._target(phase)
            t_go = self._tgo(r - target, v, v_f)
            if t_go >= self.terminal_tgo:
                return drdv_accel(r - target, v - v_f, self.g_, t_go, v_f), t_go, phase
            phase += 1
        v_f = np.asarray(self.final_velocity, float)
        return -(v - v_f) / self.velocity_tau - self.g_, 0.0, phase

    def command(self, r_rel, v, m, phase):
        """Guidance command for a batch of states.

        Parameters
        ----------
        r_rel : (n, 3) position relative to the landing site
        v : (n, 3) velocity
        m : (n,) mass
        phase : (n,) int
            Current phase per state (0 approach, 1 final, 2 terminal).

        Returns
        -------
        GuidanceCommand, new phase array
        """
        self._check()
        r_rel = np.atleast_2d(np.asarray(r_rel, float))
        v = np.atleast_2d(np.asarray(v, float))
        m = np.atleast_1d(np.asarray(m, float))
        phase = np.broadcast_to(np.asarray(phase, int), m.shape)
        accel = np.empty_like(v)
        t_go = np.empty(len(m))
        new_phase = np.empty(len(m), dtype=int)
        for i in range(len(m)):
            accel[i], t_go[i], new_phase[i] = self._single(r_rel[i], v[i], phase[i])
        thrust = clip_thrust_vector(m[:, None] * accel, self.t_min, self.t_max)
        return GuidanceCommand(accel, thrust, t_go), new_phase

    def predict(self, X):
        """Thrust vectors for rows ``[r_rel(3), v(3), m]``."""
        X = np.atleast_2d(np.asarray(X, float))
        if X.shape[1] != 7:
            raise ValueError(f"expected rows of 7 values [r, v, m], got {X.shape[1]}")
        return self.command(X[:, :3], X[:, 3:6], X[:, 6], APPROACH)[0].thrust

    def act(self, env):
        """Environment actions for every slot of a 3-DOF environment."""
        if not hasattr(self, "phase_") or len(self.phase_) != env.n_envs:
            self.phase_ = np.zeros(env.n_envs, dtype=int)
        self.phase_[env.steps == 0] = APPROACH
        out = np.zeros((env.n_envs, env.act_dim))
        idx = np.flatnonzero(~env.done)
        if len(idx):
            cmd, self.phase_[idx] = self.command(
                env.relative_position[idx], env.velocity[idx], env.mass[idx], self.phase_[idx])
            out[idx] = cmd.thrust / env.config.max_3dof_thrust
        return out
