"""
Episodic powered-descent environments.

Both environments are batched: one instance advances ``n_envs`` independent
episodes in lock step. Each slot owns its random stream, so an episode's
trajectory depends only on its own seed, never on which other episodes share
the batch. Slots that finish stay frozen until the whole batch is reset.

Rewards are returned split in two parts: ``r1`` is the landing bonus and
``r2`` the sum of every shaping term, so that they can be discounted at
different rates by the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn

LANDED = "landed"
GROUND_CONTACT = "ground-contact"
ATTITUDE = "attitude-violation"
TIMEOUT = "timeout"
RUNNING = ""


@dataclass(frozen=True)
class InitialConditionRanges:
    """Uniform initial-condition box.

    Positions and velocities are [downrange, crossrange, elevation];
    attitude is [yaw, pitch, roll]; body rates are about [x, y, z]
    (roll, pitch, yaw axes).
    """

    position_min: tuple = (0.0, -1000.0, 2300.0)
    position_max: tuple = (2000.0, 1000.0, 2400.0)
    velocity_min: tuple = (-70.0, -30.0, -90.0)
    velocity_max: tuple = (-10.0, 30.0, -70.0)
    attitude_min: tuple = (-math.pi / 8, math.pi / 4 - math.pi / 8, -math.pi / 8)
    attitude_max: tuple = (math.pi / 8, math.pi / 4 + math.pi / 16, math.pi / 8)
    rate_min: tuple = (-0.01, -0.01, 0.0)
    rate_max: tuple = (0.01, 0.01, 0.0)

    def __post_init__(self):
        for lo, hi in self._pairs():
            if np.any(np.asarray(lo) > np.asarray(hi)):
                raise ValueError("initial-condition minimum exceeds maximum")

    def _pairs(self):
        return [
            (self.position_min, self.position_max),
            (self.velocity_min, self.velocity_max),
            (self.attitude_min, self.attitude_max),
            (self.rate_min, self.rate_max),
        ]


TABLE3 = InitialConditionRanges()
EXTENDED_9KM = replace(TABLE3, position_min=(0.0, -1500.0, 2400.0), position_max=(3000.0, 1500.0, 2500.0))
EXTENDED_12KM = replace(TABLE3, position_min=(0.0, -1500.0, 2900.0), position_max=(4000.0, 1500.0, 3100.0))
ELLIPSES = {"table3": TABLE3, "ext9": EXTENDED_9KM, "ext12": EXTENDED_12KM}


@dataclass(frozen=True)
class UncertaintyRanges:
    mass_min: float = 1900.0
    mass_max: float = 2100.0
    gravity_min: tuple = (-0.07, -0.07, -3.79)
    gravity_max: tuple = (0.07, 0.07, -3.64)
    inertia_diag_noise: float = 100.0
    inertia_offdiag_noise: float = 10.0
    force_mean_bound: float = 100.0
    force_std: float = 100.0
    min_inertia_eigenvalue: float = 10.0


@dataclass(frozen=True)
class ShapingConfig:
    tau1: float = 20.0
    tau2: float = 100.0
    alpha: float = -0.01
    beta: float = -0.05
    gamma_att: float = -100.0
    delta: float = -20.0
    eta: float = 0.01
    kappa: float = 10.0
    q_lim: tuple = (2 * math.pi, 7 * math.pi / 16, 7 * math.pi / 16)
    q_mgn: tuple = (0.0, 5 * math.pi / 16, 5 * math.pi / 16)
    r_lim: float = 5.0
    v_lim: float = 2.0
    q_land_lim: float = 0.2
    w_lim: float = 0.2
    waypoint_altitude: float = 15.0
    waypoint_descent_speed: float = 2.0
    final_descent_speed: float = 1.0
    min_closing_speed: float = 0.1
    min_range: float = 1e-8
    max_total_thrust: float = 20000.0

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0 or self.kappa <= 0 or self.eta <= 0:
            raise ValueError("tau1, tau2, kappa and eta must be positive")
        if max(self.alpha, self.beta, self.gamma_att, self.delta) > 0:
            raise ValueError("alpha, beta, gamma_att and delta must be non-positive")


@dataclass
class EnvConfig:
    """Everything an environment needs besides its seeds."""

    initial_conditions: InitialConditionRanges = TABLE3
    uncertainty: UncertaintyRanges = field(default_factory=UncertaintyRanges)
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    params: dyn.LanderParams = field(default_factory=dyn.LanderParams)
    nominal_mass: float = 2000.0
    perturb_mass: bool = True
    perturb_gravity: bool = True
    perturb_inertia: bool = True
    force_noise: bool = False
    guidance_period: float = 0.2
    substeps: int = 4
    timeout_steps: int = 600
    divert_offset: tuple | None = None
    divert_altitude: float = 1500.0
    glideslope_cap: float = 1000.0
    min_3dof_thrust: float = 4000.0
    max_3dof_thrust: float = 20000.0

    @classmethod
    def training(cls, **kw):
        """Per-episode mass, gravity and inertia uncertainty; no force noise."""
        return cls(**kw)

    @classmethod
    def testing(cls, **kw):
        """Wet mass within +/-5 %, random force disturbance, nominal g and inertia."""
        kw.setdefault("perturb_gravity", False)
        kw.setdefault("perturb_inertia", False)
        kw.setdefault("force_noise", True)
        return cls(**kw)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def sample_initial_state(ranges, rng):
    """Draw one packed 6-DOF state uniformly from `ranges` (mass left at 0)."""
    r = rng.uniform(ranges.position_min, ranges.position_max)
    v = rng.uniform(ranges.velocity_min, ranges.velocity_max)
    yaw, pitch, roll = rng.uniform(ranges.attitude_min, ranges.attitude_max)
    w = rng.uniform(ranges.rate_min, ranges.rate_max)
    x = np.zeros(dyn.STATE_DIM)
    x[dyn.R], x[dyn.V], x[dyn.W] = r, v, w
    x[dyn.Q] = dyn.euler_to_quaternion(yaw, pitch, roll)
    return x


def sample_inertia_noise(u, rng):
    """Symmetric noise matrix: U(-d, d) on the diagonal, U(-o, o) mirrored off it."""
    n = np.diag(rng.uniform(-u.inertia_diag_noise, u.inertia_diag_noise, 3))
    off = rng.uniform(-u.inertia_offdiag_noise, u.inertia_offdiag_noise, 3)
    for (i, j), val in zip(((0, 1), (0, 2), (1, 2)), off):
        n[i, j] = n[j, i] = val
    return n


def sample_uncertainty(u, rng, params, *, perturb_mass=True, perturb_gravity=True,
                       perturb_inertia=True, nominal_mass=2000.0):
    """Return ``(initial_mass, gravity, inertia_noise)`` for one episode.

    Inertia noise is redrawn until the perturbed tensor stays positive
    definite (minimum eigenvalue above ``u.min_inertia_eigenvalue``) down to
    the dry mass.
    """
    m0 = rng.uniform(u.mass_min, u.mass_max) if perturb_mass else nominal_mass
    g = rng.uniform(u.gravity_min, u.gravity_max) if perturb_gravity else np.array(params.gravity, float)
    noise = np.zeros((3, 3))
    if perturb_inertia:
        j_low = dyn.ellipsoid_inertia(min(m0, params.dry_mass), *params.semi_axes)
        while True:
            noise = sample_inertia_noise(u, rng)
            if np.linalg.eigvalsh(j_low + noise).min() > u.min_inertia_eigenvalue:
                break
    return m0, g, noise


# --------------------------------------------------------------------------
# shaping
# --------------------------------------------------------------------------


def target_velocity(r, v, v_o, cfg):
    """Velocity field and time-to-go at target-relative position `r`.

    Returns
    -------
    v_targ : ndarray (..., 3)
    t_go : ndarray (...)
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    above = r[..., 2] > cfg.waypoint_altitude
    ez = np.array([0.0, 0.0, 1.0])
    r_hat = np.where(above[..., None], r - cfg.waypoint_altitude * ez, r[..., 2:3] * ez)
    v_hat = np.where(
        above[..., None], v + cfg.waypoint_descent_speed * ez, v + cfg.final_descent_speed * ez
    )
    tau = np.where(above, cfg.tau1, cfg.tau2)
    r_norm = np.linalg.norm(r_hat, axis=-1)
    v_norm = np.maximum(np.linalg.norm(v_hat, axis=-1), cfg.min_closing_speed)
    t_go = r_norm / v_norm
    safe = r_norm >= cfg.min_range
    direction = np.where(safe[..., None], r_hat / np.where(safe, r_norm, 1.0)[..., None], 0.0)
    v_targ = -np.asarray(v_o)[..., None] * direction * (1.0 - np.exp(-t_go / tau))[..., None]
    return v_targ, t_go


def attitude_violation(euler, cfg):
    return np.any(np.abs(euler) > np.asarray(cfg.q_lim), axis=-1)


def landing_success(r, v, cfg, euler=None, w=None):
    """Landing-bonus test at touchdown; attitude/rate terms only when given."""
    ok = (
        (r[..., 2] < 0)
        & (np.linalg.norm(r, axis=-1) < cfg.r_lim)
        & (np.linalg.norm(v, axis=-1) < cfg.v_lim)
    )
    if euler is not None:
        ok &= np.all(np.abs(euler[..., 1:]) < cfg.q_land_lim, axis=-1)
    if w is not None:
        ok &= np.all(np.abs(w) < cfg.w_lim, axis=-1)
    return ok


def step_reward(r, v, v_targ, thrust_norm, cfg, terminal, euler=None, w=None):
    """Split reward ``(r1, r2)`` for one step.

    `thrust_norm` is the body force magnitude in newtons; it is expressed as
    a fraction of ``cfg.max_total_thrust`` before weighting. Attitude terms
    apply only when `euler` ([yaw, pitch, roll]) is given; yaw is never
    penalised by the margin term.
    """
    r2 = (
        cfg.alpha * np.linalg.norm(np.asarray(v) - v_targ, axis=-1)
        + cfg.beta * np.asarray(thrust_norm) / cfg.max_total_thrust
        + cfg.eta
    )
    if euler is not None:
        r2 = r2 + cfg.gamma_att * attitude_violation(euler, cfg)
        excess = np.maximum(0.0, np.abs(euler[..., 1:]) - np.asarray(cfg.q_mgn[1:]))
        r2 = r2 + cfg.delta * excess.sum(axis=-1)
    r1 = np.where(np.asarray(terminal) & landing_success(r, v, cfg, euler, w), cfg.kappa, 0.0)
    return r1, r2


def glideslope_ratio(v, cap=1000.0):
    """|v_z| / ||(v_x, v_y)||, capped (vertical motion reports `cap`)."""
    v = np.asarray(v, dtype=float)
    horiz = np.linalg.norm(v[..., :2], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(horiz > 0, np.abs(v[..., 2]) / np.where(horiz > 0, horiz, 1.0), np.inf)
    return np.minimum(ratio, cap)


def glideslope_metric(altitude, v, cap=1000.0, band=2.0):
    """Mean glideslope ratio over samples with altitude in (0, band]."""
    altitude = np.asarray(altitude, dtype=float)
    mask = (altitude > 0) & (altitude <= band)
    if not np.any(mask):
        raise ValueError("no trajectory samples inside the glideslope band")
    return float(np.mean(glideslope_ratio(np.asarray(v)[mask], cap)))


def build_observation(v, v_targ, t_go, altitude, q=None, w=None):
    """``[v - v_targ, q, w, r_z, t_go]``; q and w omitted for the 3-DOF model."""
    parts = [np.asarray(v) - v_targ]
    if q is not None:
        parts += [np.asarray(q), np.asarray(w)]
    parts += [np.asarray(altitude)[..., None], np.asarray(t_go)[..., None]]
    return np.concatenate(parts, axis=-1)


@dataclass
class StepOutcome:
    observation: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    done: np.ndarray
    cause: np.ndarray
    info: dict


# --------------------------------------------------------------------------
# environments
# --------------------------------------------------------------------------


class _DescentEnv:
    obs_dim = 0
    act_dim = 0
    state_dim = 0

    def __init__(self, config=None, n_envs=1):
        self.config = config if config is not None else EnvConfig.training()
        self.n_envs = int(n_envs)
        self.rngs = [None] * self.n_envs
        self.x = None
        self.done = np.ones(self.n_envs, dtype=bool)

    # -- episode bookkeeping ------------------------------------------------
    def reset(self, seeds):
        """Start a fresh episode in every slot; `seeds` has one entry per slot.

        Entries may be ints, ``SeedSequence`` objects or ``Generator`` objects.
        """
        if len(seeds) != self.n_envs:
            raise ValueError(f"expected {self.n_envs} seeds, got {len(seeds)}")
        cfg = self.config
        n = self.n_envs
        self.rngs = [s if isinstance(s, np.random.Generator) else np.random.default_rng(s) for s in seeds]
        x6 = np.zeros((n, dyn.STATE_DIM))
        gravity = np.zeros((n, 3))
        inertia_noise = np.zeros((n, 3, 3))
        self.force_mean = np.zeros((n, 3))
        for i, rng in enumerate(self.rngs):
            x6[i] = sample_initial_state(cfg.initial_conditions, rng)
            m0, g, noise = sample_uncertainty(
                cfg.uncertainty, rng, cfg.params,
                perturb_mass=cfg.perturb_mass, perturb_gravity=cfg.perturb_gravity,
                perturb_inertia=cfg.perturb_inertia and self.state_dim == dyn.STATE_DIM,
                nominal_mass=cfg.nominal_mass,
            )
            x6[i, dyn.M] = m0
            gravity[i] = g
            inertia_noise[i] = noise
            if cfg.force_noise:
                b = cfg.uncertainty.force_mean_bound
                self.force_mean[i] = rng.uniform(-b, b, 3)
        self.params = replace(cfg.params, gravity=gravity, inertia_noise=inertia_noise)
        self.x = self._from_full_state(x6)
        self.m0 = x6[:, dyn.M].copy()
        self.v_o = np.linalg.norm(x6[:, dyn.V], axis=1)
        self.target_offset = np.zeros((n, 3))
        self.divert_triggered = np.zeros(n, dtype=bool)
        self.done = np.zeros(n, dtype=bool)
        self.cause = np.full(n, RUNNING, dtype=object)
        self.steps = np.zeros(n, dtype=int)
        self.fuel_exhausted = np.zeros(n, dtype=bool)
        self.gs_sum = np.zeros(n)
        self.gs_count = np.zeros(n, dtype=int)
        self.t = 0.0
        obs, _, _ = self._observe()
        self.observation = obs
        return obs

    @property
    def position(self):
        return self.x[:, 0:3]

    @property
    def velocity(self):
        return self.x[:, 3:6]

    @property
    def mass(self):
        return self.x[:, -1]

    @property
    def relative_position(self):
        """Position with respect to the (possibly diverted) target."""
        return self.position + self.target_offset

    @property
    def fuel_used(self):
        return self.m0 - self.mass

    def _observe(self):
        r = self.relative_position
        v_targ, t_go = target_velocity(r, self.velocity, self.v_o, self.config.shaping)
        return self._build_obs(v_targ, t_go), v_targ, t_go

    def _disturbance(self, active):
        force = np.zeros((self.n_envs, 3))
        if self.config.force_noise:
            std = self.config.uncertainty.force_std
            for i in np.flatnonzero(active):
                force[i] = self.force_mean[i] + std * self.rngs[i].standard_normal(3)
        return dyn.Disturbance(force=force, torque=np.zeros((self.n_envs, 3)))

    def step(self, action):
        """Advance every active slot by one guidance period.

        A 1-D `action` is accepted when ``n_envs == 1`` and yields an outcome
        with the batch axis removed.
        """
        action = np.asarray(action, dtype=float)
        squeeze = action.ndim == 1
        if squeeze:
            if self.n_envs != 1:
                raise ValueError("1-D action only allowed with a single slot")
            action = action[None, :]
        if action.shape != (self.n_envs, self.act_dim):
            raise ValueError(f"action shape {action.shape} != {(self.n_envs, self.act_dim)}")
        if self.x is None or np.all(self.done):
            raise RuntimeError("step() called on finished episode; call reset()")
        cfg = self.config
        sh = cfg.shaping
        active = ~self.done

        command, force_norm = self._map_action(action)
        exhausted = self.mass <= cfg.params.dry_mass
        self.fuel_exhausted |= exhausted & active
        command[exhausted] = 0.0
        force_norm = np.where(exhausted, 0.0, force_norm)
        dist = self._disturbance(active)

        idx = np.flatnonzero(active)
        params = replace(
            self.params, gravity=self.params.gravity[idx], inertia_noise=self.params.inertia_noise[idx]
        )
        dist = dyn.Disturbance(dist.force[idx], dist.torque[idx])
        x = self.x[idx]
        h = cfg.guidance_period / cfg.substeps
        for _ in range(cfg.substeps):
            x = self._rk4(x, command[idx], h, dist, params)
        self.x = self.x.copy()
        self.x[idx] = x
        self.steps += active
        self.t += cfg.guidance_period

        if cfg.divert_offset is not None:
            fire = active & ~self.divert_triggered & (self.position[:, 2] <= cfg.divert_altitude)
            self.target_offset[fire] = np.asarray(cfg.divert_offset, float)
            self.divert_triggered |= fire

        obs, v_targ, t_go = self._observe()
        r = self.relative_position
        v = self.velocity
        euler, w = self._attitude()

        ground = r[:, 2] <= 0
        violated = attitude_violation(euler, sh) if euler is not None else np.zeros(self.n_envs, bool)
        timeout = self.steps >= cfg.timeout_steps
        terminal = active & (ground | violated | timeout)

        r1, r2 = step_reward(r, v, v_targ, force_norm, sh, terminal, euler, w)
        r1 = np.where(active, r1, 0.0)
        r2 = np.where(active, r2, 0.0)

        band = active & (r[:, 2] > 0) & (r[:, 2] <= 2.0)
        if np.any(band):
            ratio = glideslope_ratio(v[band], cfg.glideslope_cap)
            self.gs_sum[band] += ratio
            self.gs_count[band] += 1

        success = landing_success(r, v, sh, euler, w)
        cause = np.where(violated, ATTITUDE, np.where(ground, np.where(success, LANDED, GROUND_CONTACT), TIMEOUT))
        self.cause = np.where(terminal, cause, self.cause)
        self.done = self.done | terminal
        self.observation = np.where(active[:, None], obs, self.observation)

        info = {
            "active": active,
            "command": command,
            "v_targ": v_targ,
            "t_go": t_go,
            "fuel_used": self.fuel_used,
            "fuel_exhausted": self.fuel_exhausted.copy(),
            "divert_triggered": self.divert_triggered.copy(),
        }
        out = StepOutcome(self.observation.copy(), r1, r2, self.done.copy(), self.cause.copy(), info)
        if squeeze:
            out = StepOutcome(
                out.observation[0], float(r1[0]), float(r2[0]), bool(out.done[0]), out.cause[0],
                {k: val[0] for k, val in info.items()},
            )
        return out

    def glideslope(self):
        """Per-slot mean glideslope over the final 2 m (NaN when never sampled)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.gs_count > 0, self.gs_sum / np.maximum(self.gs_count, 1), np.nan)


class LanderEnv(_DescentEnv):
    """6-DOF lander with four body-fixed throttleable engines.

    Actions are per-engine throttle fractions; each is clipped to
    ``[t_min / t_max, 1]`` and multiplied by ``t_max``.
    """

    obs_dim = 12
    act_dim = 4
    state_dim = dyn.STATE_DIM

    def _from_full_state(self, x6):
        return x6

    def _map_action(self, action):
        layout = self.config.params.layout
        u = np.clip(action, layout.t_min / layout.t_max, 1.0)
        t_cmd = u * layout.t_max
        force = dyn.thruster_wrench(layout, t_cmd).force
        return t_cmd, np.linalg.norm(force, axis=-1)

    def _rk4(self, x, command, h, dist, params):
        return dyn.rk4_step(x, command, params, h, dist)

    def _attitude(self):
        return dyn.quaternion_to_euler(self.x[:, dyn.Q]), self.x[:, dyn.W]

    def _build_obs(self, v_targ, t_go):
        return build_observation(
            self.velocity, v_targ, t_go, self.relative_position[:, 2], self.x[:, dyn.Q], self.x[:, dyn.W]
        )

    @property
    def euler(self):
        return dyn.quaternion_to_euler(self.x[:, dyn.Q])


class LanderEnv3DOF(_DescentEnv):
    """Point-mass lander commanded by an inertial thrust vector.

    Actions in ``[-1, 1]^3`` are scaled by the maximum total thrust and the
    resulting magnitude is clipped into ``[min_3dof_thrust, max_3dof_thrust]``
    with the direction preserved.
    """

    obs_dim = 5
    act_dim = 3
    state_dim = dyn.POINT_STATE_DIM

    def _from_full_state(self, x6):
        return np.concatenate([x6[:, 0:6], x6[:, dyn.M:dyn.M + 1]], axis=1)

    def _map_action(self, action):
        thrust = clip_thrust_vector(
            np.clip(action, -1.0, 1.0) * self.config.max_3dof_thrust,
            self.config.min_3dof_thrust, self.config.max_3dof_thrust,
        )
        return thrust, np.linalg.norm(thrust, axis=-1)

    def _rk4(self, x, command, h, dist, params):
        return dyn.rk4_step_3dof(x, command, params, h, dist)

    def _attitude(self):
        return None, None

    def _build_obs(self, v_targ, t_go):
        return build_observation(self.velocity, v_targ, t_go, self.relative_position[:, 2])


def clip_thrust_vector(thrust, t_min, t_max):
    """Clip vector magnitudes into [t_min, t_max]; zero vectors point up."""
    thrust = np.array(thrust, dtype=float)
    norm = np.linalg.norm(thrust, axis=-1, keepdims=True)
    zero = norm[..., 0] == 0
    thrust[zero] = [0.0, 0.0, t_min]
    norm = np.where(zero[..., None], t_min, norm)
    return thrust * (np.clip(norm, t_min, t_max) / norm)


def make_env(kind, config=None, n_envs=1):
    if kind == "6dof":
        return LanderEnv(config, n_envs)
    if kind == "3dof":
        return LanderEnv3DOF(config, n_envs)
    raise ValueError(f"unknown environment kind {kind!r}")


def episode_seed(master_seed, index):
    """Seed sequence for episode `index`, reproducible in isolation."""
    return np.random.SeedSequence([int(master_seed), int(index)])
