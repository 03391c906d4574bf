"""
Proximal policy optimisation with separate discount rates for the landing
bonus (``r1``) and the shaping terms (``r2``).

Advantages are plain empirical returns minus the value baseline; GAE is not
used because it has no form with two discount rates. The clip parameter and
a step-size multiplier on the policy optimiser are adapted after each update
to hold the measured KL near its target.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter
from sklearn.base import BaseEstimator

from . import __version__
from .environment import EnvConfig, episode_seed, make_env
from .neuralnet import (
    Adam,
    GaussianPolicy,
    RunningScaler,
    ValueFunction,
    kl_approx,
    load_params,
    save_params,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class PPOConfig:
    gamma1: float = 0.996
    gamma2: float = 0.95
    kl_target: float = 0.001
    clip_init: float = 0.2
    clip_min: float = 0.01
    clip_max: float = 0.5
    zeta_init: float = 1.0
    zeta_min: float = 0.1
    zeta_max: float = 10.0
    batch_episodes: int = 120
    epochs: int = 20
    value_epochs: int = 20
    minibatch_size: int = 256
    episode_budget: int = 300_000
    policy_lr: float = 1e-4
    value_lr: float = 1e-3
    divergence_factor: float = 50.0
    log_std_init: float = math.log(0.6)
    scaler_eps: float = 1e-3
    scaler_warmup_episodes: int = 10

    def __post_init__(self):
        if not 0 <= self.gamma2 <= self.gamma1 < 1:
            raise ValueError("need 0 <= gamma2 <= gamma1 < 1")
        if not self.clip_min <= self.clip_init <= self.clip_max:
            raise ValueError("clip_init outside [clip_min, clip_max]")
        if not self.zeta_min <= self.zeta_init <= self.zeta_max:
            raise ValueError("zeta_init outside [zeta_min, zeta_max]")

    @property
    def value_scale(self):
        return 1.0 - self.gamma2


# --------------------------------------------------------------------------
# returns, advantages, objectives
# --------------------------------------------------------------------------


def discounted_sum(r, gamma):
    """``G_k = sum_{l>=k} gamma^(l-k) r_l`` for one episode."""
    r = np.asarray(r, dtype=float)
    return lfilter([1.0], [1.0, -gamma], r[::-1])[::-1]


def dual_discount_returns(r1, r2, gamma1, gamma2):
    """Per-step return with `r1` discounted by `gamma1` and `r2` by `gamma2`."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    if r1.shape != r2.shape:
        raise ValueError("r1 and r2 must have the same length")
    return discounted_sum(r1, gamma1) + discounted_sum(r2, gamma2)


def batch_returns(batch, gamma1, gamma2):
    out = np.empty(len(batch.r1))
    for sl in batch.episode_slices():
        out[sl] = dual_discount_returns(batch.r1[sl], batch.r2[sl], gamma1, gamma2)
    return out


def normalize(x, eps=1e-8):
    x = np.asarray(x, dtype=float)
    return (x - x.mean()) / (x.std() + eps)


def advantages(returns, values, normalized=True):
    """``A_k = G_k - V(x_k)``, optionally standardised over the batch."""
    adv = np.asarray(returns, float) - np.asarray(values, float)
    return normalize(adv) if normalized else adv


def ppo_surrogate(old_logp, new_logp, adv, clip):
    """Mean clipped surrogate ``min(p A, clip(p, 1-e, 1+e) A)``."""
    with np.errstate(over="ignore"):
        ratio = np.exp(np.asarray(new_logp, float) - np.asarray(old_logp, float))
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite probability ratio")
    adv = np.asarray(adv, float)
    return float(np.mean(np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)))


def surrogate_logp_weights(old_logp, new_logp, adv, clip):
    """d(surrogate)/d(new_logp) per sample (zero where the clipped branch binds)."""
    with np.errstate(over="ignore"):
        ratio = np.exp(new_logp - old_logp)
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite probability ratio")
    unclipped = ratio * adv <= np.clip(ratio, 1 - clip, 1 + clip) * adv
    return np.where(unclipped, ratio * adv, 0.0) / len(adv)


def value_loss(predictions, targets):
    predictions = np.asarray(predictions, float)
    return float(np.mean((predictions - np.asarray(targets, float)) ** 2))


def explained_variance(targets, predictions):
    targets = np.asarray(targets, float)
    var = np.var(targets)
    resid = np.var(targets - np.asarray(predictions, float))
    if var == 0:
        return 1.0 if resid == 0 else float("nan")
    with np.errstate(over="ignore"):  # tiny var: -inf is the honest answer
        return float(1.0 - resid / var)


def adapt_clip(kl, clip, cfg):
    if kl < 0.5 * cfg.kl_target:
        return min(cfg.clip_max, 1.5 * clip)
    if kl > 2.0 * cfg.kl_target:
        return max(cfg.clip_min, clip / 1.5)
    return clip


def adapt_step_multiplier(kl, clip, zeta, cfg):
    if kl < 0.5 * cfg.kl_target and clip > 0.5 * cfg.clip_max and zeta < cfg.zeta_max:
        return min(cfg.zeta_max, 1.5 * zeta)
    if kl > 2.0 * cfg.kl_target and clip < 2.0 * cfg.clip_min and zeta > cfg.zeta_min:
        return max(cfg.zeta_min, zeta / 1.5)
    return zeta


# --------------------------------------------------------------------------
# rollouts
# --------------------------------------------------------------------------


@dataclass
class RolloutBatch:
    """Steps stored episode-contiguously, in step order within each episode."""

    obs_raw: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    episode: np.ndarray
    step: np.ndarray
    lengths: np.ndarray
    terminal: dict = field(default_factory=dict)

    def episode_slices(self):
        ends = np.cumsum(self.lengths)
        return [slice(e - n, e) for e, n in zip(ends, self.lengths)]

    def __len__(self):
        return len(self.r1)


def terminal_summary(env):
    """Terminal quantities of every slot of a finished batch."""
    out = {
        "r": env.relative_position.copy(),
        "v": env.velocity.copy(),
        "fuel": env.fuel_used.copy(),
        "cause": env.cause.copy(),
        "steps": env.steps.copy(),
        "glideslope": env.glideslope(),
    }
    if hasattr(env, "euler"):
        out["euler"] = env.euler
        out["w"] = env.x[:, 10:13].copy()
    return out


def collect_rollouts(policy, scale, env, seeds, episode_ids):
    """Run one stochastic episode per slot and return a :class:`RolloutBatch`.

    `scale` maps raw observations to network inputs. Exploration noise is
    drawn from each slot's own generator.
    """
    obs = env.reset(seeds)
    rec = {k: [] for k in ("raw", "obs", "act", "logp", "r1", "r2", "ep", "step")}
    t = 0
    while not np.all(env.done):
        idx = np.flatnonzero(~env.done)
        sobs = scale(obs[idx])
        act, logp = policy.sample(sobs, [env.rngs[i] for i in idx])
        full = np.zeros((env.n_envs, env.act_dim))
        full[idx] = act
        out = env.step(full)
        rec["raw"].append(obs[idx])
        rec["obs"].append(sobs)
        rec["act"].append(act)
        rec["logp"].append(logp)
        rec["r1"].append(out.r1[idx])
        rec["r2"].append(out.r2[idx])
        rec["ep"].append(np.asarray(episode_ids)[idx])
        rec["step"].append(np.full(len(idx), t))
        obs = out.observation
        t += 1
    cat = {k: np.concatenate(v) for k, v in rec.items()}
    order = np.lexsort((cat["step"], cat["ep"]))
    return RolloutBatch(
        obs_raw=cat["raw"][order], obs=cat["obs"][order], actions=cat["act"][order],
        logp=cat["logp"][order], r1=cat["r1"][order], r2=cat["r2"][order],
        episode=cat["ep"][order], step=cat["step"][order],
        lengths=env.steps[np.argsort(episode_ids, kind="stable")].copy(),
        terminal=terminal_summary(env),
    )


# --------------------------------------------------------------------------
# update
# --------------------------------------------------------------------------


@dataclass
class TrainerState:
    clip: float
    zeta: float
    value_zeta: float = 1.0
    episodes: int = 0
    updates: int = 0


def _minibatches(n, size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def update(batch, policy, value, opt_policy, opt_value, state, cfg, rng):
    """One PPO update on a full batch; mutates the networks and `state`.

    Returns a dict of diagnostics for the training log.
    """
    g = batch_returns(batch, cfg.gamma1, cfg.gamma2)
    targets = cfg.value_scale * g
    v_pred = value.predict(batch.obs)
    ev = explained_variance(targets, v_pred)
    adv = advantages(targets, v_pred)

    pre_logp = policy.log_prob(batch.obs, batch.actions)
    n = len(batch)
    kl = 0.0
    epochs_run = 0
    for _ in range(cfg.epochs):
        for mb in _minibatches(n, cfg.minibatch_size, rng):
            new_logp = policy.log_prob(batch.obs[mb], batch.actions[mb])
            w = surrogate_logp_weights(batch.logp[mb], new_logp, adv[mb], state.clip)
            grads = policy.log_prob_gradients(batch.obs[mb], batch.actions[mb], -w)
            opt_policy.step(policy.params, grads, state.zeta)
            policy.clamp()
        epochs_run += 1
        kl = kl_approx(pre_logp, policy.log_prob(batch.obs, batch.actions))
        if kl > cfg.divergence_factor * cfg.kl_target:
            log.debug("KL %.3g above divergence guard; stopping epochs", kl)
            break
    surrogate = ppo_surrogate(batch.logp, policy.log_prob(batch.obs, batch.actions), adv, state.clip)

    for _ in range(cfg.value_epochs):
        for mb in _minibatches(n, cfg.minibatch_size, rng):
            _, grads = value.mse_gradients(batch.obs[mb], targets[mb])
            opt_value.step(value.params, grads, state.value_zeta)
    vloss = value_loss(value.predict(batch.obs), targets)
    if not (math.isfinite(vloss) and math.isfinite(surrogate)):
        raise FloatingPointError("non-finite loss")

    clip_used, zeta_used = state.clip, state.zeta
    state.clip = adapt_clip(kl, state.clip, cfg)
    state.zeta = adapt_step_multiplier(kl, state.clip, state.zeta, cfg)
    state.updates += 1
    return {
        "kl": kl,
        "entropy": policy.entropy(),
        "explained_variance": ev,
        "surrogate": surrogate,
        "value_loss": vloss,
        "clip": clip_used,
        "zeta": zeta_used,
        "epochs": epochs_run,
    }


# --------------------------------------------------------------------------
# training log
# --------------------------------------------------------------------------

LOG_COLUMNS = [
    "update", "episodes", "reward_mean", "reward_std", "reward_min", "steps_mean",
    "kl", "entropy", "explained_variance", "surrogate", "value_loss", "clip", "zeta", "epochs",
    "success_rate", "r_norm_mean", "r_norm_std", "v_norm_mean", "v_norm_std",
    "attitude_mean", "attitude_std", "w_norm_mean", "w_norm_std", "fuel_mean",
]


class TrainLog:
    """Append-only table of per-update statistics."""

    def __init__(self):
        self.rows = []

    def append(self, row):
        self.rows.append({k: row.get(k, float("nan")) for k in LOG_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for row in self.rows:
                writer.writerow([_fmt(row[k]) for k in LOG_COLUMNS])


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def batch_statistics(batch, success_fn):
    ep_reward = np.add.reduceat(batch.r1 + batch.r2, np.r_[0, np.cumsum(batch.lengths)[:-1]])
    term = batch.terminal
    r_norm = np.linalg.norm(term["r"], axis=1)
    v_norm = np.linalg.norm(term["v"], axis=1)
    row = {
        "reward_mean": ep_reward.mean(),
        "reward_std": ep_reward.std(),
        "reward_min": ep_reward.min(),
        "steps_mean": batch.lengths.mean(),
        "success_rate": float(np.mean(success_fn(term))),
        "r_norm_mean": r_norm.mean(),
        "r_norm_std": r_norm.std(),
        "v_norm_mean": v_norm.mean(),
        "v_norm_std": v_norm.std(),
        "fuel_mean": term["fuel"].mean(),
    }
    if "euler" in term:
        att = np.linalg.norm(term["euler"][:, 1:], axis=1)
        w_norm = np.linalg.norm(term["w"], axis=1)
        row.update(attitude_mean=att.mean(), attitude_std=att.std(),
                   w_norm_mean=w_norm.mean(), w_norm_std=w_norm.std())
    return row


def pinpoint(term, r_lim=5.0, v_lim=2.0):
    """Touchdown inside the pinpoint envelope (position and speed only)."""
    landed = term["r"][:, 2] <= 0
    return (landed & (np.linalg.norm(term["r"], axis=1) < r_lim)
            & (np.linalg.norm(term["v"], axis=1) < v_lim))


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------


class PPOLander(BaseEstimator):
    """Gaussian-policy PPO agent for the lander environments.

    ``fit`` trains against freshly built environments; ``predict`` maps raw
    observations to the deterministic (mean) action, i.e. exploration off.

    Parameters
    ----------
    env : {"3dof", "6dof"}
    episode_budget : int
        Total training episodes, including the scaler warm-up.
    random_state : int
        Master seed. Episode ``i`` is seeded from ``(random_state, i)``.
    checkpoint_dir : str or None
        Where periodic checkpoints go; every `checkpoint_every` updates.
    """

    def __init__(self, env="3dof", gamma1=0.996, gamma2=0.95, kl_target=0.001, clip_init=0.2,
                 clip_min=0.01, clip_max=0.5, zeta_min=0.1, zeta_max=10.0, batch_episodes=120,
                 epochs=20, value_epochs=20, minibatch_size=256, episode_budget=300_000,
                 policy_lr=1e-4, value_lr=1e-3, log_std_init=math.log(0.6), scaler_eps=1e-3,
                 scaler_warmup_episodes=10, divergence_factor=50.0, random_state=0,
                 checkpoint_dir=None, checkpoint_every=0, env_config=None):
        self.env = env
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.kl_target = kl_target
        self.clip_init = clip_init
        self.clip_min = clip_min
        self.clip_max = clip_max
        self.zeta_min = zeta_min
        self.zeta_max = zeta_max
        self.batch_episodes = batch_episodes
        self.epochs = epochs
        self.value_epochs = value_epochs
        self.minibatch_size = minibatch_size
        self.episode_budget = episode_budget
        self.policy_lr = policy_lr
        self.value_lr = value_lr
        self.log_std_init = log_std_init
        self.scaler_eps = scaler_eps
        self.scaler_warmup_episodes = scaler_warmup_episodes
        self.divergence_factor = divergence_factor
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir
        self.checkpoint_every = checkpoint_every
        self.env_config = env_config

    # -- setup ----------------------------------------------------------------
    def make_config(self):
        names = PPOConfig.__dataclass_fields__
        return PPOConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def _init_networks(self, obs_dim, act_dim):
        seed = np.random.SeedSequence([int(self.random_state), 0x5EED])
        rng_pol, rng_val, rng_upd = (np.random.default_rng(s) for s in seed.spawn(3))
        self.policy_ = GaussianPolicy(obs_dim, act_dim, rng_pol, self.log_std_init)
        self.value_ = ValueFunction(obs_dim, rng_val)
        self.scaler_ = RunningScaler(eps=self.scaler_eps)
        self._update_rng = rng_upd

    def scale(self, obs):
        if not hasattr(self.scaler_, "mean_"):
            return np.asarray(obs, float)
        return self.scaler_.transform(obs)

    # -- training --------------------------------------------------------------
    def fit(self, env_factory=None, callback=None):
        """Train until the episode budget is spent.

        Parameters
        ----------
        env_factory : callable(n_envs) -> environment, optional
            Defaults to the training configuration of ``self.env``. Network
            sizes follow the environment's ``obs_dim`` and ``act_dim``.
        callback : callable(agent, row), optional
            Called after every update with the new log row.
        """
        cfg = self.make_config()
        if env_factory is None:
            env_config = self.env_config or EnvConfig.training()
            env_factory = lambda n: make_env(self.env, env_config, n)  # noqa: E731
        envs = {}

        def env_for(n):
            if n not in envs:
                envs[n] = env_factory(n)
            return envs[n]

        probe = env_for(max(1, min(cfg.batch_episodes, cfg.episode_budget)))
        self._init_networks(probe.obs_dim, probe.act_dim)
        self.config_ = cfg
        self.state_ = TrainerState(clip=cfg.clip_init, zeta=cfg.zeta_init)
        self.log_ = TrainLog()
        self.wall_time_ = []
        opt_p = Adam(self.policy_.params, lr=cfg.policy_lr)
        opt_v = Adam(self.value_.params, lr=cfg.value_lr)

        warm = min(cfg.scaler_warmup_episodes, cfg.episode_budget)
        if warm > 0:
            ids = np.arange(warm)
            batch = collect_rollouts(self.policy_, self.scale, env_for(warm),
                                     [episode_seed(self.random_state, i) for i in ids], ids)
            self.scaler_.partial_fit(batch.obs_raw)
            self.state_.episodes = warm

        t0 = time.perf_counter()
        while self.state_.episodes < cfg.episode_budget:
            n = min(cfg.batch_episodes, cfg.episode_budget - self.state_.episodes)
            ids = np.arange(self.state_.episodes, self.state_.episodes + n)
            env = env_for(n)
            batch = collect_rollouts(self.policy_, self.scale, env,
                                     [episode_seed(self.random_state, i) for i in ids], ids)
            self.state_.episodes += n
            try:
                diag = update(batch, self.policy_, self.value_, opt_p, opt_v, self.state_, cfg,
                              self._update_rng)
            except FloatingPointError as exc:
                self._dump_diagnostics(batch, exc)
                raise TrainingError(f"non-finite values during update {self.state_.updates}: {exc}") from exc
            self.scaler_.partial_fit(batch.obs_raw)
            row = {"update": self.state_.updates, "episodes": self.state_.episodes}
            row.update(batch_statistics(batch, pinpoint))
            row.update(diag)
            self.log_.append(row)
            self.wall_time_.append(time.perf_counter() - t0)
            if callback is not None:
                callback(self, self.log_.rows[-1])
            if self.checkpoint_dir and self.checkpoint_every and self.state_.updates % self.checkpoint_every == 0:
                self.save(os.path.join(self.checkpoint_dir, f"checkpoint_{self.state_.episodes:07d}.json"))
        return self

    def _dump_diagnostics(self, batch, exc):
        if not self.checkpoint_dir:
            return
        os.makedirs(self.checkpoint_dir, exist_ok=True)
        path = os.path.join(self.checkpoint_dir, "diagnostic_dump.json")
        with open(path, "w") as fh:
            json.dump({
                "error": str(exc),
                "update": self.state_.updates,
                "episodes": self.state_.episodes,
                "state": asdict(self.state_),
                "log_std": self.policy_.log_std.tolist(),
                "reward_r1_sum": float(np.sum(batch.r1)),
                "reward_r2_sum": float(np.sum(batch.r2)),
                "obs_finite": bool(np.all(np.isfinite(batch.obs))),
            }, fh)
        log.error("wrote diagnostic dump to %s", path)

    # -- inference --------------------------------------------------------------
    def predict(self, obs):
        """Mean action for raw observations (exploration off)."""
        obs = np.asarray(obs, float)
        return self.policy_.mean(self.scale(obs))

    def sample(self, obs, rng):
        return self.policy_.sample(self.scale(np.asarray(obs, float)), rng)

    def act(self, env):
        return self.predict(env.observation)

    # -- persistence --------------------------------------------------------------
    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        payload = {
            "kind": "ppo-lander",
            "code_version": __version__,
            "env": self.env,
            "hyperparameters": {k: v for k, v in self.get_params().items()
                                if k not in ("env", "env_config", "checkpoint_dir")},
            "episodes": int(self.state_.episodes) if hasattr(self, "state_") else 0,
            "updates": int(self.state_.updates) if hasattr(self, "state_") else 0,
            "clip": float(self.state_.clip) if hasattr(self, "state_") else self.clip_init,
            "zeta": float(self.state_.zeta) if hasattr(self, "state_") else 1.0,
            "policy": self.policy_.to_dict(),
            "value": self.value_.to_dict(),
            "scaler": self.scaler_.to_dict() if hasattr(self.scaler_, "mean_") else None,
        }
        save_params(path, payload)

    @classmethod
    def load(cls, path):
        try:
            rec = load_params(path)
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot load checkpoint {path}: {exc}") from exc
        if rec.get("kind") != "ppo-lander":
            raise ValueError(f"{path}: not a PPO lander checkpoint")
        hyper = {k: v for k, v in rec["hyperparameters"].items() if k != "env"}
        agent = cls(env=rec["env"], **hyper)
        agent.policy_ = GaussianPolicy.from_dict(rec["policy"])
        agent.value_ = ValueFunction.from_dict(rec["value"])
        agent.scaler_ = (RunningScaler.from_dict(rec["scaler"]) if rec["scaler"]
                         else RunningScaler(eps=agent.scaler_eps))
        agent.state_ = TrainerState(clip=rec["clip"], zeta=rec["zeta"],
                                    episodes=rec["episodes"], updates=rec["updates"])
        return agent


def train(env_factory=None, cfg=None, seed=0, env="3dof", **kwargs):
    """Functional wrapper: returns ``(agent, train_log)``."""
    params = asdict(cfg) if cfg is not None else {}
    params = {k: v for k, v in params.items() if k in PPOLander().get_params()}
    params.update(kwargs)
    agent = PPOLander(env=env, random_state=seed, **params).fit(env_factory)
    return agent, agent.log_
