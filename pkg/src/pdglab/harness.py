"""
Monte Carlo evaluation, touchdown statistics, divert experiments, CSV export
and the flat ``key = value`` experiment configuration format.

A *policy* here is any object with ``act(env) -> actions`` returning one row
per environment slot; :class:`~pdglab.ppo.PPOLander` and
:class:`~pdglab.guidance_baseline.DRDVGuidance` both qualify.
"""

from __future__ import annotations

import csv
import json
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from .environment import (
    ELLIPSES,
    RUNNING,
    EnvConfig,
    ShapingConfig,
    episode_seed,
    landing_success,
    make_env,
    target_velocity,
)


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    """Terminal summary of one episode. Attitude fields are NaN for 3-DOF."""

    index: int
    r: np.ndarray
    v: np.ndarray
    euler: np.ndarray
    w: np.ndarray
    m0: float
    m_final: float
    glideslope: float
    steps: int
    cause: str
    divert_triggered: bool = False
    fuel_exhausted: bool = False

    @property
    def fuel(self):
        return self.m0 - self.m_final

    @property
    def completed(self):
        return self.cause != RUNNING


@dataclass
class TrajectoryRecord:
    """Per-step history of one episode (state before each guidance step)."""

    index: int
    time: np.ndarray
    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray
    m: np.ndarray
    command: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    v_targ: np.ndarray

    def __len__(self):
        return len(self.time)


def _run_chunk(policy, kind, env_config, seed, indices, record):
    indices = np.asarray(indices, dtype=int)
    env = make_env(kind, env_config, len(indices))
    env.reset([episode_seed(seed, int(i)) for i in indices])
    m0 = env.mass.copy()
    six = kind == "6dof"
    hist = []
    while not np.all(env.done):
        active = ~env.done
        if record:
            x = env.x.copy()
            offset = env.target_offset.copy()
            v_targ, _ = target_velocity(env.relative_position, env.velocity, env.v_o, env_config.shaping)
        out = env.step(policy.act(env))
        if record:
            hist.append((active, env.t - env_config.guidance_period, x, v_targ,
                         out.info["command"], out.r1, out.r2, offset))
    euler = env.euler if six else np.full((len(indices), 3), np.nan)
    w = env.x[:, 10:13] if six else np.full((len(indices), 3), np.nan)
    gs = env.glideslope()
    episodes = [
        EpisodeRecord(
            index=int(i), r=env.relative_position[k].copy(), v=env.velocity[k].copy(),
            euler=euler[k].copy(), w=w[k].copy(), m0=float(m0[k]), m_final=float(env.mass[k]),
            glideslope=float(gs[k]), steps=int(env.steps[k]), cause=str(env.cause[k]),
            divert_triggered=bool(env.divert_triggered[k]), fuel_exhausted=bool(env.fuel_exhausted[k]),
        )
        for k, i in enumerate(indices)
    ]
    trajectories = [_trajectory(hist, k, int(i), six) for k, i in enumerate(indices)] if record else []
    return episodes, trajectories


def _trajectory(hist, k, index, six):
    rows = [h for h in hist if h[0][k]]
    x = np.array([h[2][k] for h in rows])
    offset = np.array([h[7][k] for h in rows])
    nan4 = np.full((len(rows), 4), np.nan)
    nan3 = np.full((len(rows), 3), np.nan)
    return TrajectoryRecord(
        index=index,
        time=np.array([h[1] for h in rows]),
        r=x[:, 0:3] + offset,
        v=x[:, 3:6],
        q=x[:, 6:10] if six else nan4,
        w=x[:, 10:13] if six else nan3,
        m=x[:, -1],
        command=np.array([h[4][k] for h in rows]),
        r1=np.array([h[5][k] for h in rows]),
        r2=np.array([h[6][k] for h in rows]),
        v_targ=np.array([h[3][k] for h in rows]),
    )


def run_episodes(policy, kind, env_config, n, seed, *, record=False, workers=1, chunk_size=250):
    """Run episodes ``0 .. n-1`` and return ``(episodes, trajectories)``.

    Episode ``i`` is seeded from ``(seed, i)`` alone, so results do not depend
    on how episodes are grouped. With ``workers > 1`` chunks run in separate
    processes and are merged by episode index.
    """
    if n < 0:
        raise ValueError("episode count must be non-negative")
    chunks = [np.arange(a, min(a + chunk_size, n)) for a in range(0, n, chunk_size)]
    if workers <= 1 or len(chunks) <= 1:
        results = [_run_chunk(policy, kind, env_config, seed, c, record) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chunk, policy, kind, env_config, seed, c, record) for c in chunks]
            results = [f.result() for f in futures]
    episodes = sorted((e for res in results for e in res[0]), key=lambda e: e.index)
    trajectories = sorted((t for res in results for t in res[1]), key=lambda t: t.index)
    return episodes, trajectories


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

STAT_FIELDS = [
    "downrange", "crossrange", "altitude", "v_downrange", "v_crossrange", "v_vertical",
    "pitch", "roll", "w_x", "w_y", "w_z", "position_norm", "speed", "glideslope", "fuel",
]
STATS_COLUMNS = ["field", "count", "mean", "std", "min", "max"]


def _episode_values(e):
    return {
        "downrange": e.r[0], "crossrange": e.r[1], "altitude": e.r[2],
        "v_downrange": e.v[0], "v_crossrange": e.v[1], "v_vertical": e.v[2],
        "pitch": e.euler[1], "roll": e.euler[2],
        "w_x": e.w[0], "w_y": e.w[1], "w_z": e.w[2],
        "position_norm": float(np.linalg.norm(e.r)), "speed": float(np.linalg.norm(e.v)),
        "glideslope": e.glideslope, "fuel": e.fuel,
    }


@dataclass
class FieldStats:
    count: int
    mean: float
    std: float
    min: float
    max: float


@dataclass
class TouchdownStats:
    """Moments of terminal quantities over completed episodes.

    ``count == 0`` marks an empty result. NaN entries (attitude fields of a
    point-mass run, glideslope of an episode that never entered the band)
    are skipped per field, so each field carries its own count.
    """

    count: int
    excluded: int = 0
    fields: dict = field(default_factory=dict)
    success_rate: float = float("nan")
    pinpoint_rate: float = float("nan")

    @property
    def empty(self):
        return self.count == 0

    def __getitem__(self, name):
        return self.fields[name]


def compute_touchdown_stats(records, shaping=None):
    """Aggregate :class:`EpisodeRecord` objects into :class:`TouchdownStats`.

    Success uses every landing limit (position, speed and, for 6-DOF, pitch,
    roll and body rates). Pinpoint rate counts touchdowns (altitude <= 0)
    inside the position and speed limits only.
    """
    shaping = shaping or ShapingConfig()
    done = [e for e in records if e.completed]
    excluded = len(records) - len(done)
    if not done:
        return TouchdownStats(count=0, excluded=excluded,
                              fields={f: FieldStats(0, *[float("nan")] * 4) for f in STAT_FIELDS})
    values = [_episode_values(e) for e in done]
    out = {}
    for name in STAT_FIELDS:
        col = np.array([v[name] for v in values], dtype=float)
        col = col[~np.isnan(col)]
        if len(col) == 0:
            out[name] = FieldStats(0, *[float("nan")] * 4)
        else:
            out[name] = FieldStats(len(col), float(col.mean()), float(col.std()),
                                   float(col.min()), float(col.max()))
    r = np.array([e.r for e in done])
    v = np.array([e.v for e in done])
    euler = np.array([e.euler for e in done])
    w = np.array([e.w for e in done])
    six = not np.any(np.isnan(euler))
    success = landing_success(r, v, shaping, euler if six else None, w if six else None)
    pinpoint = ((r[:, 2] <= 0) & (np.linalg.norm(r, axis=1) < shaping.r_lim)
                & (np.linalg.norm(v, axis=1) < shaping.v_lim))
    return TouchdownStats(count=len(done), excluded=excluded, fields=out,
                          success_rate=float(success.mean()), pinpoint_rate=float(pinpoint.mean()))


def run_monte_carlo(policy, kind="3dof", env_config=None, n=1000, seed=0, *, record=False, workers=1):
    """Evaluate `policy` over `n` test-mode episodes.

    Returns ``(TouchdownStats, episodes, trajectories)``; trajectories are
    empty unless `record` is set.
    """
    env_config = env_config or EnvConfig.testing()
    episodes, trajectories = run_episodes(policy, kind, env_config, n, seed, record=record, workers=workers)
    return compute_touchdown_stats(episodes, env_config.shaping), episodes, trajectories


@dataclass
class DivertResult:
    nominal: TouchdownStats
    diverted: TouchdownStats
    fuel_delta_mean: float
    fuel_delta_std: float
    count: int
    never_triggered: list


def run_divert_experiment(policy, kind="3dof", env_config=None, n=1000, seed=0,
                          offset=(800.0, 800.0, 0.0), altitude=1500.0, workers=1):
    """Paired nominal/diverted Monte Carlo with identical episode seeds.

    Episodes whose divert never fires (the lander starts below the trigger
    altitude or ends before reaching it) are reported in `never_triggered`
    and excluded from both sides.
    """
    env_config = env_config or EnvConfig.testing()
    nominal, _ = run_episodes(policy, kind, replace(env_config, divert_offset=None), n, seed, workers=workers)
    diverted, _ = run_episodes(
        policy, kind, replace(env_config, divert_offset=tuple(offset), divert_altitude=altitude),
        n, seed, workers=workers)
    skip = {e.index for e in diverted if not e.divert_triggered}
    keep_n = [e for e in nominal if e.index not in skip and e.completed]
    keep_d = [e for e in diverted if e.index not in skip and e.completed]
    both = sorted({e.index for e in keep_n} & {e.index for e in keep_d})
    fn = {e.index: e.fuel for e in keep_n}
    fd = {e.index: e.fuel for e in keep_d}
    delta = np.array([fd[i] - fn[i] for i in both])
    return DivertResult(
        nominal=compute_touchdown_stats([e for e in keep_n if e.index in fd], env_config.shaping),
        diverted=compute_touchdown_stats([e for e in keep_d if e.index in fn], env_config.shaping),
        fuel_delta_mean=float(delta.mean()) if len(delta) else float("nan"),
        fuel_delta_std=float(delta.std()) if len(delta) else float("nan"),
        count=len(both),
        never_triggered=sorted(skip),
    )


# --------------------------------------------------------------------------
# CSV export
# --------------------------------------------------------------------------


def _f(x):
    return "%.17g" % x


def _io(path, mode):
    try:
        return open(path, mode, newline="")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def trajectory_columns(n_command):
    return (["t", "rx", "ry", "rz", "vx", "vy", "vz", "q1", "q2", "q3", "q4", "wx", "wy", "wz", "m"]
            + [f"cmd{i + 1}" for i in range(n_command)]
            + ["r1", "r2", "vtx", "vty", "vtz"])


def export_trajectory(record, path):
    """Write one episode as CSV.

    Columns: time, target-relative position, velocity, quaternion, body
    rates, mass, the commands (4 engine thrusts for 6-DOF, the inertial thrust
    vector for 3-DOF), both reward parts and the target velocity.
    """
    n_cmd = record.command.shape[1]
    cols = trajectory_columns(n_cmd)
    data = np.column_stack([record.time, record.r, record.v, record.q, record.w, record.m,
                            record.command, record.r1, record.r2, record.v_targ])
    with _io(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        writer.writerows([_f(x) for x in row] for row in data)


def read_trajectory(path, index=0):
    with _io(path, "r") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(x) for x in row] for row in reader]).reshape(-1, len(header))
    n_cmd = len(header) - len(trajectory_columns(0))
    if header != trajectory_columns(n_cmd):
        raise ValueError(f"{path}: unexpected trajectory header")
    c = 15 + n_cmd
    return TrajectoryRecord(index, data[:, 0], data[:, 1:4], data[:, 4:7], data[:, 7:11],
                            data[:, 11:14], data[:, 14], data[:, 15:c], data[:, c], data[:, c + 1],
                            data[:, c + 2:c + 5])


def export_stats(stats, path):
    """One row per field plus ``success_rate`` and ``pinpoint_rate`` rows."""
    with _io(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_COLUMNS)
        for name in STAT_FIELDS:
            s = stats.fields[name]
            writer.writerow([name, s.count, _f(s.mean), _f(s.std), _f(s.min), _f(s.max)])
        for name in ("success_rate", "pinpoint_rate"):
            rate = getattr(stats, name)
            writer.writerow([name, stats.count, _f(rate), "nan", "nan", "nan"])
        writer.writerow(["excluded", stats.excluded, "nan", "nan", "nan", "nan"])


def read_stats(path):
    with _io(path, "r") as fh:
        reader = csv.reader(fh)
        if next(reader) != STATS_COLUMNS:
            raise ValueError(f"{path}: unexpected stats header")
        rows = {row[0]: row for row in reader}
    fields_ = {name: FieldStats(int(rows[name][1]), *[float(x) for x in rows[name][2:]]) for name in STAT_FIELDS}
    return TouchdownStats(count=int(rows["success_rate"][1]), excluded=int(rows["excluded"][1]), fields=fields_,
                          success_rate=float(rows["success_rate"][2]), pinpoint_rate=float(rows["pinpoint_rate"][2]))


EPISODE_COLUMNS = ["index", "rx", "ry", "rz", "vx", "vy", "vz", "yaw", "pitch", "roll", "wx", "wy", "wz",
                   "m0", "m_final", "glideslope", "steps", "cause", "divert_triggered", "fuel_exhausted"]


def export_episodes(records, path):
    with _io(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPISODE_COLUMNS)
        for e in records:
            writer.writerow([e.index, *map(_f, e.r), *map(_f, e.v), *map(_f, e.euler), *map(_f, e.w),
                             _f(e.m0), _f(e.m_final), _f(e.glideslope), e.steps, e.cause,
                             int(e.divert_triggered), int(e.fuel_exhausted)])


def read_episodes(path):
    with _io(path, "r") as fh:
        reader = csv.reader(fh)
        if next(reader) != EPISODE_COLUMNS:
            raise ValueError(f"{path}: unexpected episode header")
        out = []
        for row in reader:
            x = [float(v) for v in row[1:16]]
            out.append(EpisodeRecord(int(row[0]), np.array(x[0:3]), np.array(x[3:6]), np.array(x[6:9]),
                                     np.array(x[9:12]), x[12], x[13], x[14], int(row[16]), row[17],
                                     bool(int(row[18])), bool(int(row[19]))))
    return out


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

PPO_KEYS = ("gamma1", "gamma2", "kl_target", "clip_init", "clip_min", "clip_max", "zeta_min", "zeta_max",
            "batch_episodes", "epochs", "value_epochs", "minibatch_size", "policy_lr", "value_lr",
            "log_std_init", "scaler_eps", "scaler_warmup_episodes", "divergence_factor", "checkpoint_every")
SHAPING_KEYS = tuple(f.name for f in fields(ShapingConfig))


@dataclass
class ExperimentConfig:
    """Everything one CLI run needs.

    File format: one ``key = value`` per line, ``#`` starts a comment.
    Top-level keys are the field names below; PPO settings use a ``ppo.``
    prefix (``ppo.gamma1 = 0.996``) and reward-shaping settings a
    ``shaping.`` prefix (``shaping.tau1 = 20``). Tuple values are written
    comma separated.
    """

    mode: str = "test"
    env: str = "3dof"
    seed: int | None = None
    episodes: int = 1000
    out: str = "runs/out"
    checkpoint: str | None = None
    workers: int = 1
    ellipse: str = "table3"
    policy: str = "checkpoint"
    divert_downrange: float = 800.0
    divert_crossrange: float = 800.0
    divert_altitude: float = 1500.0
    record: bool = False
    ppo: dict = field(default_factory=dict)
    shaping: dict = field(default_factory=dict)

    MODES = ("train", "test", "divert", "baseline", "export")

    def validate(self):
        if self.mode not in self.MODES:
            raise ConfigError(f"mode must be one of {', '.join(self.MODES)}")
        if self.env not in ("3dof", "6dof"):
            raise ConfigError("env must be 3dof or 6dof")
        if self.seed is None:
            raise ConfigError("seed is required")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.episodes < 0:
            raise ConfigError("episodes must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.ellipse not in ELLIPSES:
            raise ConfigError(f"ellipse must be one of {', '.join(ELLIPSES)}")
        if self.policy not in ("checkpoint", "drdv"):
            raise ConfigError("policy must be checkpoint or drdv")
        if self.checkpoint is not None and not os.path.exists(self.checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {self.checkpoint}")
        return self

    def shaping_config(self):
        return ShapingConfig(**self.shaping)

    def env_config(self, training=False):
        kw = dict(initial_conditions=ELLIPSES[self.ellipse], shaping=self.shaping_config())
        return EnvConfig.training(**kw) if training else EnvConfig.testing(**kw)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items()}


def _convert(raw, template, key, where):
    try:
        if isinstance(template, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"{where}: bad value for {key}: {raw!r}") from None
    return raw


_TOP_TEMPLATES = {"mode": "", "env": "", "seed": 0, "episodes": 0, "out": "", "checkpoint": "", "workers": 0,
                  "ellipse": "", "policy": "", "divert_downrange": 0.0, "divert_crossrange": 0.0,
                  "divert_altitude": 0.0, "record": False}


def _ppo_template(key):
    from .ppo import PPOLander

    return PPOLander().get_params()[key]


def parse_config_text(text, source="<config>"):
    """Parse the flat ``key = value`` format into a dict of typed values."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key}")
        if key in _TOP_TEMPLATES:
            values[key] = _convert(raw, _TOP_TEMPLATES[key], key, where)
        elif key.startswith("ppo.") and key[4:] in PPO_KEYS:
            values[key] = _convert(raw, _ppo_template(key[4:]), key, where)
        elif key.startswith("shaping.") and key[8:] in SHAPING_KEYS:
            values[key] = _convert(raw, getattr(ShapingConfig(), key[8:]), key, where)
        else:
            raise ConfigError(f"{where}: unknown key {key}")
    return values


def load_config(path=None, overrides=None):
    """Build an :class:`ExperimentConfig` from a file plus override values."""
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror or exc}") from None
        values.update(parse_config_text(text, path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = ExperimentConfig()
    for key, value in values.items():
        if key.startswith("ppo."):
            cfg.ppo[key[4:]] = value
        elif key.startswith("shaping."):
            cfg.shaping[key[8:]] = value
        else:
            setattr(cfg, key, value)
    return cfg.validate()


def write_manifest(out_dir, cfg, extra=None):
    """Record config, seed, code and library versions for a run."""
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "argv": sys.argv,
    }
    payload.update(extra or {})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=str)
    return path
