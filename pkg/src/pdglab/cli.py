"""
Command-line entry point.

Errors are reported as a single line on stderr::

    pdglab: error: <kind>: <message>

with exit status 2 for usage and configuration problems, 3 for missing or
unreadable inputs and 1 for failures during a run.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .guidance_baseline import DRDVGuidance
from .harness import (
    ConfigError,
    export_episodes,
    export_stats,
    export_trajectory,
    load_config,
    run_divert_experiment,
    run_monte_carlo,
    write_manifest,
)
from .ppo import PPOLander, TrainingError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--episodes", type=int, help="episode count (training budget for train)")
    common.add_argument("--env", choices=["3dof", "6dof"])
    common.add_argument("--checkpoint", help="policy checkpoint (JSON)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="evaluation worker processes")
    common.add_argument("--ellipse", choices=["table3", "ext9", "ext12"], help="initial-condition box")
    common.add_argument("--policy", choices=["checkpoint", "drdv"], help="policy for test/divert/export")

    parser = _Parser(prog="pdglab", description="Powered-descent guidance experiments.")
    sub = parser.add_subparsers(dest="mode", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a PPO lander policy")
    p = sub.add_parser("test", parents=[common], help="Monte Carlo evaluation of a policy")
    p.add_argument("--record", action="store_true", default=None, help="also write trajectories")
    sub.add_parser("divert", parents=[common], help="paired nominal/divert Monte Carlo")
    sub.add_parser("baseline", parents=[common], help="DR/DV Monte Carlo (3-DOF)")
    sub.add_parser("export", parents=[common], help="write per-episode trajectory CSVs")
    return parser


def _policy(cfg):
    if cfg.policy == "drdv":
        if cfg.env != "3dof":
            raise ConfigError("the DR/DV policy only drives the 3dof environment")
        return DRDVGuidance()
    if cfg.checkpoint is None:
        raise ConfigError("a --checkpoint is required unless --policy drdv")
    agent = PPOLander.load(cfg.checkpoint)
    if agent.env != cfg.env:
        raise ConfigError(f"checkpoint was trained on {agent.env}, but env is {cfg.env}")
    return agent


def _write_eval(cfg, stats, episodes, name="stats.csv"):
    os.makedirs(cfg.out, exist_ok=True)
    export_stats(stats, os.path.join(cfg.out, name))
    export_episodes(episodes, os.path.join(cfg.out, "episodes.csv"))


def _summary(stats):
    if stats.empty:
        return "episodes=0"
    fuel = stats["fuel"]
    return (f"episodes={stats.count} pinpoint={stats.pinpoint_rate:.4f} success={stats.success_rate:.4f} "
            f"fuel_mean={fuel.mean:.2f} fuel_std={fuel.std:.2f} "
            f"speed_mean={stats['speed'].mean:.3f} position_mean={stats['position_norm'].mean:.3f}")


def run(cfg):
    if cfg.mode == "train":
        env_config = cfg.env_config(training=True)
        ckpt_dir = os.path.join(cfg.out, "checkpoints")
        agent = PPOLander(env=cfg.env, episode_budget=cfg.episodes, random_state=cfg.seed,
                          checkpoint_dir=ckpt_dir, env_config=env_config, **cfg.ppo)
        write_manifest(cfg.out, cfg)
        agent.fit()
        agent.log_.to_csv(os.path.join(cfg.out, "train_log.csv"))
        agent.save(os.path.join(cfg.out, "checkpoint.json"))
        last = agent.log_.rows[-1] if len(agent.log_) else {}
        print(f"updates={len(agent.log_)} episodes={agent.state_.episodes} "
              f"reward_mean={last.get('reward_mean', float('nan')):.3f}")
        return 0

    if cfg.mode == "baseline":
        if cfg.env != "3dof":
            raise ConfigError("baseline runs only in the 3dof environment")
        cfg.policy = "drdv"

    policy = _policy(cfg)
    env_config = cfg.env_config(training=False)
    write_manifest(cfg.out, cfg)

    if cfg.mode == "divert":
        res = run_divert_experiment(policy, cfg.env, env_config, cfg.episodes, cfg.seed,
                                    offset=(cfg.divert_downrange, cfg.divert_crossrange, 0.0),
                                    altitude=cfg.divert_altitude, workers=cfg.workers)
        export_stats(res.nominal, os.path.join(cfg.out, "stats_nominal.csv"))
        export_stats(res.diverted, os.path.join(cfg.out, "stats_divert.csv"))
        with open(os.path.join(cfg.out, "divert_summary.json"), "w") as fh:
            json.dump({"count": res.count, "fuel_delta_mean": res.fuel_delta_mean,
                       "fuel_delta_std": res.fuel_delta_std, "never_triggered": res.never_triggered}, fh, indent=2)
        print(f"episodes={res.count} never_triggered={len(res.never_triggered)} "
              f"fuel_delta_mean={res.fuel_delta_mean:.2f} fuel_delta_std={res.fuel_delta_std:.2f}")
        return 0

    record = cfg.mode == "export" or cfg.record
    stats, episodes, trajectories = run_monte_carlo(policy, cfg.env, env_config, cfg.episodes, cfg.seed,
                                                    record=record, workers=cfg.workers)
    _write_eval(cfg, stats, episodes)
    if record:
        tdir = os.path.join(cfg.out, "trajectories")
        os.makedirs(tdir, exist_ok=True)
        for t in trajectories:
            export_trajectory(t, os.path.join(tdir, f"episode_{t.index:06d}.csv"))
    print(_summary(stats))
    return 0


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: v for k, v in vars(args).items() if k not in ("config",)}
        cfg = load_config(args.config, overrides)
        return run(cfg)
    except UsageError as exc:
        _fail("usage", exc)
        return 2
    except ConfigError as exc:
        _fail("config", exc)
        return 2
    except (OSError, ValueError) as exc:
        kind = "input" if isinstance(exc, OSError) or "checkpoint" in str(exc) else "runtime"
        _fail(kind, exc)
        return 3 if kind == "input" else 1
    except TrainingError as exc:
        _fail("training", exc)
        return 1


def _fail(kind, exc):
    msg = " ".join(str(exc).split())
    print(f"pdglab: error: {kind}: {msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
