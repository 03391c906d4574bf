"""Acceptance criteria A1-A9, one test each with a one-line verdict."""

import math
import os
from importlib import resources

import numpy as np
import pytest

from pdglab import dynamics as dyn
from pdglab import environment as envm
from pdglab.guidance_baseline import DRDVGuidance
from pdglab.harness import run_monte_carlo
from pdglab.neuralnet import GaussianPolicy, ValueFunction
from pdglab.ppo import PPOConfig, PPOLander, adapt_clip, adapt_step_multiplier, discounted_sum, dual_discount_returns

DATA = resources.files("pdglab") / "data"


@pytest.fixture
def verdict(capsys, request):
    name = request.node.name.split("_")[1].upper()

    def report(ok, detail):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return report


def test_a1_dynamics_invariants(verdict):
    p = dyn.LanderParams(isp=math.inf, inertia_noise=np.array([[50.0, 5, -3], [5, -20, 4], [-3, 4, 30]]))
    x = np.zeros(dyn.STATE_DIM)
    x[dyn.Q] = dyn.euler_to_quaternion(0.4, -0.2, 0.7)
    x[dyn.W] = (0.3, -0.2, 0.5)
    x[dyn.M] = 2000.0
    h0, e0 = dyn.angular_momentum_inertial(x, p), dyn.rotational_energy(x, p)
    worst_norm = 0.0
    for _ in range(2000):
        raw = dyn.rk4_step(x, np.zeros(4), p, 0.05, renormalize=False)
        worst_norm = max(worst_norm, abs(np.linalg.norm(raw[dyn.Q]) - 1))
        x = dyn.rk4_step(x, np.zeros(4), p, 0.05)
    dh = np.linalg.norm(dyn.angular_momentum_inertial(x, p) - h0) / np.linalg.norm(h0)
    de = abs(dyn.rotational_energy(x, p) - e0) / e0
    verdict(dh < 1e-6 and de < 1e-6 and worst_norm < 1e-9,
            f"100 s torque-free: |dH|/|H|={dh:.2e}, |dE|/E={de:.2e}, max per-step |q|-1={worst_norm:.2e}")


def test_a2_integrator_order(verdict):
    p = dyn.LanderParams()
    x0 = np.zeros(dyn.STATE_DIM)
    x0[dyn.R] = (100.0, -50.0, 2000.0)
    x0[dyn.V] = (-10.0, 5.0, -60.0)
    x0[dyn.Q] = dyn.euler_to_quaternion(0.1, 0.2, -0.1)
    x0[dyn.W] = (0.05, -0.03, 0.02)
    x0[dyn.M] = 2000.0
    t_cmd = np.array([3000.0, 3200.0, 2900.0, 3100.0])

    def run(dt, T=6.4):
        x = x0.copy()
        for _ in range(int(round(T / dt))):
            x = dyn.rk4_step(x, t_cmd, p, dt)
        return x

    sols = [run(0.1 / 2**k) for k in range(4)]
    diffs = [np.linalg.norm(sols[k] - sols[k + 1]) for k in range(3)]
    orders = [math.log2(diffs[k] / diffs[k + 1]) for k in range(2)]
    ok = all(abs(o - 4.0) <= 0.2 for o in orders)
    verdict(ok, "observed orders " + ", ".join(f"{o:.3f}" for o in orders))


def _fd_rel_error(loss, params, grads, h=1e-5):
    worst = 0.0
    for prm, g in zip(params, grads):
        flat, gflat = prm.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = loss()
            flat[k] = old - h
            down = loss()
            flat[k] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - gflat[k]) / max(1e-6, abs(fd) + abs(gflat[k])))
    return worst


def test_a3_gradient_correctness(verdict):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pol = GaussianPolicy(4, 2, rng=rng, log_std_init=rng.uniform(-1, 0.5), widths=[4, 6, 4, 2])
        obs, act, w = rng.normal(size=(8, 4)), rng.normal(size=(8, 2)), rng.normal(size=8)
        worst = max(worst, _fd_rel_error(lambda: float(w @ pol.log_prob(obs, act)), pol.params,
                                         pol.log_prob_gradients(obs, act, w)))
        vf = ValueFunction(4, rng=rng, widths=[4, 6, 3, 1])
        y = rng.normal(size=8)
        worst = max(worst, _fd_rel_error(lambda: float(np.mean((vf.predict(obs) - y) ** 2)), vf.params,
                                         vf.mse_gradients(obs, y)[1]))
    verdict(worst < 1e-4, f"max relative error {worst:.2e} over 100 policy and 100 value networks")


def test_a4_dual_discount(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        gamma = rng.uniform(0, 0.999)
        r1, r2 = rng.normal(size=n), rng.normal(size=n)
        expect = np.zeros(n)
        acc = 0.0
        for k in range(n - 1, -1, -1):
            acc = r1[k] + r2[k] + gamma * acc
            expect[k] = acc
        worst = max(worst, np.max(np.abs(dual_discount_returns(r1, r2, gamma, gamma) - expect)))
    g = dual_discount_returns([0, 10], [1, 1], 0.5, 0.1)
    single = discounted_sum([1.0, 1.0], 0.1)
    ok = worst <= 1e-12 and g[0] == 6.1 and g[1] == 11.0 and single[0] == 1.1
    verdict(ok, f"collapse max error {worst:.1e} on 1000 episodes; hand example G0={g[0]!r}, G1={g[1]!r}")


def test_a5_scaled_training(verdict):
    path = DATA / "ppo_3dof.json"
    agent = PPOLander.load(str(path))
    episodes = agent.state_.episodes
    stats, _, _ = run_monte_carlo(agent, "3dof", envm.EnvConfig.testing(), 1000, seed=2024,
                                  workers=min(4, os.cpu_count() or 1))
    ok = episodes <= 50_000 and stats.pinpoint_rate >= 0.9
    verdict(ok, f"policy trained for {episodes} episodes; pinpoint {stats.pinpoint_rate:.3f} over "
                f"{stats.count} test episodes (|r| mean {stats['position_norm'].mean:.2f} m, "
                f"|v| mean {stats['speed'].mean:.2f} m/s, fuel {stats['fuel'].mean:.1f} kg)")


def test_a6_baseline_fuel(verdict):
    stats, _, _ = run_monte_carlo(DRDVGuidance(), "3dof", envm.EnvConfig.testing(), 1000, seed=2024,
                                  workers=min(4, os.cpu_count() or 1))
    mean, std = stats["fuel"].mean, stats["fuel"].std
    ok = abs(mean - 279) <= 0.1 * 279 and abs(std - 14) <= 0.5 * 14
    verdict(ok, f"DR/DV fuel mean {mean:.1f} kg (need 251.1..306.9), std {std:.1f} kg (need 7..21), "
                f"pinpoint {stats.pinpoint_rate:.3f}")


def test_a7_reward_machinery(verdict):
    sh = envm.ShapingConfig()
    v1, t1 = envm.target_velocity(np.array([0, 0, 2415.0]), np.array([0, 0, -82.0]), 80.0, sh)
    v2, t2 = envm.target_velocity(np.array([0, 0, 10.0]), np.array([0, 0, -2.0]), 80.0, sh)
    field_ok = (abs(v1[2] + 80 * (1 - math.exp(-1.5))) < 1e-9 and abs(t1 - 30) < 1e-9
                and abs(v2[2] + 80 * (1 - math.exp(-0.1))) < 1e-9 and abs(t2 - 10) < 1e-9)

    ranges = envm.InitialConditionRanges(
        position_min=(0.0, 0.0, 2000.0), position_max=(0.0, 0.0, 2000.0),
        velocity_min=(0.0, 0.0, -50.0), velocity_max=(0.0, 0.0, -50.0),
        attitude_min=(0.0, 0.0, 0.0), attitude_max=(0.0, 0.0, 0.0), rate_min=(0, 0, 0), rate_max=(0, 0, 0))
    env = envm.LanderEnv(envm.EnvConfig.training(initial_conditions=ranges), n_envs=2)
    env.reset([0, 1])
    env.x[0, dyn.Q] = dyn.euler_to_quaternion(0.0, 7 * math.pi / 16 + 0.02, 0.0)
    penalties = 0
    for _ in range(3):
        out = env.step(np.full((2, 4), 0.5))
        penalties += int(out.r2[0] <= -100)
    once = penalties == 1 and env.cause[0] == envm.ATTITUDE and not env.done[1]

    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(20000):
        r = rng.uniform([-7, -7, -1], [7, 7, 1])
        v = rng.uniform(-3, 3, 3)
        euler = rng.uniform(-0.3, 0.3, 3)
        w = rng.uniform(-0.3, 0.3, 3)
        r1, _ = envm.step_reward(r, v, np.zeros(3), 5000.0, sh, True, euler=euler, w=w)
        expect = (r[2] < 0 and np.linalg.norm(r) < 5 and np.linalg.norm(v) < 2
                  and np.all(np.abs(euler[1:]) < 0.2) and np.all(np.abs(w) < 0.2))
        mismatches += (r1 == 10.0) != expect
    verdict(field_ok and once and mismatches == 0,
            f"velocity field exact={field_ok}; attitude penalty applied {penalties}x; "
            f"landing-bonus mismatches {mismatches}/20000")


def test_a8_adaptation_rules(verdict):
    cfg = PPOConfig()
    examples = [
        adapt_clip(0.001, 0.2, cfg) == 0.2,
        abs(adapt_clip(0.0004, 0.2, cfg) - 0.3) < 1e-15,
        abs(adapt_clip(0.003, 0.02, cfg) - 0.02 / 1.5) < 1e-15,
        adapt_step_multiplier(0.001, 0.3, 1.0, cfg) == 1.0,
        abs(adapt_step_multiplier(0.0004, 0.3, 1.0, cfg) - 1.5) < 1e-15,
        abs(adapt_step_multiplier(0.003, 0.015, 1.0, cfg) - 1 / 1.5) < 1e-15,
    ]
    rng = np.random.default_rng(8)
    kls = rng.exponential(0.002, 1_000_000) * rng.choice([0.1, 1.0, 10.0], 1_000_000)
    clip, zeta = cfg.clip_init, 1.0
    out_of_bounds = 0
    for kl in kls.tolist():
        clip = adapt_clip(kl, clip, cfg)
        zeta = adapt_step_multiplier(kl, clip, zeta, cfg)
        out_of_bounds += not (cfg.clip_min <= clip <= cfg.clip_max and cfg.zeta_min <= zeta <= cfg.zeta_max)
    verdict(all(examples) and out_of_bounds == 0,
            f"{sum(examples)}/6 rule examples exact; {out_of_bounds} bound violations over 1e6 KL values")


def test_a9_full_6dof_training(capsys):
    path = DATA / "ppo_6dof.json"
    if not path.is_file():
        with capsys.disabled():
            print("\nA9 SKIP: stretch criterion; no 6-DOF checkpoint trained at 300,000 episodes is shipped")
        pytest.skip("no 6-DOF checkpoint")
    agent = PPOLander.load(str(path))
    stats, _, _ = run_monte_carlo(agent, "6dof", envm.EnvConfig.testing(), 1000, seed=2024)
    ok = abs(stats["speed"].mean - 0.93) <= 0.465 and abs(stats["fuel"].mean - 291) <= 0.15 * 291
    with capsys.disabled():
        print(f"\nA9 {'PASS' if ok else 'FAIL'}: speed {stats['speed'].mean:.2f} m/s, fuel {stats['fuel'].mean:.1f} kg")
    assert ok
