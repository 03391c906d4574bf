import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from pdglab import dynamics as dyn

thrusts = st.lists(st.floats(0.0, 5000.0), min_size=4, max_size=4)


def unit_quaternions():
    return st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
        lambda q: np.linalg.norm(q) > 0.1).map(lambda q: np.asarray(q) / np.linalg.norm(q))


def axis_angle_dcm(axis, angle):
    e = np.asarray(axis, float) / np.linalg.norm(axis)
    ex = np.array([[0, -e[2], e[1]], [e[2], 0, -e[0]], [-e[1], e[0], 0]])
    return math.cos(angle) * np.eye(3) + (1 - math.cos(angle)) * np.outer(e, e) - math.sin(angle) * ex


# -- thruster wrench ---------------------------------------------------------


@pytest.mark.parametrize("t_cmd, force, torque", [
    ([1000, 1000, 1000, 1000], [0, 0, 4000], [0, 0, 0]),
    ([5000, 1000, 3000, 3000], [0, 0, 12000], [-8000, 0, 0]),
    ([0, 0, 2000, 0], [0, 0, 2000], [0, 4000, 0]),
])
def test_thruster_wrench_examples(t_cmd, force, torque):
    w = dyn.thruster_wrench(dyn.ThrusterLayout(), t_cmd)
    np.testing.assert_allclose(w.force, force, atol=1e-12)
    np.testing.assert_allclose(w.torque, torque, atol=1e-12)


def test_thruster_wrench_matches_per_engine_cross_products():
    layout = dyn.ThrusterLayout()
    t = np.array([1200.0, 3400.0, 2500.0, 4100.0])
    torque = sum(np.cross(p, d * ti) for p, d, ti in zip(layout.positions, layout.directions, t))
    np.testing.assert_allclose(dyn.thruster_wrench(layout, t).torque, torque, atol=1e-9)


@given(thrusts, thrusts, st.floats(0, 10))
def test_thruster_wrench_linear_and_additive(t1, t2, alpha):
    layout = dyn.ThrusterLayout()
    w1, w2 = dyn.thruster_wrench(layout, t1), dyn.thruster_wrench(layout, t2)
    ws = dyn.thruster_wrench(layout, np.add(t1, t2))
    wa = dyn.thruster_wrench(layout, alpha * np.asarray(t1))
    np.testing.assert_allclose(ws.force, w1.force + w2.force, atol=1e-6)
    np.testing.assert_allclose(ws.torque, w1.torque + w2.torque, atol=1e-6)
    np.testing.assert_allclose(wa.torque, alpha * w1.torque, atol=1e-6)


@given(thrusts)
def test_no_z_torque_authority(t):
    assert dyn.thruster_wrench(dyn.ThrusterLayout(), t).torque[2] == 0.0


@given(st.floats(0, 5000))
def test_equal_thrust_gives_pure_vertical_force(t):
    w = dyn.thruster_wrench(dyn.ThrusterLayout(), [t] * 4)
    assert np.all(w.torque == 0) and w.force[0] == 0 and w.force[1] == 0


def test_thruster_wrench_rejects_nan():
    with pytest.raises(ValueError):
        dyn.thruster_wrench(dyn.ThrusterLayout(), [np.nan, 0, 0, 0])


def test_layout_validation():
    with pytest.raises(ValueError):
        dyn.ThrusterLayout(directions=np.tile([0, 0, 2.0], (4, 1)))
    with pytest.raises(ValueError):
        dyn.ThrusterLayout(t_min=6000.0)


# -- attitude ------------------------------------------------------------------


def test_identity_quaternion():
    np.testing.assert_array_equal(dyn.attitude_matrix([0, 0, 0, 1]), np.eye(3))


def test_z_rotation_matches_axis_angle():
    q = [0, 0, math.sin(math.pi / 4), math.cos(math.pi / 4)]
    np.testing.assert_allclose(dyn.attitude_matrix(q), axis_angle_dcm([0, 0, 1], math.pi / 2), atol=1e-15)


@given(unit_quaternions())
def test_attitude_matrix_is_rotation(q):
    a = dyn.attitude_matrix(q)
    np.testing.assert_allclose(a.T @ a, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(a) - 1) < 1e-12


@given(unit_quaternions())
def test_attitude_matrix_matches_scipy_passive_rotation(q):
    np.testing.assert_allclose(dyn.attitude_matrix(q), Rotation.from_quat(q).as_matrix().T, atol=1e-12)


def test_attitude_matrix_rejects_non_unit():
    with pytest.raises(ValueError):
        dyn.attitude_matrix([0, 0, 0, 2.0])
    with pytest.raises(ValueError):
        dyn.attitude_matrix([0, 0, 1.0])


def test_pitch_quaternion():
    np.testing.assert_allclose(dyn.euler_to_quaternion(0.0, math.pi / 4, 0.0),
                               [0, math.sin(math.pi / 8), 0, math.cos(math.pi / 8)], atol=1e-15)


@given(st.floats(-3.0, 3.0), st.floats(-1.5, 1.5), st.floats(-3.0, 3.0))
def test_euler_round_trip(yaw, pitch, roll):
    q = dyn.euler_to_quaternion(yaw, pitch, roll)
    np.testing.assert_allclose(dyn.quaternion_to_euler(q), [yaw, pitch, roll], atol=1e-9)
    # z-y-x sequence: A = R_x(roll) R_y(pitch) R_z(yaw) in passive form
    expected = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix().T
    np.testing.assert_allclose(dyn.attitude_matrix(q), expected, atol=1e-12)


# -- inertia ----------------------------------------------------------------------


def test_ellipsoid_inertia_examples():
    np.testing.assert_allclose(dyn.ellipsoid_inertia(2000.0, 1, 1, 1), np.diag([800.0] * 3))
    np.testing.assert_allclose(dyn.ellipsoid_inertia(2000.0, 2, 2, 1), np.diag([2000.0, 2000.0, 3200.0]))
    np.testing.assert_allclose(dyn.ellipsoid_inertia(4000.0, 2, 2, 1), 2 * dyn.ellipsoid_inertia(2000.0, 2, 2, 1))


def test_ellipsoid_inertia_rejects_bad_input():
    with pytest.raises(ValueError):
        dyn.ellipsoid_inertia(-1.0, 1, 1, 1)
    with pytest.raises(ValueError):
        dyn.ellipsoid_inertia(1.0, 0, 1, 1)


# -- derivatives ---------------------------------------------------------------------


def state(r=(0, 0, 1000), v=(0, 0, 0), q=(0, 0, 0, 1), w=(0, 0, 0), m=2000.0):
    return dyn.LanderState(np.array(r, float), np.array(v, float), np.array(q, float),
                           np.array(w, float), m).to_array()


def test_ballistic_derivative():
    p = dyn.LanderParams()
    dx = dyn.state_derivative(state(), np.zeros(4), p)
    np.testing.assert_array_equal(dx[dyn.V], p.gravity)
    np.testing.assert_array_equal(dx[dyn.W], 0)
    assert dx[dyn.M] == 0


def test_mass_flow_rate():
    p = dyn.LanderParams()
    dx = dyn.state_derivative(state(), np.full(4, 5000.0), p)
    assert dx[dyn.M] == pytest.approx(-9.0703, abs=1e-4)
    assert dx[dyn.M] == pytest.approx(-20000 / (225 * 9.8), rel=1e-15)
    dy = dyn.point_mass_derivative(np.r_[0, 0, 1000, 0, 0, 0, 2000.0], [12000.0, 0, 16000.0], p)
    assert dy[6] == pytest.approx(-20000 / (225 * 9.8), rel=1e-15)


def test_principal_axis_spin_has_no_gyroscopic_acceleration():
    dx = dyn.state_derivative(state(w=(0, 0, 0.3)), np.zeros(4), dyn.LanderParams())
    np.testing.assert_allclose(dx[dyn.W], 0, atol=1e-15)


def test_quaternion_kinematics_matches_half_xi_omega():
    q = dyn.euler_to_quaternion(0.3, 0.2, -0.1)
    w = np.array([0.1, -0.2, 0.05])
    dx = dyn.state_derivative(state(q=q, w=w), np.zeros(4), dyn.LanderParams())
    rho, q4 = q[:3], q[3]
    expected = 0.5 * np.r_[q4 * w + np.cross(rho, w), -rho @ w]
    np.testing.assert_allclose(dx[dyn.Q], expected, atol=1e-15)


def test_body_force_maps_to_inertial_through_transpose():
    q = dyn.euler_to_quaternion(0.0, math.pi / 2, 0.0)  # positive pitch carries body z onto inertial +x
    p = dyn.LanderParams(gravity=np.zeros(3))
    dx = dyn.state_derivative(state(q=q), np.full(4, 1000.0), p)
    np.testing.assert_allclose(dx[dyn.V], [2.0, 0, 0], atol=1e-12)


# -- integration -------------------------------------------------------------------------


def test_ballistic_rk4_is_exact():
    p = dyn.LanderParams()
    x = state(r=(10, -20, 1000), v=(3, 1, -50))
    x0 = x.copy()
    dt, n = 0.05, 200
    for _ in range(n):
        x = dyn.rk4_step(x, np.zeros(4), p, dt)
    t = dt * n
    np.testing.assert_allclose(x[dyn.R], x0[dyn.R] + x0[dyn.V] * t + 0.5 * p.gravity * t * t, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(x[dyn.V], x0[dyn.V] + p.gravity * t, rtol=1e-12, atol=1e-11)


def test_hover_balance_3dof():
    p = dyn.LanderParams(isp=math.inf)
    y = np.r_[0, 0, 100, 0, 0, 0, 2000.0]
    thrust = -2000.0 * p.gravity
    y1 = dyn.rk4_step_3dof(y, thrust, p, 0.2)
    assert np.linalg.norm(y1[3:6]) < 1e-12


def test_constant_thrust_matches_rocket_equation():
    p = dyn.LanderParams(gravity=np.zeros(3))
    y = np.r_[0, 0, 0, 0, 0, 0, 2000.0]
    thrust = np.array([0, 0, 10000.0])
    for _ in range(400):
        y = dyn.rk4_step_3dof(y, thrust, p, 0.05)
    ve = p.isp * p.g_ref
    assert y[6] == pytest.approx(2000.0 - 20.0 * 10000.0 / ve, rel=1e-12)
    assert y[5] == pytest.approx(ve * math.log(2000.0 / y[6]), rel=1e-9)


def test_zero_thrust_3dof_matches_6dof():
    p = dyn.LanderParams()
    x = state(r=(5, 6, 700), v=(1, 2, -30))
    y = np.r_[x[:6], x[dyn.M]]
    for _ in range(40):
        x = dyn.rk4_step(x, np.zeros(4), p, 0.05)
        y = dyn.rk4_step_3dof(y, np.zeros(3), p, 0.05)
    np.testing.assert_array_equal(x[:6], y[:6])


def test_6dof_identity_attitude_matches_3dof_step_for_step():
    p = dyn.LanderParams()
    x = state(r=(100, -50, 2000), v=(-10, 5, -70))
    y = np.r_[x[:6], x[dyn.M]]
    t_cmd = np.full(4, 3000.0)
    for _ in range(200):
        x = dyn.rk4_step(x, t_cmd, p, 0.05)
        y = dyn.rk4_step_3dof(y, [0, 0, t_cmd.sum()], p, 0.05)
        np.testing.assert_allclose(x[:6], y[:6], rtol=0, atol=1e-10)
        assert x[dyn.M] == pytest.approx(y[6], abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(unit_quaternions(), st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3), thrusts)
def test_quaternion_norm_and_mass_monotone(q, w, t):
    p = dyn.LanderParams()
    x = state(q=q, w=w)
    for _ in range(20):
        x_new = dyn.rk4_step(x, t, p, 0.05)
        assert abs(np.linalg.norm(x_new[dyn.Q]) - 1) < 1e-9
        assert x_new[dyn.M] <= x[dyn.M]
        x = x_new


def test_mass_floor():
    p = dyn.LanderParams()
    x = state(m=1500.01)
    x = dyn.rk4_step(x, np.full(4, 5000.0), p, 0.05)
    assert x[dyn.M] == 1500.0


def test_non_finite_state_raises():
    p = dyn.LanderParams()
    x = state()
    x[dyn.V] = np.inf
    with pytest.raises(dyn.DynamicsError):
        dyn.rk4_step(x, np.zeros(4), p, 0.05)
    with pytest.raises(ValueError):
        dyn.rk4_step(state(), np.zeros(4), p, 0.0)


def test_batched_step_equals_individual_steps():
    p = dyn.LanderParams()
    rng = np.random.default_rng(4)
    xs = np.stack([state(q=dyn.euler_to_quaternion(*rng.uniform(-0.3, 0.3, 3)), w=rng.uniform(-0.1, 0.1, 3))
                   for _ in range(5)])
    t = rng.uniform(1000, 5000, (5, 4))
    batched = dyn.rk4_step(xs, t, p, 0.05)
    for k in range(5):
        np.testing.assert_allclose(batched[k], dyn.rk4_step(xs[k], t[k], p, 0.05), rtol=1e-14, atol=1e-12)


def test_torque_free_conservation():
    p = dyn.LanderParams(isp=math.inf, inertia_noise=np.array([[50.0, 5, -3], [5, -20, 4], [-3, 4, 30]]))
    x = state(q=dyn.euler_to_quaternion(0.4, -0.2, 0.7), w=(0.3, -0.2, 0.5))
    h0 = dyn.angular_momentum_inertial(x, p)
    e0 = dyn.rotational_energy(x, p)
    for _ in range(2000):
        x = dyn.rk4_step(x, np.zeros(4), p, 0.05)
    h = dyn.angular_momentum_inertial(x, p)
    assert np.linalg.norm(h - h0) / np.linalg.norm(h0) < 1e-6
    assert abs(dyn.rotational_energy(x, p) - e0) / e0 < 1e-6


def test_lander_state_round_trip():
    x = state(r=(1, 2, 3), v=(4, 5, 6), w=(0.1, 0.2, 0.3), m=1999.0)
    np.testing.assert_array_equal(dyn.LanderState.from_array(x).to_array(), x)
