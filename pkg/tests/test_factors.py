import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from objba import factors as F
from objba.camera import StereoObservation, project_stereo
from objba.manifold import Pose, Twist, delta_transform, exp_so3, hat

from .conftest import random_pose, random_twist

N_RANDOM = 100


def fd_check(fn, args, n_vars, rtol=1e-4, atol=1e-6):
    """Analytic vs central-difference Jacobians through the shared retraction."""
    ev = fn(*args)
    assert ev.valid
    rest = args[n_vars:]
    num = F.numeric_jacobians(lambda *v: fn(*v, *rest).residual, args[:n_vars], eps=1e-6)
    assert len(ev.jacobians) == n_vars
    for Ja, Jn in zip(ev.jacobians, num):
        np.testing.assert_allclose(Ja, Jn, rtol=rtol, atol=atol)


def visible_config(rng, intr):
    """Camera pose and world point in front of the camera."""
    T_cw = random_pose(rng, scale=2.0)
    Xc = np.array([rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(3, 30)])
    x_w = T_cw.inverse().apply(Xc)
    return T_cw, x_w


def test_static_reprojection_zero_at_consistency(rng, intr):
    T, x = visible_config(rng, intr)
    ev = F.static_reprojection(T, x, project_stereo(T.apply(x), intr), intr)
    np.testing.assert_allclose(ev.residual, 0.0, atol=1e-9)


def test_static_reprojection_jacobians(rng, intr):
    for _ in range(N_RANDOM):
        T, x = visible_config(rng, intr)
        obs = StereoObservation.from_array(project_stereo(T.apply(x), intr).as_array() + rng.normal(size=3))
        fd_check(lambda T_, x_: F.static_reprojection(T_, x_, obs, intr), (T, x), 2)


def test_static_reprojection_gauge_invariance(rng, intr):
    T, x = visible_config(rng, intr)
    obs = StereoObservation(300.0, 200.0, 280.0)
    g = random_pose(rng)
    # move the world by g: x -> g x, T_cw -> T_cw g^-1
    e1 = F.static_reprojection(T, x, obs, intr).residual
    e2 = F.static_reprojection(T @ g.inverse(), g.apply(x), obs, intr).residual
    np.testing.assert_allclose(e1, e2, atol=1e-9)


def test_behind_camera_is_invalid(intr):
    ev = F.static_reprojection(Pose.identity(), [0, 0, -2], StereoObservation(1, 1, 0), intr)
    assert not ev.valid
    assert np.all(ev.residual == 0)
    assert len(ev.jacobians) == 2


def test_object_reprojection_jacobians(rng, intr):
    for _ in range(N_RANDOM):
        T, x_w = visible_config(rng, intr)
        T_wo = random_pose(rng, scale=3.0)
        x_o = T_wo.inverse().apply(x_w)
        obs = StereoObservation.from_array(project_stereo(T.apply(x_w), intr).as_array() + rng.normal(size=3))
        fd_check(lambda a, b, c: F.object_reprojection(a, b, c, obs, intr), (T, T_wo, x_o), 3)


def test_object_reprojection_reduces_to_static(rng, intr):
    T, x = visible_config(rng, intr)
    obs = StereoObservation(310.0, 220.0, 300.0)
    e_obj = F.object_reprojection(T, Pose.identity(), x, obs, intr)
    e_st = F.static_reprojection(T, x, obs, intr)
    np.testing.assert_allclose(e_obj.residual, e_st.residual, atol=1e-12)
    np.testing.assert_allclose(e_obj.jacobians[0], e_st.jacobians[0], atol=1e-12)


def test_constant_velocity_examples():
    tw = Twist([1, 2, 3], [0.1, 0.2, 0.3])
    assert np.all(F.constant_velocity(tw, tw, 0.1).residual == 0)
    ev = F.constant_velocity(Twist([0, 0, 0], [0.1, 0, 0]), Twist([1, 0, 0], [0.1, 0, 0]), 0.1)
    np.testing.assert_array_equal(ev.residual, [1, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(ev.jacobians[0], -np.eye(6))
    np.testing.assert_array_equal(ev.jacobians[1], np.eye(6))


def test_constant_velocity_jacobians(rng):
    for _ in range(N_RANDOM):
        fd_check(lambda a, b: F.constant_velocity(a, b, 0.1), (random_twist(rng), random_twist(rng)), 2)


def test_doubling_dt_halves_whitened_cost(rng):
    a, b = random_twist(rng), random_twist(rng)
    c1 = F.constant_velocity(a, b, 0.1).whitened_sq_norm()
    c2 = F.constant_velocity(a, b, 0.2).whitened_sq_norm()
    assert c2 * 2 == pytest.approx(c1, rel=1e-14)


@pytest.mark.parametrize("dt", [0.0, -0.1])
def test_invalid_interval(dt, rng):
    with pytest.raises(F.InvalidIntervalError):
        F.constant_velocity(Twist(), Twist(), dt)
    with pytest.raises(F.InvalidIntervalError):
        F.velocity_coupling(Pose.identity(), Pose.identity(), Twist(), [1, 2, 3], dt)
    with pytest.raises(F.InvalidIntervalError):
        F.information_for_interval([1.0], dt)


def test_velocity_coupling_zero_on_consistent_motion(rng):
    for _ in range(20):
        T0, tw = random_pose(rng), random_twist(rng)
        dt = rng.uniform(0.05, 0.5)
        T1 = T0 @ delta_transform(tw, dt)
        for _ in range(5):
            ev = F.velocity_coupling(T0, T1, tw, rng.normal(size=3) * 2, dt)
            np.testing.assert_allclose(ev.residual, 0.0, atol=1e-12)


def test_velocity_coupling_jacobians(rng):
    for _ in range(N_RANDOM):
        dt = rng.uniform(0.05, 0.3)
        w = rng.normal(size=3)
        w *= rng.uniform(0, 0.5) / dt / np.linalg.norm(w)  # |w| dt up to 0.5 rad
        tw = Twist(rng.normal(size=3) * 3, w)
        T0 = random_pose(rng, scale=5.0)
        T1 = T0 @ delta_transform(tw, dt) @ Pose(exp_so3(0.05 * rng.normal(size=3)), 0.1 * rng.normal(size=3))
        x = rng.normal(size=3) * 2
        fd_check(lambda a, b, c, d: F.velocity_coupling(a, b, c, d, dt), (T0, T1, tw, x), 4)


def test_velocity_coupling_angular_jacobian_at_zero_rate(rng):
    T0 = random_pose(rng)
    x = np.array([1.0, -2.0, 0.5])
    dt = 0.1
    ev = F.velocity_coupling(T0, T0, Twist([1, 0, 0], [0, 0, 0]), x, dt)
    np.testing.assert_allclose(ev.jacobians[2][:, 3:], T0.R @ hat(x) * dt, atol=1e-15)


def test_information_scaling():
    np.testing.assert_allclose(F.information_for_interval([0.5, 0.1], 1.0), np.diag([4.0, 100.0]))
    np.testing.assert_allclose(F.information_for_interval([0.5, 0.1], 2.0), np.diag([2.0, 50.0]))


def test_huber_examples():
    loss = F.RobustLoss("huber", 2.0)
    assert F.huber_apply(loss, 0.0) == (0.0, 1.0)
    d2 = loss.delta ** 2
    assert F.huber_apply(loss, d2)[0] == pytest.approx(d2)
    assert F.huber_apply(loss, d2 * (1 + 1e-12))[0] == pytest.approx(d2)
    c, w = F.huber_apply(loss, 4 * d2)
    assert c == pytest.approx(3 * d2)
    assert w == pytest.approx(0.5)
    assert F.huber_apply(F.NO_LOSS, 1e6) == (1e6, 1.0)


@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_huber_monotone(a, b):
    loss = F.RobustLoss()
    lo, hi = sorted((a, b))
    assert F.huber_apply(loss, lo)[0] <= F.huber_apply(loss, hi)[0]
    c, _ = F.huber_apply(loss, hi)
    assert c <= hi + 1e-9


def test_huber_batch_matches_scalar(rng):
    loss = F.RobustLoss()
    s = rng.uniform(0, 50, 200)
    c, w = F.huber_apply_batch(loss, s)
    for i in range(len(s)):
        assert (c[i], w[i]) == pytest.approx(F.huber_apply(loss, s[i]))


def test_robust_loss_validation():
    with pytest.raises(ValueError):
        F.RobustLoss("cauchy")
    with pytest.raises(ValueError):
        F.RobustLoss("huber", 0.0)


def test_default_delta_is_chi2_95():
    assert F.DEFAULT_HUBER_DELTA ** 2 == pytest.approx(7.815)


def test_numeric_jacobian_wrapper(rng, intr):
    T, x = visible_config(rng, intr)
    obs = StereoObservation(300.0, 200.0, 290.0)
    a = F.static_reprojection(T, x, obs, intr)
    n = F.with_numeric_jacobians(F.static_reprojection, 2)(T, x, obs, intr)
    np.testing.assert_array_equal(a.residual, n.residual)
    for Ja, Jn in zip(a.jacobians, n.jacobians):
        np.testing.assert_allclose(Ja, Jn, rtol=1e-5, atol=1e-6)
