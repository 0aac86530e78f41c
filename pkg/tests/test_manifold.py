import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from objba.manifold import (Pose, Twist, compose, delta_transform, exp_so3, exp_so3_batch, hat, hat_batch, inverse,
                            local_coordinates, log_so3, retract_pose, right_jacobian_batch, right_jacobian_so3,
                            transform_point, vee)

from .conftest import random_pose

vec3 = arrays(np.float64, 3, elements=st.floats(-3.0, 3.0, allow_nan=False))


def rodrigues_scalar(w):
    """Independent scalar-arithmetic Rodrigues formula."""
    th = math.sqrt(sum(c * c for c in w))
    if th == 0:
        return [[1.0 if i == j else 0.0 for j in range(3)] for i in range(3)]
    kx, ky, kz = (c / th for c in w)
    c, s, C = math.cos(th), math.sin(th), 1 - math.cos(th)
    return [[c + kx * kx * C, kx * ky * C - kz * s, kx * kz * C + ky * s],
            [ky * kx * C + kz * s, c + ky * ky * C, ky * kz * C - kx * s],
            [kz * kx * C - ky * s, kz * ky * C + kx * s, c + kz * kz * C]]


def test_hat_examples():
    assert np.array_equal(hat([0, 0, 0]), np.zeros((3, 3)))
    assert np.array_equal(hat([1, 0, 0]), [[0, 0, 0], [0, 0, -1], [0, 1, 0]])


@given(vec3, vec3)
def test_hat_is_cross_product(v, u):
    H = hat(v)
    np.testing.assert_allclose(H, -H.T)
    np.testing.assert_allclose(H @ u, np.cross(v, u), atol=1e-12)
    np.testing.assert_allclose(H @ v, 0.0, atol=1e-12)
    np.testing.assert_allclose(vee(H), v)


def test_exp_examples():
    np.testing.assert_array_equal(exp_so3([0, 0, 0]), np.eye(3))
    R = exp_so3([0, 0, np.pi / 2])
    np.testing.assert_allclose(R, rodrigues_scalar([0, 0, np.pi / 2]), atol=1e-15)
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_exp_matches_scalar_oracle(rng):
    for _ in range(100):
        w = rng.normal(size=3) * rng.uniform(0, 3)
        np.testing.assert_allclose(exp_so3(w), rodrigues_scalar(list(w)), atol=1e-13)


def test_exp_small_angle_series():
    w = np.array([3e-9, -1e-9, 2e-9])
    np.testing.assert_allclose(exp_so3(w), np.eye(3) + hat(w), atol=1e-17)


@given(vec3)
def test_exp_inverse_and_orthonormal(w):
    R = exp_so3(w)
    np.testing.assert_allclose(R @ exp_so3(-w), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


def test_log_examples():
    np.testing.assert_array_equal(log_so3(np.eye(3)), np.zeros(3))
    np.testing.assert_allclose(log_so3(exp_so3([0.3, -0.2, 0.1])), [0.3, -0.2, 0.1], atol=1e-12)


def test_log_norm_matches_trace_formula(rng):
    for _ in range(100):
        R = exp_so3(rng.normal(size=3) * rng.uniform(0.1, 3.0))
        expected = math.acos(max(-1.0, min(1.0, (np.trace(R) - 1) / 2)))
        assert abs(np.linalg.norm(log_so3(R)) - expected) < 1e-9


def test_exp_log_roundtrip(rng):
    for _ in range(500):
        axis = rng.normal(size=3)
        w = axis / np.linalg.norm(axis) * rng.uniform(1e-6, np.pi - 1e-3)
        np.testing.assert_allclose(log_so3(exp_so3(w)), w, atol=1e-9)
        R = exp_so3(w)
        np.testing.assert_allclose(exp_so3(log_so3(R)), R, atol=1e-9)


def test_log_near_pi_flag():
    w, near = log_so3(exp_so3([0, 0, np.pi]), return_near_pi=True)
    assert near
    np.testing.assert_allclose(np.abs(w), [0, 0, np.pi], atol=1e-9)
    np.testing.assert_allclose(exp_so3(w), exp_so3([0, 0, np.pi]), atol=1e-9)
    _, near = log_so3(exp_so3([0, 0, 1.0]), return_near_pi=True)
    assert not near


def test_right_jacobian_examples():
    np.testing.assert_array_equal(right_jacobian_so3([0, 0, 0]), np.eye(3))
    th = np.array([1e-4, -2e-4, 5e-5])
    np.testing.assert_allclose(right_jacobian_so3(th), np.eye(3) - 0.5 * hat(th), atol=1e-8)


def test_right_jacobian_finite_difference():
    th = np.array([0.1, 0.0, 0.0])
    eps = 1e-6
    J = np.zeros((3, 3))
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        J[:, k] = (log_so3(exp_so3(th).T @ exp_so3(th + d)) - log_so3(exp_so3(th).T @ exp_so3(th - d))) / (2 * eps)
    np.testing.assert_allclose(right_jacobian_so3(th), J, atol=1e-8)


def test_right_jacobian_defining_property(rng):
    worst = 0.0
    for _ in range(100):
        th = rng.normal(size=3) * rng.uniform(0, 2.5)
        d = rng.normal(size=3)
        d *= 1e-4 / np.linalg.norm(d)
        err = np.linalg.norm(exp_so3(th + d) - exp_so3(th) @ exp_so3(right_jacobian_so3(th) @ d))
        worst = max(worst, err / 1e-8)
    assert worst < 10.0


def test_batched_forms_match_scalar(rng):
    w = np.concatenate([rng.normal(size=(20, 3)), 1e-9 * rng.normal(size=(3, 3)), 1e-4 * rng.normal(size=(3, 3))])
    for i in range(len(w)):
        np.testing.assert_allclose(hat_batch(w)[i], hat(w[i]))
        np.testing.assert_allclose(exp_so3_batch(w)[i], exp_so3(w[i]), atol=1e-14)
        np.testing.assert_allclose(right_jacobian_batch(w)[i], right_jacobian_so3(w[i]), atol=1e-14)


def test_group_operations(rng):
    I = Pose.identity()
    for _ in range(50):
        a, b, c = (random_pose(rng) for _ in range(3))
        assert compose(I, b).allclose(b)
        assert inverse(inverse(a)).allclose(a)
        assert compose(a, inverse(a)).allclose(I)
        assert compose(compose(a, b), c).allclose(compose(a, compose(b, c)))
    np.testing.assert_array_equal(transform_point(Pose(np.eye(3), [1, 2, 3]), [0, 0, 0]), [1, 2, 3])


def test_pose_is_immutable(rng):
    p = random_pose(rng)
    with pytest.raises(ValueError):
        p.t[0] = 1.0
    with pytest.raises(Exception):
        p.R = np.eye(3)


def test_twist_requires_finite():
    with pytest.raises(ValueError):
        Twist([np.nan, 0, 0], [0, 0, 0])


def test_delta_transform_examples():
    T = delta_transform(Twist([1, 0, 0], [0, 0, 0]), 0.5)
    assert T.allclose(Pose(np.eye(3), [0.5, 0, 0]))
    assert delta_transform(Twist([1, 2, 3], [0.1, 0.2, 0.3]), 0.0).allclose(Pose.identity())
    T = delta_transform(Twist([0, 1, 0], [0, 0, np.pi]), 1.0)
    np.testing.assert_allclose(T.R, rodrigues_scalar([0, 0, np.pi]), atol=1e-15)
    np.testing.assert_allclose(T.t, [0, 1, 0])
    with pytest.raises(ValueError):
        delta_transform(Twist(), -0.1)


def test_retract_local_roundtrip(rng):
    for _ in range(50):
        T = random_pose(rng)
        d = rng.normal(size=6) * 0.3
        np.testing.assert_allclose(local_coordinates(T, retract_pose(T, d)), d, atol=1e-10)


@settings(max_examples=50)
@given(vec3, vec3)
def test_retract_is_right_perturbation(rho, omega):
    T = Pose(exp_so3([0.2, -0.1, 0.4]), [1.0, 2.0, 3.0])
    Tn = retract_pose(T, np.concatenate([rho, omega]))
    np.testing.assert_allclose(Tn.R, T.R @ exp_so3(omega), atol=1e-12)
    np.testing.assert_allclose(Tn.t, T.t + T.R @ rho, atol=1e-12)
