"""SO(3)/SE(3) primitives.

Rotations are 3x3 matrices. Poses map points as ``x -> R @ x + t``.
Pose increments are 6-vectors ``[rho, omega]`` applied on the right:
``R' = R Exp(omega)``, ``t' = t + R rho``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(v) @ u == cross(v, u)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def vee(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def exp_so3(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    # 2 sin^2(theta/2) avoids the cancellation in 1 - cos(theta)
    a = np.sin(theta) / theta
    b = 2.0 * np.sin(0.5 * theta) ** 2 / theta ** 2
    return np.eye(3) + a * W + b * W @ W


def log_so3(R, *, return_near_pi: bool = False):
    """Rotation vector of ``R``.

    The principal branch is returned; for angles within ``NEAR_PI`` of pi the
    axis sign is ambiguous and a fixed branch is chosen. Pass
    ``return_near_pi=True`` to also get that flag.
    """
    R = np.asarray(R, dtype=float)
    s = 0.5 * vee(R - R.T)
    sin_t = np.linalg.norm(s)
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(sin_t, np.clip(cos_t, -1.0, 1.0))
    near_pi = bool(np.pi - theta < NEAR_PI)
    if theta < SMALL_ANGLE:
        w = s * (1.0 + theta ** 2 / 6.0)
    elif cos_t > -0.9:
        w = s * (theta / sin_t)
    else:
        # axis from the symmetric part: (R + R^T)/2 - cos I = (1 - cos) a a^T
        B = 0.5 * (R + R.T) - cos_t * np.eye(3)
        i = int(np.argmax(np.diag(B)))
        a = B[:, i] / np.sqrt(B[i, i])
        if a @ s < 0.0:
            a = -a
        elif sin_t == 0.0 and a[np.argmax(np.abs(a))] < 0.0:
            a = -a
        w = theta * a / np.linalg.norm(a)
    if return_near_pi:
        return w, near_pi
    return w


def right_jacobian_so3(theta_vec) -> np.ndarray:
    """Right Jacobian: ``Exp(th + d) ~= Exp(th) Exp(Jr(th) d)``."""
    th = np.asarray(theta_vec, dtype=float)
    theta = np.linalg.norm(th)
    W = hat(th)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    a = 2.0 * np.sin(0.5 * theta) ** 2 / theta ** 2
    if theta < 1e-3:
        b = 1.0 / 6.0 - theta ** 2 / 120.0 + theta ** 4 / 5040.0
    else:
        b = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) - a * W + b * W @ W


def _frozen(a, shape) -> np.ndarray:
    # C order so products do not depend on how the array was produced
    arr = np.array(a, dtype=float, order="C").reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(self.R, (3, 3)))
        object.__setattr__(self, "t", _frozen(self.t, (3,)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def apply(self, x) -> np.ndarray:
        return transform_point(self, x)

    def allclose(self, other: "Pose", atol: float = 1e-12) -> bool:
        return (np.allclose(self.R, other.R, rtol=0, atol=atol)
                and np.allclose(self.t, other.t, rtol=0, atol=atol))

    def __repr__(self) -> str:
        return f"Pose(rotvec={np.round(log_so3(self.R), 6).tolist()}, t={np.round(self.t, 6).tolist()})"


@dataclass(frozen=True, eq=False)
class Twist:
    """Linear (m/s) and angular (rad/s) velocity of a rigid body."""

    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        lin = _frozen(self.linear, (3,))
        ang = _frozen(self.angular, (3,))
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(ang))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    @classmethod
    def from_vector(cls, x) -> "Twist":
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3:6])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.R @ b.R, a.R @ b.t + a.t)


def inverse(a: Pose) -> Pose:
    Rt = a.R.T
    return Pose(Rt, -Rt @ a.t)


def transform_point(a: Pose, x) -> np.ndarray:
    return a.R @ np.asarray(x, dtype=float) + a.t


def delta_transform(twist: Twist, dt: float) -> Pose:
    """Decoupled motion increment ``(Exp(w dt), v dt)``."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    return Pose(exp_so3(twist.angular * dt), twist.linear * dt)


def retract_pose(T: Pose, delta) -> Pose:
    delta = np.asarray(delta, dtype=float)
    return Pose(T.R @ exp_so3(delta[3:6]), T.t + T.R @ delta[:3])


def local_coordinates(T0: Pose, T1: Pose) -> np.ndarray:
    """Inverse of :func:`retract_pose`: ``retract_pose(T0, d) == T1``."""
    return np.concatenate([T0.R.T @ (T1.t - T0.t), log_so3(T0.R.T @ T1.R)])


def rotation_angle(R) -> float:
    return float(np.linalg.norm(log_so3(R)))


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))


# -- batched forms used by the solver's linearization --------------------------

def hat_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _so3_coeffs(theta: np.ndarray):
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(th) / th)
    b = np.where(small, 0.5, 2.0 * np.sin(0.5 * th) ** 2 / th ** 2)
    return small, th, a, b


def exp_so3_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    _, _, a, b = _so3_coeffs(theta)
    W = hat_batch(w)
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * (W @ W)


def right_jacobian_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    small, th, _, a = _so3_coeffs(theta)
    series = 1.0 / 6.0 - theta ** 2 / 120.0 + theta ** 4 / 5040.0
    b = np.where(small | (theta < 1e-3), series, (th - np.sin(th)) / th ** 3)
    W = hat_batch(w)
    return np.eye(3) - a[..., None, None] * W + b[..., None, None] * (W @ W)
