"""Residuals and analytic Jacobians of the four BA factor families.

Every residual is ``measurement - prediction`` (or the motion-model analogue),
and Jacobians are taken with respect to the local increments defined by
:func:`retract_value`: right-multiplicative for poses, additive otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .camera import StereoIntrinsics, StereoObservation, Z_MIN
from .manifold import Pose, Twist, exp_so3, hat, retract_pose, right_jacobian_so3

DEFAULT_HUBER_DELTA = float(np.sqrt(7.815))
DEFAULT_SIGMA_V = 0.5
DEFAULT_SIGMA_W = 0.1
DEFAULT_SIGMA_XYZ = 0.05


class InvalidIntervalError(ValueError):
    pass


@dataclass
class FactorEvaluation:
    residual: np.ndarray
    jacobians: tuple
    information: np.ndarray
    valid: bool = True

    def whitened_sq_norm(self) -> float:
        r = self.residual
        return float(r @ self.information @ r)


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "huber"
    delta: float = DEFAULT_HUBER_DELTA

    def __post_init__(self):
        if self.kind not in ("none", "huber"):
            raise ValueError(f"unknown robust loss {self.kind!r}")
        if not self.delta > 0:
            raise ValueError("huber delta must be positive")


NO_LOSS = RobustLoss("none")


def huber_apply(loss: RobustLoss, s: float):
    """Robustified cost and IRLS weight for a squared whitened norm ``s``."""
    if s < 0:
        raise ValueError("squared norm must be non-negative")
    d = loss.delta
    if loss.kind == "none" or s <= d * d:
        return float(s), 1.0
    root = np.sqrt(s)
    return float(2.0 * d * root - d * d), float(d / root)


def huber_apply_batch(loss: RobustLoss, s: np.ndarray):
    s = np.asarray(s, dtype=float)
    if loss.kind == "none":
        return s.copy(), np.ones_like(s)
    d = loss.delta
    root = np.sqrt(s)
    outer = s > d * d
    cost = np.where(outer, 2.0 * d * root - d * d, s)
    weight = np.where(outer, d / np.where(outer, root, 1.0), 1.0)
    return cost, weight


def information_for_interval(base_sigma, dt: float) -> np.ndarray:
    """Information of a random-walk increment over ``dt`` seconds.

    ``base_sigma`` holds per-unit-time standard deviations; the covariance
    grows linearly with the interval.
    """
    if not dt > 0:
        raise InvalidIntervalError(f"interval must be positive, got {dt}")
    sig = np.asarray(base_sigma, dtype=float)
    return np.diag(1.0 / (dt * sig ** 2))


def _reprojection_info(sigma_px: float) -> np.ndarray:
    return np.eye(3) / (sigma_px * sigma_px)


def _project(Xc, intr: StereoIntrinsics):
    X, Y, Z = Xc
    iz = 1.0 / Z
    pred = np.array([intr.fx * X * iz + intr.cx,
                     intr.fy * Y * iz + intr.cy,
                     intr.fx * (X - intr.b) * iz + intr.cx])
    P = np.array([[intr.fx * iz, 0.0, -intr.fx * X * iz * iz],
                  [0.0, intr.fy * iz, -intr.fy * Y * iz * iz],
                  [intr.fx * iz, 0.0, -intr.fx * (X - intr.b) * iz * iz]])
    return pred, P


def _invalid(n_res: int, dofs: Sequence[int], info: np.ndarray) -> FactorEvaluation:
    return FactorEvaluation(np.zeros(n_res), tuple(np.zeros((n_res, d)) for d in dofs), info, valid=False)


def static_reprojection(T_cw: Pose, x_w, obs: StereoObservation, intr: StereoIntrinsics,
                        sigma_px: float = 1.0, z_min: float = Z_MIN) -> FactorEvaluation:
    info = _reprojection_info(sigma_px)
    x_w = np.asarray(x_w, dtype=float)
    Xc = T_cw.R @ x_w + T_cw.t
    if not Xc[2] > z_min:
        return _invalid(3, (6, 3), info)
    pred, P = _project(Xc, intr)
    r = obs.as_array() - pred
    J_cam = np.empty((3, 6))
    J_cam[:, :3] = -P @ T_cw.R
    J_cam[:, 3:] = P @ T_cw.R @ hat(x_w)
    J_pt = -P @ T_cw.R
    return FactorEvaluation(r, (J_cam, J_pt), info)


def object_reprojection(T_cw: Pose, T_wo: Pose, x_o, obs: StereoObservation, intr: StereoIntrinsics,
                        sigma_px: float = 1.0, z_min: float = Z_MIN) -> FactorEvaluation:
    info = _reprojection_info(sigma_px)
    x_o = np.asarray(x_o, dtype=float)
    Xw = T_wo.R @ x_o + T_wo.t
    Xc = T_cw.R @ Xw + T_cw.t
    if not Xc[2] > z_min:
        return _invalid(3, (6, 6, 3), info)
    pred, P = _project(Xc, intr)
    r = obs.as_array() - pred
    PRc = P @ T_cw.R
    J_cam = np.empty((3, 6))
    J_cam[:, :3] = -PRc
    J_cam[:, 3:] = PRc @ hat(Xw)
    PRcRo = PRc @ T_wo.R
    J_obj = np.empty((3, 6))
    J_obj[:, :3] = -PRcRo
    J_obj[:, 3:] = PRcRo @ hat(x_o)
    return FactorEvaluation(r, (J_cam, J_obj, -PRcRo), info)


def constant_velocity(twist_i: Twist, twist_ip1: Twist, dt: float,
                      sigma_v: float = DEFAULT_SIGMA_V, sigma_w: float = DEFAULT_SIGMA_W) -> FactorEvaluation:
    info = information_for_interval([sigma_v] * 3 + [sigma_w] * 3, dt)
    r = twist_ip1.as_vector() - twist_i.as_vector()
    return FactorEvaluation(r, (-np.eye(6), np.eye(6)), info)


def velocity_coupling(T_wo_i: Pose, T_wo_ip1: Pose, twist_i: Twist, x_o, dt: float,
                      sigma_xyz: float = DEFAULT_SIGMA_XYZ) -> FactorEvaluation:
    """Rigid-motion consistency of one object point between two observations.

    Residual (world metres): ``T_{i+1} x - T_i dT(twist_i, dt) x``.
    """
    info = information_for_interval([sigma_xyz] * 3, dt)
    x_o = np.asarray(x_o, dtype=float)
    wdt = twist_i.angular * dt
    dR = exp_so3(wdt)
    y = dR @ x_o + twist_i.linear * dt
    R0, R1 = T_wo_i.R, T_wo_ip1.R
    r = (R1 @ x_o + T_wo_ip1.t) - (R0 @ y + T_wo_i.t)

    J_i = np.empty((3, 6))
    J_i[:, :3] = -R0
    J_i[:, 3:] = R0 @ hat(y)
    J_ip1 = np.empty((3, 6))
    J_ip1[:, :3] = R1
    J_ip1[:, 3:] = -R1 @ hat(x_o)
    # d(dR x)/d(dw) = -dR [x]x Jr(w dt) dt
    J_tw = np.empty((3, 6))
    J_tw[:, :3] = -R0 * dt
    J_tw[:, 3:] = R0 @ dR @ hat(x_o) @ right_jacobian_so3(wdt) * dt
    J_pt = R1 - R0 @ dR
    return FactorEvaluation(r, (J_i, J_ip1, J_tw, J_pt), info)


def retract_value(value, delta):
    """The manifold update shared by the solver and finite-difference checks."""
    if isinstance(value, Pose):
        return retract_pose(value, delta)
    if isinstance(value, Twist):
        return Twist.from_vector(value.as_vector() + np.asarray(delta))
    return np.asarray(value, dtype=float) + np.asarray(delta)


def value_dof(value) -> int:
    if isinstance(value, (Pose, Twist)):
        return 6
    return 3


def numeric_jacobians(residual_fn: Callable[..., np.ndarray], values: Sequence, eps: float = 1e-6) -> tuple:
    """Central-difference Jacobians of ``residual_fn(*values)`` in local coordinates."""
    values = list(values)
    jacs = []
    for k, v in enumerate(values):
        dof = value_dof(v)
        cols = []
        for d in range(dof):
            step = np.zeros(dof)
            step[d] = eps
            plus = values.copy()
            minus = values.copy()
            plus[k] = retract_value(v, step)
            minus[k] = retract_value(v, -step)
            cols.append((np.asarray(residual_fn(*plus)) - np.asarray(residual_fn(*minus))) / (2 * eps))
        jacs.append(np.stack(cols, axis=1))
    return tuple(jacs)


def with_numeric_jacobians(evaluation_fn: Callable[..., FactorEvaluation], n_vars: int,
                           eps: float = 1e-6) -> Callable[..., FactorEvaluation]:
    """Wrap a factor so its Jacobians come from central differences.

    The first ``n_vars`` positional arguments are the connected variables.
    """
    def wrapped(*args, **kwargs):
        ev = evaluation_fn(*args, **kwargs)
        if not ev.valid:
            return ev
        rest = args[n_vars:]

        def res(*vals):
            return evaluation_fn(*vals, *rest, **kwargs).residual
        return FactorEvaluation(ev.residual, numeric_jacobians(res, args[:n_vars], eps), ev.information)
    return wrapped
