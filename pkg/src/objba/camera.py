"""Rectified stereo camera model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z_MIN = 1e-3
D_MIN = 0.1


class BehindCameraError(ValueError):
    pass


class FarPointError(ValueError):
    pass


@dataclass(frozen=True)
class StereoIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    b: float
    width: int = 1242
    height: int = 375

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.b < 0:
            raise ValueError("baseline must be non-negative")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def as_tuple(self):
        return (self.fx, self.fy, self.cx, self.cy, self.b)


@dataclass(frozen=True)
class StereoObservation:
    u_l: float
    v_l: float
    u_r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u_l, self.v_l, self.u_r])

    @classmethod
    def from_array(cls, a) -> "StereoObservation":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    @property
    def disparity(self) -> float:
        return self.u_l - self.u_r


def project_stereo(X_c, intr: StereoIntrinsics, z_min: float = Z_MIN) -> StereoObservation:
    X, Y, Z = np.asarray(X_c, dtype=float)
    if not Z > z_min:
        raise BehindCameraError(f"point depth {Z:.3g} m is not beyond z_min={z_min}")
    return StereoObservation(intr.fx * X / Z + intr.cx,
                             intr.fy * Y / Z + intr.cy,
                             intr.fx * (X - intr.b) / Z + intr.cx)


def projection_jacobian(X_c, intr: StereoIntrinsics, z_min: float = Z_MIN) -> np.ndarray:
    """d(u_L, v_L, u_R) / d(X, Y, Z)."""
    X, Y, Z = np.asarray(X_c, dtype=float)
    if not Z > z_min:
        raise BehindCameraError(f"point depth {Z:.3g} m is not beyond z_min={z_min}")
    iz = 1.0 / Z
    iz2 = iz * iz
    return np.array([
        [intr.fx * iz, 0.0, -intr.fx * X * iz2],
        [0.0, intr.fy * iz, -intr.fy * Y * iz2],
        [intr.fx * iz, 0.0, -intr.fx * (X - intr.b) * iz2],
    ])


def backproject(obs: StereoObservation, intr: StereoIntrinsics, d_min: float = D_MIN) -> np.ndarray:
    d = obs.u_l - obs.u_r
    if not d > d_min:
        raise FarPointError(f"disparity {d:.3g} px is below d_min={d_min}")
    Z = intr.fx * intr.b / d
    return np.array([(obs.u_l - intr.cx) * Z / intr.fx,
                     (obs.v_l - intr.cy) * Z / intr.fy,
                     Z])


def in_image(obs: StereoObservation, intr: StereoIntrinsics) -> bool:
    return (0.0 <= obs.u_l < intr.width and 0.0 <= obs.v_l < intr.height
            and 0.0 <= obs.u_r < intr.width)
