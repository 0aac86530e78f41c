import numpy as np
import pytest

from objba import simulator as S
from objba.camera import StereoIntrinsics
from objba.manifold import Pose, Twist, random_rotation


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def intr():
    return StereoIntrinsics(fx=500.0, fy=480.0, cx=320.0, cy=240.0, b=0.5, width=640, height=480)


def random_pose(rng, max_angle=np.pi, scale=1.0) -> Pose:
    return Pose(random_rotation(rng, max_angle), scale * rng.normal(size=3))


def random_twist(rng, v_scale=2.0, w_scale=1.0) -> Twist:
    return Twist(v_scale * rng.normal(size=3), w_scale * rng.normal(size=3))


def small_scene(seed: int = 0, n_frames: int = 3, n_static: int = 10, n_points: int = 6,
                sigma_px: float = 0.5) -> S.SceneConfig:
    """A scene small enough for dense oracles (< 60 variables)."""
    obj = S.ObjectSpec([0.0, -np.pi / 2, 0.0], [-1.5, 0.5, 12.0],
                       [S.TwistSegment(0, [4.0, 0.0, 0.0], [0.0, 0.3, 0.0])], n_points=n_points)
    return S.SceneConfig(n_frames=n_frames, n_static=n_static, objects=[obj], sigma_px=sigma_px, seed=seed)


@pytest.fixture(scope="session")
def zero_noise_dataset():
    return S.generate(S.acceptance_scene(0.0, seed=0))
