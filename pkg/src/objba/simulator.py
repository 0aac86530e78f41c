"""Synthetic stereo scenes with moving rigid objects and exact ground truth.

The world frame follows the camera convention (x right, y down, z forward).
Camera and object bodies move by right-composing the decoupled increment
``(Exp(w dt), v dt)`` of their body-frame twists.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .bbox import CAR_PRIOR, Box2D, Box3D, ClassPrior, project_box
from .camera import (BehindCameraError, StereoIntrinsics, StereoObservation, backproject, in_image,
                     project_stereo)
from .factors import DEFAULT_SIGMA_V, DEFAULT_SIGMA_W, RobustLoss
from .graph import (ConstantVelocityFactor, ObjectReprojectionFactor, Problem, StaticReprojectionFactor,
                    VarKind, VelocityCouplingFactor, camera_key, map_point_key, object_point_key, object_pose_key,
                    twist_key)
from .manifold import Pose, Twist, delta_transform, exp_so3

MIN_DEPTH = 0.5


class ConfigError(ValueError):
    """Invalid scene or run configuration; the message names the field."""


class SceneError(RuntimeError):
    pass


class TrackNotCreated(ValueError):
    pass


# -- configuration ------------------------------------------------------------------

@dataclass
class TwistSegment:
    start_frame: int
    linear: list
    angular: list


@dataclass
class ObjectSpec:
    rotvec: list
    translation: list
    twists: list
    n_points: int = 30
    extent: list = field(default_factory=lambda: [4.0, 1.5, 1.8])
    label: str = "car"


@dataclass
class SceneConfig:
    n_frames: int = 10
    frame_dt: float = 0.1
    intrinsics: dict = field(default_factory=lambda: {"fx": 718.856, "fy": 718.856, "cx": 607.19,
                                                      "cy": 185.22, "b": 0.54, "width": 1242,
                                                      "height": 375})
    camera_twists: list = field(default_factory=lambda: [TwistSegment(0, [0.0, 0.0, 5.0], [0.0, 0.02, 0.0])])
    n_static: int = 200
    static_bounds: list = field(default_factory=lambda: [[-20.0, -3.0, 8.0], [20.0, 3.0, 50.0]])
    objects: list = field(default_factory=list)
    sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    id_dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")
        need(isinstance(self.n_frames, int) and self.n_frames >= 2, "n_frames", "integer >= 2 required")
        need(self.frame_dt > 0, "frame_dt", "must be > 0")
        need(self.sigma_px >= 0, "sigma_px", "must be >= 0")
        need(0 <= self.outlier_fraction < 1, "outlier_fraction", "must be in [0, 1)")
        need(0 <= self.id_dropout < 1, "id_dropout", "must be in [0, 1)")
        need(self.n_static >= 0, "n_static", "must be >= 0")
        need(len(self.camera_twists) >= 1, "camera_twists", "at least one segment required")
        try:
            self.stereo_intrinsics()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"intrinsics: {exc}") from None
        lo, hi = np.asarray(self.static_bounds, dtype=float)
        need(np.all(hi > lo), "static_bounds", "upper corner must exceed lower corner")
        for idx, ob in enumerate(self.objects):
            need(ob.n_points >= 0, f"objects[{idx}].n_points", "must be >= 0")
            need(np.all(np.asarray(ob.extent, dtype=float) > 0), f"objects[{idx}].extent", "must be > 0")
            need(len(ob.twists) >= 1, f"objects[{idx}].twists", "at least one segment required")

    def stereo_intrinsics(self) -> StereoIntrinsics:
        return StereoIntrinsics(**self.intrinsics)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
        try:
            if "camera_twists" in d:
                d["camera_twists"] = [TwistSegment(**s) for s in d["camera_twists"]]
            if "objects" in d:
                objs = []
                for i, o in enumerate(d["objects"]):
                    o = dict(o)
                    o["twists"] = [TwistSegment(**s) for s in o.get("twists", [])]
                    objs.append(ObjectSpec(**o))
                d["objects"] = objs
        except TypeError as exc:
            raise ConfigError(f"objects/camera_twists: {exc}") from None
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SceneConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<file>: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError("<file>: top level must be an object")
        return cls.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def default_objects() -> list:
    """Two cars ahead of the camera, one driving straight, one turning."""
    yaw = [0.0, -np.pi / 2, 0.0]
    return [
        ObjectSpec(yaw, [-3.0, 0.8, 14.0], [TwistSegment(0, [6.0, 0.0, 0.0], [0.0, 0.0, 0.0])]),
        ObjectSpec(yaw, [3.5, 0.8, 22.0], [TwistSegment(0, [3.0, 0.0, 0.0], [0.0, -0.2, 0.0])]),
    ]


def acceptance_scene(sigma_px: float = 0.0, seed: int = 0) -> SceneConfig:
    """10 frames, 200 static points, 2 objects x 30 points, constant twists."""
    return SceneConfig(n_frames=10, n_static=200, objects=default_objects(), sigma_px=sigma_px, seed=seed)


# -- dataset ------------------------------------------------------------------------

@dataclass(frozen=True)
class ObsRecord:
    frame: int
    point_id: int
    object_id: int  # -1 for static points
    obs: StereoObservation
    is_outlier: bool = False
    instance_visible: bool = True


@dataclass
class ObjectTruth:
    poses: list  # T_WO per frame
    twists: list  # body twist for interval i -> i+1
    points: dict  # j -> object-frame point
    dims: np.ndarray
    label: str

    @property
    def box(self) -> Box3D:
        return Box3D(Pose.identity(), self.dims)


@dataclass
class Dataset:
    config: SceneConfig
    intrinsics: StereoIntrinsics
    timestamps: list
    camera_poses: list  # T_CW per frame
    static_points: dict
    objects: dict
    observations: list
    boxes2d: dict  # (frame, object) -> Box2D

    def frame_observations(self, i: int) -> list:
        return [o for o in self.observations if o.frame == i]

    def object_frames(self, k: int) -> list:
        return sorted({o.frame for o in self.observations if o.object_id == k})


def _segment_twist(segments, i) -> Twist:
    seg = [s for s in segments if s.start_frame <= i]
    s = max(seg, key=lambda s: s.start_frame) if seg else segments[0]
    return Twist(s.linear, s.angular)


def _integrate(T0: Pose, segments, n_frames: int, dt: float):
    poses, twists = [T0], []
    for i in range(n_frames - 1):
        tw = _segment_twist(segments, i)
        twists.append(tw)
        poses.append(poses[-1] @ delta_transform(tw, dt))
    return poses, twists


def _sample_box_surface(rng, dims, n):
    """Uniform samples on the surface of a centered box."""
    dims = np.asarray(dims, dtype=float)
    areas = np.array([dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * dims
    side = rng.choice([-0.5, 0.5], size=n)
    pts[np.arange(n), face_axis] = side * dims[face_axis]
    return pts


def visible(X_c, intr: StereoIntrinsics) -> bool:
    if X_c[2] < MIN_DEPTH:
        return False
    obs = project_stereo(X_c, intr)
    return in_image(obs, intr) and 0 <= obs.u_r < intr.width


def generate(cfg: SceneConfig) -> Dataset:
    """Deterministic synthetic dataset for ``cfg`` (all randomness from ``cfg.seed``)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    intr = cfg.stereo_intrinsics()
    dt = cfg.frame_dt
    n = cfg.n_frames
    timestamps = [i * dt for i in range(n)]
    T_wc, _ = _integrate(Pose.identity(), cfg.camera_twists, n, dt)
    T_cw = [T.inverse() for T in T_wc]

    lo, hi = np.asarray(cfg.static_bounds, dtype=float)
    static = {}
    tries = 0
    while len(static) < cfg.n_static and tries < 200 * max(cfg.n_static, 1):
        tries += 1
        x = lo + rng.random(3) * (hi - lo)
        if visible(T_cw[0].apply(x), intr):
            static[len(static)] = x

    objects = {}
    for k, spec in enumerate(cfg.objects):
        T0 = Pose(exp_so3(spec.rotvec), spec.translation)
        poses, twists = _integrate(T0, spec.twists, n, dt)
        pts = _sample_box_surface(rng, spec.extent, spec.n_points)
        objects[k] = ObjectTruth(poses, twists, {j: pts[j] for j in range(spec.n_points)},
                                 np.asarray(spec.extent, dtype=float), spec.label)

    observations = []
    boxes2d = {}
    for i in range(n):
        for l, x in static.items():
            Xc = T_cw[i].apply(x)
            if visible(Xc, intr):
                observations.append(_observe(rng, cfg, intr, i, l, -1, Xc))
        for k, ob in objects.items():
            T = T_cw[i] @ ob.poses[i]
            n_seen = 0
            for j, x in ob.points.items():
                Xc = T.apply(x)
                if visible(Xc, intr):
                    observations.append(_observe(rng, cfg, intr, i, j, k, Xc))
                    n_seen += 1
            if n_seen:
                try:
                    boxes2d[(i, k)] = project_box(ob.box, ob.poses[i], T_cw[i], intr)
                except (BehindCameraError, ValueError):
                    pass
    if not observations:
        raise SceneError("configuration yields no visible points")
    return Dataset(cfg, intr, timestamps, T_cw, static, objects, observations, boxes2d)


def _observe(rng, cfg, intr, i, pid, oid, Xc) -> ObsRecord:
    z = project_stereo(Xc, intr).as_array()
    z = z + rng.normal(0.0, cfg.sigma_px, 3) if cfg.sigma_px > 0 else z
    outlier = bool(cfg.outlier_fraction > 0 and rng.random() < cfg.outlier_fraction)
    if outlier:
        disp = z[0] - z[2]
        z[0] = rng.uniform(0, intr.width)
        z[2] = z[0] - disp
    shown = not (oid >= 0 and cfg.id_dropout > 0 and rng.random() < cfg.id_dropout)
    return ObsRecord(i, pid, oid, StereoObservation.from_array(z), outlier, shown)


# -- front-end pieces --------------------------------------------------------------

def initialize_object_track(observations, T_cw: Pose, intr: StereoIntrinsics, min_points: int = 8):
    """Pose at the centroid of the backprojected points with identity rotation.

    Returns ``(T_wo, points)`` where ``points[n]`` is the object-frame
    coordinate of ``observations[n]``.
    """
    obs = list(observations)
    if len(obs) < min_points:
        raise TrackNotCreated(f"need {min_points} observations to create a track, got {len(obs)}")
    T_wc = T_cw.inverse()
    world = np.array([T_wc.apply(backproject(o, intr)) for o in obs])
    c = world.mean(axis=0)
    return Pose(np.eye(3), c), world - c


def predict_and_match(T_wo: Pose, twist: Twist, dt: float, points: dict, T_cw_next: Pose,
                      observations, intr: StereoIntrinsics, gate_px: float = 8.0) -> list:
    """Greedy one-to-one matching of predicted track points to new observations.

    Returns ``(point_id, observation_index)`` pairs whose stereo-pixel
    distance is strictly below ``gate_px``.
    """
    obs = np.array([o.as_array() for o in observations]).reshape(-1, 3)
    if gate_px <= 0 or len(obs) == 0 or not points:
        return []
    T = T_cw_next @ T_wo @ delta_transform(twist, dt)
    ids, preds = [], []
    for j, x in points.items():
        Xc = T.apply(x)
        if Xc[2] > MIN_DEPTH:
            ids.append(j)
            preds.append(project_stereo(Xc, intr).as_array())
    if not ids:
        return []
    d = np.linalg.norm(np.asarray(preds)[:, None, :] - obs[None, :, :], axis=2)
    cand = np.argwhere(d < gate_px)
    order = np.lexsort((cand[:, 1], cand[:, 0], d[cand[:, 0], cand[:, 1]]))
    used_p, used_o, out = set(), set(), []
    for a, b in cand[order]:
        if a in used_p or b in used_o:
            continue
        used_p.add(a)
        used_o.add(b)
        out.append((ids[a], int(b)))
    return sorted(out)


def keyframe_trigger(ds: Dataset, frame: int, min_static: int = 50, min_object_points: int = 10):
    """Local-BA trigger a keyframe at ``frame`` would fire, or ``None``.

    Observation counts stand in for front-end tracking quality: the camera is
    weak below ``min_static`` static observations, an object is weak when it
    was seen in the previous frame and now has fewer than ``min_object_points``
    instance-labelled observations.
    """
    obs = ds.frame_observations(frame)
    cam_weak = sum(o.object_id < 0 for o in obs) < min_static
    prev = {o.object_id for o in ds.frame_observations(frame - 1) if o.object_id >= 0} if frame > 0 else set()
    counts = {k: 0 for k in prev}
    for o in obs:
        if o.object_id in counts and o.instance_visible:
            counts[o.object_id] += 1
    obj_weak = any(c < min_object_points for c in counts.values())
    if cam_weak and obj_weak:
        return "both"
    if cam_weak:
        return "camera_weak"
    if obj_weak:
        return "object_weak"
    return None


# -- problem construction ------------------------------------------------------------

@dataclass
class PerturbMagnitudes:
    cam_trans: float = 0.1
    cam_rot_deg: float = 2.0
    point: float = 0.1
    obj_trans: float = 0.1
    obj_rot_deg: float = 2.0
    twist_frac: float = 0.2

    @classmethod
    def zero(cls) -> "PerturbMagnitudes":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def build_problem(ds: Dataset, values: dict | None = None, loss: RobustLoss | None = None,
                  sigma_v: float | None = None, sigma_w: float | None = None) -> Problem:
    """Factor graph over all frames; ground truth values unless ``values`` is given.

    The first camera and the first pose of each track are fixed (gauge).
    """
    p = Problem(ds.intrinsics, loss=loss or RobustLoss(),
                sigma_v=DEFAULT_SIGMA_V if sigma_v is None else sigma_v,
                sigma_w=DEFAULT_SIGMA_W if sigma_w is None else sigma_w)
    sig = ds.config.sigma_px if ds.config.sigma_px > 0 else 1.0
    dt = ds.config.frame_dt
    for i, t in enumerate(ds.timestamps):
        p.timestamps[i] = t
        p.add_variable(camera_key(i), ds.camera_poses[i], fixed=(i == 0))
    seen_static = sorted({o.point_id for o in ds.observations if o.object_id < 0})
    for l in seen_static:
        p.add_variable(map_point_key(l), ds.static_points[l])
    for k, ob in ds.objects.items():
        frames = ds.object_frames(k)
        if not frames:
            continue
        f0, f1 = frames[0], frames[-1]
        for i in range(f0, f1 + 1):
            p.add_variable(object_pose_key(k, i), ob.poses[i], fixed=(i == f0))
            if i < f1:
                p.add_variable(twist_key(k, i), ob.twists[i])
        for j in sorted({o.point_id for o in ds.observations if o.object_id == k}):
            p.add_variable(object_point_key(j, k), ob.points[j])
    for o in ds.observations:
        if o.object_id < 0:
            p.add_factor(StaticReprojectionFactor(camera_key(o.frame), map_point_key(o.point_id), o.obs, sig))
        else:
            p.add_factor(ObjectReprojectionFactor(camera_key(o.frame), object_pose_key(o.object_id, o.frame),
                                                  object_point_key(o.point_id, o.object_id), o.obs, sig))
    for k in ds.objects:
        frames = ds.object_frames(k)
        if not frames:
            continue
        pts = sorted(key.ids[0] for key in p.values if key.kind is VarKind.ObjectPoint and key.track == k)
        for i in range(frames[0], frames[-1]):
            if i + 1 < frames[-1]:
                p.add_factor(ConstantVelocityFactor(twist_key(k, i), twist_key(k, i + 1), dt))
            for j in pts:
                p.add_factor(VelocityCouplingFactor(object_pose_key(k, i), object_pose_key(k, i + 1),
                                                    twist_key(k, i), object_point_key(j, k), dt))
    if values:
        p.values.update(values)
    return p


def _rand_rot(rng, max_deg):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * np.deg2rad(max_deg) * rng.uniform(-1.0, 1.0))


def perturb(ds: Dataset, mags: PerturbMagnitudes | None = None, seed: int = 0, **kwargs) -> Problem:
    """Ground-truth problem with seeded perturbations; gauge anchors stay exact."""
    mags = PerturbMagnitudes() if mags is None else mags
    rng = np.random.default_rng(seed)
    p = build_problem(ds, **kwargs)
    for key in sorted(p.values, key=lambda k: (k.kind.value, k.ids)):
        v = p.values[key]
        kind = key.kind.value
        if key in p.fixed:
            continue
        if kind == "CameraPose":
            T_wc = v.inverse()
            T_wc = Pose(_rand_rot(rng, mags.cam_rot_deg) @ T_wc.R,
                        T_wc.t + rng.uniform(-mags.cam_trans, mags.cam_trans, 3))
            p.values[key] = T_wc.inverse()
        elif kind == "ObjectPose":
            p.values[key] = Pose(_rand_rot(rng, mags.obj_rot_deg) @ v.R,
                                 v.t + rng.uniform(-mags.obj_trans, mags.obj_trans, 3))
        elif kind == "ObjectTwist":
            vec = v.as_vector()
            p.values[key] = Twist.from_vector(vec * (1.0 + rng.uniform(-mags.twist_frac, mags.twist_frac, 6)))
        else:
            p.values[key] = v + rng.uniform(-mags.point, mags.point, 3)
    return p


def ground_truth_values(ds: Dataset) -> dict:
    return dict(build_problem(ds).values)


# -- text format -------------------------------------------------------------------

DATASET_HEADER = "OBJBA-DATASET 1"


def _f(x) -> str:
    return repr(float(x))


def _pose_fields(T: Pose) -> str:
    return " ".join(_f(a) for a in [*T.R.ravel(), *T.t])


def _parse_pose(tok) -> Pose:
    nums = [float(x) for x in tok[:12]]
    return Pose(np.array(nums[:9]).reshape(3, 3), nums[9:12])


def dataset_to_text(ds: Dataset) -> str:
    lines = [DATASET_HEADER, "CONFIG " + json.dumps(ds.config.to_dict(), sort_keys=True)]
    for i, (t, T) in enumerate(zip(ds.timestamps, ds.camera_poses)):
        lines.append(f"FRAME {i} {_f(t)} {_pose_fields(T)}")
    for l in sorted(ds.static_points):
        lines.append(f"POINT {l} " + " ".join(_f(a) for a in ds.static_points[l]))
    for k in sorted(ds.objects):
        ob = ds.objects[k]
        lines.append(f"OBJECT {k} {ob.label} " + " ".join(_f(a) for a in ob.dims))
        for i, T in enumerate(ob.poses):
            lines.append(f"OBJPOSE {k} {i} {_pose_fields(T)}")
        for i, tw in enumerate(ob.twists):
            lines.append(f"TWIST {k} {i} " + " ".join(_f(a) for a in tw.as_vector()))
        for j in sorted(ob.points):
            lines.append(f"OBJPOINT {k} {j} " + " ".join(_f(a) for a in ob.points[j]))
    for o in ds.observations:
        lines.append(f"OBS {o.frame} {o.point_id} {o.object_id} {_f(o.obs.u_l)} {_f(o.obs.v_l)} "
                     f"{_f(o.obs.u_r)} {int(o.is_outlier)} {int(o.instance_visible)}")
    for (i, k) in sorted(ds.boxes2d):
        lines.append(f"BOX2D {i} {k} " + " ".join(_f(a) for a in ds.boxes2d[(i, k)].as_array()))
    return "\n".join(lines) + "\n"


def dataset_from_text(text: str) -> Dataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != DATASET_HEADER:
        raise SceneError("missing or unsupported dataset header")
    cfg = None
    ts, cams, static, objs, obs, boxes = {}, {}, {}, {}, [], {}
    for ln in lines[1:]:
        tag, _, rest = ln.partition(" ")
        tok = rest.split()
        if tag == "CONFIG":
            cfg = SceneConfig.from_dict(json.loads(rest))
        elif tag == "FRAME":
            i = int(tok[0])
            ts[i] = float(tok[1])
            cams[i] = _parse_pose(tok[2:])
        elif tag == "POINT":
            static[int(tok[0])] = np.array([float(x) for x in tok[1:4]])
        elif tag == "OBJECT":
            objs[int(tok[0])] = ObjectTruth({}, {}, {}, np.array([float(x) for x in tok[2:5]]), tok[1])
        elif tag == "OBJPOSE":
            objs[int(tok[0])].poses[int(tok[1])] = _parse_pose(tok[2:])
        elif tag == "TWIST":
            objs[int(tok[0])].twists[int(tok[1])] = Twist.from_vector([float(x) for x in tok[2:8]])
        elif tag == "OBJPOINT":
            objs[int(tok[0])].points[int(tok[1])] = np.array([float(x) for x in tok[2:5]])
        elif tag == "OBS":
            obs.append(ObsRecord(int(tok[0]), int(tok[1]), int(tok[2]),
                                 StereoObservation(*(float(x) for x in tok[3:6])),
                                 tok[6] == "1", tok[7] == "1"))
        elif tag == "BOX2D":
            boxes[(int(tok[0]), int(tok[1]))] = Box2D(*(float(x) for x in tok[2:6]))
        else:
            raise SceneError(f"unknown dataset record {tag!r}")
    if cfg is None:
        raise SceneError("dataset has no CONFIG record")
    for ob in objs.values():
        ob.poses = [ob.poses[i] for i in sorted(ob.poses)]
        ob.twists = [ob.twists[i] for i in sorted(ob.twists)]
    n = len(ts)
    return Dataset(cfg, cfg.stereo_intrinsics(), [ts[i] for i in range(n)], [cams[i] for i in range(n)],
                   static, objs, obs, boxes)


def class_prior_for(label: str) -> ClassPrior:
    if label == "car":
        return CAR_PRIOR
    return ClassPrior(label, [1.0, 1.0, 1.0], [0.5, 0.5, 0.5])


__all__ = [
    "ConfigError", "Dataset", "ObjectSpec", "ObjectTruth", "ObsRecord", "PerturbMagnitudes", "SceneConfig",
    "SceneError", "TrackNotCreated", "TwistSegment", "acceptance_scene", "build_problem", "class_prior_for",
    "dataset_from_text", "dataset_to_text", "default_objects", "generate", "ground_truth_values",
    "initialize_object_track", "keyframe_trigger", "perturb", "predict_and_match", "visible",
]
