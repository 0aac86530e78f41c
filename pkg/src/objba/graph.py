"""Factor-graph container for BA with moving rigid objects."""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from . import factors as F
from .camera import StereoIntrinsics, StereoObservation
from .manifold import Pose, Twist


class VarKind(enum.Enum):
    CameraPose = "CameraPose"
    ObjectPose = "ObjectPose"
    ObjectTwist = "ObjectTwist"
    MapPoint = "MapPoint"
    ObjectPoint = "ObjectPoint"


POSE_KINDS = (VarKind.CameraPose, VarKind.ObjectPose, VarKind.ObjectTwist)
POINT_KINDS = (VarKind.ObjectPoint, VarKind.MapPoint)


class VariableKey(NamedTuple):
    kind: VarKind
    ids: tuple

    def __str__(self):
        return f"{self.kind.value}:{','.join(str(i) for i in self.ids)}"

    @classmethod
    def parse(cls, text: str) -> "VariableKey":
        kind, ids = text.split(":")
        return cls(VarKind(kind), tuple(int(i) for i in ids.split(",")))

    @property
    def frame(self):
        """Frame index for time-indexed variables, else ``None``."""
        if self.kind is VarKind.CameraPose:
            return self.ids[0]
        if self.kind in (VarKind.ObjectPose, VarKind.ObjectTwist):
            return self.ids[1]
        return None

    @property
    def track(self):
        if self.kind in (VarKind.ObjectPose, VarKind.ObjectTwist):
            return self.ids[0]
        if self.kind is VarKind.ObjectPoint:
            return self.ids[1]
        return None


def camera_key(i: int) -> VariableKey:
    return VariableKey(VarKind.CameraPose, (i,))


def object_pose_key(k: int, i: int) -> VariableKey:
    return VariableKey(VarKind.ObjectPose, (k, i))


def twist_key(k: int, i: int) -> VariableKey:
    return VariableKey(VarKind.ObjectTwist, (k, i))


def map_point_key(l: int) -> VariableKey:
    return VariableKey(VarKind.MapPoint, (l,))


def object_point_key(j: int, k: int) -> VariableKey:
    return VariableKey(VarKind.ObjectPoint, (j, k))


def sort_key(key: VariableKey):
    """Canonical ordering: C, then per track (pose, twist) by frame, Op by track, Mp."""
    kind = key.kind
    if kind is VarKind.CameraPose:
        return (0, key.ids[0], 0, 0)
    if kind in (VarKind.ObjectPose, VarKind.ObjectTwist):
        return (1, key.ids[0], key.ids[1], 0 if kind is VarKind.ObjectPose else 1)
    if kind is VarKind.ObjectPoint:
        return (2, key.ids[1], key.ids[0], 0)
    return (3, key.ids[0], 0, 0)


# -- factor records -------------------------------------------------------------

@dataclass
class StaticReprojectionFactor:
    camera: VariableKey
    point: VariableKey
    obs: StereoObservation
    sigma_px: float = 1.0
    type_name = "StaticReprojection"

    @property
    def keys(self):
        return (self.camera, self.point)

    def evaluate(self, values, p: "Problem") -> F.FactorEvaluation:
        fn = F.static_reprojection
        if p.numeric_jacobians:
            fn = F.with_numeric_jacobians(fn, 2)
        return fn(values[self.camera], values[self.point], self.obs, p.intrinsics, self.sigma_px)

    def params(self):
        return [self.obs.u_l, self.obs.v_l, self.obs.u_r, self.sigma_px]


@dataclass
class ObjectReprojectionFactor:
    camera: VariableKey
    object_pose: VariableKey
    point: VariableKey
    obs: StereoObservation
    sigma_px: float = 1.0
    type_name = "ObjectReprojection"

    @property
    def keys(self):
        return (self.camera, self.object_pose, self.point)

    def evaluate(self, values, p: "Problem") -> F.FactorEvaluation:
        fn = F.object_reprojection
        if p.numeric_jacobians:
            fn = F.with_numeric_jacobians(fn, 3)
        return fn(values[self.camera], values[self.object_pose], values[self.point],
                  self.obs, p.intrinsics, self.sigma_px)

    def params(self):
        return [self.obs.u_l, self.obs.v_l, self.obs.u_r, self.sigma_px]


@dataclass
class ConstantVelocityFactor:
    twist_i: VariableKey
    twist_ip1: VariableKey
    dt: float
    type_name = "ConstantVelocity"

    @property
    def keys(self):
        return (self.twist_i, self.twist_ip1)

    def evaluate(self, values, p: "Problem") -> F.FactorEvaluation:
        return F.constant_velocity(values[self.twist_i], values[self.twist_ip1], self.dt,
                                   p.sigma_v, p.sigma_w)

    def params(self):
        return [self.dt]


@dataclass
class VelocityCouplingFactor:
    pose_i: VariableKey
    pose_ip1: VariableKey
    twist_i: VariableKey
    point: VariableKey
    dt: float
    type_name = "VelocityCoupling"

    @property
    def keys(self):
        return (self.pose_i, self.pose_ip1, self.twist_i, self.point)

    def evaluate(self, values, p: "Problem") -> F.FactorEvaluation:
        fn = F.velocity_coupling
        if p.numeric_jacobians:
            fn = F.with_numeric_jacobians(fn, 4)
        return fn(values[self.pose_i], values[self.pose_ip1], values[self.twist_i],
                  values[self.point], self.dt, p.sigma_xyz)

    def params(self):
        return [self.dt]


FACTOR_TYPES = {cls.type_name: cls for cls in (StaticReprojectionFactor, ObjectReprojectionFactor,
                                                ConstantVelocityFactor, VelocityCouplingFactor)}


class ProblemError(ValueError):
    pass


@dataclass
class Problem:
    intrinsics: StereoIntrinsics
    values: dict = field(default_factory=dict)
    fixed: set = field(default_factory=set)
    factors: list = field(default_factory=list)
    timestamps: dict = field(default_factory=dict)
    loss: F.RobustLoss = field(default_factory=F.RobustLoss)
    sigma_v: float = F.DEFAULT_SIGMA_V
    sigma_w: float = F.DEFAULT_SIGMA_W
    sigma_xyz: float = F.DEFAULT_SIGMA_XYZ
    numeric_jacobians: bool = False

    def add_variable(self, key: VariableKey, value, fixed: bool = False):
        if key in self.values:
            raise ProblemError(f"duplicate variable {key}")
        self.values[key] = value
        if fixed:
            self.fixed.add(key)

    def add_factor(self, factor):
        for k in factor.keys:
            if k not in self.values:
                raise ProblemError(f"factor {factor.type_name} references unknown variable {k}")
        self.factors.append(factor)

    def is_fixed(self, key) -> bool:
        return key in self.fixed

    def free_keys(self) -> list:
        return sorted((k for k in self.values if k not in self.fixed), key=sort_key)

    def copy(self) -> "Problem":
        # values are immutable, so a shallow dict copy is enough
        out = copy.copy(self)
        out.values = dict(self.values)
        out.fixed = set(self.fixed)
        out.factors = list(self.factors)
        out.timestamps = dict(self.timestamps)
        return out

    def validate(self):
        frames = sorted(self.timestamps)
        ts = [self.timestamps[i] for i in frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ProblemError("timestamps must be strictly increasing in frame index")
        for f in self.factors:
            for k in f.keys:
                if k not in self.values:
                    raise ProblemError(f"factor references unknown variable {k}")
        for key in self.values:
            if key.kind is VarKind.ObjectPose:
                k, i = key.ids
                succ = [kk for kk in self.values if kk.kind is VarKind.ObjectPose
                        and kk.ids[0] == k and kk.ids[1] > i]
                if succ and twist_key(k, i) not in self.values:
                    raise ProblemError(f"object pose {key} has a successor but no twist")

    def factors_by_variable(self) -> dict:
        out = {k: [] for k in self.values}
        for idx, f in enumerate(self.factors):
            for k in f.keys:
                out[k].append(idx)
        return out

    def time_of(self, key: VariableKey):
        fr = key.frame
        return None if fr is None else self.timestamps.get(fr)


def evaluate_all(p: Problem):
    return [f.evaluate(p.values, p) for f in p.factors]


def cost_breakdown(p: Problem) -> dict:
    """Robust cost per factor family plus the invalid-factor count."""
    out = {name: 0.0 for name in FACTOR_TYPES}
    invalid = 0
    for f in p.factors:
        ev = f.evaluate(p.values, p)
        if not ev.valid:
            invalid += 1
            continue
        c, _ = F.huber_apply(p.loss, ev.whitened_sq_norm())
        out[f.type_name] += c
    out["total"] = sum(out[name] for name in FACTOR_TYPES)
    out["invalid"] = invalid
    return out


def total_cost(p: Problem) -> float:
    """Sum of robustified whitened squared residuals; invalid factors are skipped."""
    return cost_breakdown(p)["total"]


# -- parameter accounting -------------------------------------------------------

@dataclass(frozen=True)
class ParamCount:
    n_cameras: int
    n_objects: int
    n_object_points: int
    n_map_points: int
    N_baseline: int
    N_object_centric: int

    @property
    def ratio(self) -> float:
        return self.N_object_centric / self.N_baseline


def parameter_counts(n_c: int, n_o: int, n_op: int, n_mp: int = 0) -> ParamCount:
    """Parameters to track dynamic points with and without an object frame.

    Map points are reported but, as in the original expressions, do not
    enter either total.
    """
    if min(n_c, n_o, n_op, n_mp) < 0:
        raise ValueError("counts must be non-negative")
    baseline = 6 * n_c + n_c * n_o * 3 * n_op
    centric = 6 * n_c + n_c * 6 * n_o + n_o * 3 * n_op
    return ParamCount(n_c, n_o, n_op, n_mp, baseline, centric)


def build_parameter_skeleton(n_c: int, n_o: int, n_op: int, representation: str = "object_centric",
                             intrinsics: StereoIntrinsics | None = None) -> Problem:
    """Instantiate the variables of a fully-observed problem (no factors).

    ``"object_centric"``: one pose per (object, camera), shared object points.
    ``"baseline"``: every dynamic point is re-created in world coordinates
    for every camera.
    """
    intr = intrinsics or StereoIntrinsics(500, 500, 320, 240, 0.5, 640, 480)
    p = Problem(intr)
    for i in range(n_c):
        p.timestamps[i] = 0.1 * i
        p.add_variable(camera_key(i), Pose.identity())
    if representation == "object_centric":
        for k in range(n_o):
            for i in range(n_c):
                p.add_variable(object_pose_key(k, i), Pose.identity())
                if i + 1 < n_c:
                    p.add_variable(twist_key(k, i), Twist())
            for j in range(n_op):
                p.add_variable(object_point_key(j, k), np.zeros(3))
    elif representation == "baseline":
        l = 0
        for i in range(n_c):
            for k in range(n_o):
                for j in range(n_op):
                    p.add_variable(map_point_key(l), np.zeros(3))
                    l += 1
    else:
        raise ValueError(f"unknown representation {representation!r}")
    return p


def count_dofs(p: Problem, kinds: Iterable[VarKind]) -> int:
    kinds = set(kinds)
    return sum(F.value_dof(v) for k, v in p.values.items() if k.kind in kinds)


# -- local windows -------------------------------------------------------------

TRIGGERS = ("camera_weak", "object_weak", "both")


class EmptyWindowError(ProblemError):
    pass


def build_local_window(p: Problem, trigger: str, t_now: float, window: float = 2.0,
                       tracks: Iterable[int] | None = None) -> Problem:
    """Sub-problem for a local BA triggered at time ``t_now``.

    Free variables are chosen per ``trigger``; every factor touching a free
    variable is kept and the other variables it references are held fixed.
    The earliest free camera, and the earliest pose of any track with no
    fixed pose, are fixed as gauge anchors.
    """
    if trigger not in TRIGGERS:
        raise ValueError(f"unknown trigger {trigger!r}")
    t_lo = t_now - window

    def in_window(key):
        t = p.time_of(key)
        return t is not None and t_lo < t <= t_now

    cams = {k for k in p.values if k.kind is VarKind.CameraPose and in_window(k)}
    if not cams:
        raise EmptyWindowError(f"no camera in ({t_lo}, {t_now}]")

    by_var = p.factors_by_variable()
    free = set(cams)
    if trigger in ("camera_weak", "both"):
        for c in cams:
            for fi in by_var[c]:
                f = p.factors[fi]
                if isinstance(f, StaticReprojectionFactor):
                    free.add(f.point)
    if trigger in ("object_weak", "both"):
        track_set = None if tracks is None else set(tracks)
        for key in p.values:
            if key.track is None or (track_set is not None and key.track not in track_set):
                continue
            if key.kind is VarKind.ObjectPoint or in_window(key):
                free.add(key)
        # object points only if some pose of their track is free
        active_tracks = {k.track for k in free if k.kind is VarKind.ObjectPose}
        free = {k for k in free if k.kind is not VarKind.ObjectPoint or k.track in active_tracks}

    free = {k for k in free if by_var[k] and k not in p.fixed}
    if not free:
        raise EmptyWindowError("window has no optimizable variable")

    keep = sorted({fi for k in free for fi in by_var[k]})
    sub = Problem(p.intrinsics, loss=p.loss, sigma_v=p.sigma_v, sigma_w=p.sigma_w,
                  sigma_xyz=p.sigma_xyz, numeric_jacobians=p.numeric_jacobians)
    for fi in keep:
        for k in p.factors[fi].keys:
            if k not in sub.values:
                sub.add_variable(k, p.values[k], fixed=k not in free)
    for fi in keep:
        sub.add_factor(p.factors[fi])
    frames = {k.frame for k in sub.values if k.frame is not None}
    sub.timestamps = {i: p.timestamps[i] for i in sorted(frames)}

    free_cams = sorted((k for k in sub.values if k.kind is VarKind.CameraPose and k not in sub.fixed),
                       key=sort_key)
    if free_cams:
        sub.fixed.add(free_cams[0])
    for trk in {k.track for k in sub.values if k.kind is VarKind.ObjectPose}:
        poses = sorted((k for k in sub.values if k.kind is VarKind.ObjectPose and k.track == trk),
                       key=sort_key)
        if not any(k in sub.fixed for k in poses):
            sub.fixed.add(poses[0])
    return sub


def gauge_anchors(p: Problem) -> set:
    """First camera and first pose of every track."""
    out = set()
    cams = sorted((k for k in p.values if k.kind is VarKind.CameraPose), key=sort_key)
    if cams:
        out.add(cams[0])
    firsts = {}
    for k in p.values:
        if k.kind is VarKind.ObjectPose:
            trk, i = k.ids
            if trk not in firsts or i < firsts[trk].ids[1]:
                firsts[trk] = k
    out.update(firsts.values())
    return out


# -- text format ---------------------------------------------------------------

PROBLEM_HEADER = "OBJBA-PROBLEM 1"


def _fmt(x) -> str:
    return repr(float(x))


def _value_fields(v) -> list:
    if isinstance(v, Pose):
        return [_fmt(a) for a in v.R.ravel()] + [_fmt(a) for a in v.t]
    if isinstance(v, Twist):
        return [_fmt(a) for a in v.as_vector()]
    return [_fmt(a) for a in np.asarray(v)]


def _parse_value(kind: VarKind, fields):
    nums = [float(x) for x in fields]
    if kind in (VarKind.CameraPose, VarKind.ObjectPose):
        return Pose(np.array(nums[:9]).reshape(3, 3), nums[9:12])
    if kind is VarKind.ObjectTwist:
        return Twist.from_vector(nums)
    return np.array(nums)


def problem_to_text(p: Problem) -> str:
    intr = p.intrinsics
    lines = [PROBLEM_HEADER,
             "INTRINSICS " + " ".join(_fmt(x) for x in (intr.fx, intr.fy, intr.cx, intr.cy, intr.b))
             + f" {intr.width} {intr.height}",
             f"LOSS {p.loss.kind} {_fmt(p.loss.delta)}",
             f"SIGMAS {_fmt(p.sigma_v)} {_fmt(p.sigma_w)} {_fmt(p.sigma_xyz)}"]
    for i in sorted(p.timestamps):
        lines.append(f"TIME {i} {_fmt(p.timestamps[i])}")
    for key in sorted(p.values, key=sort_key):
        lines.append(" ".join(["VAR", str(key), "1" if key in p.fixed else "0",
                               *_value_fields(p.values[key])]))
    for f in p.factors:
        lines.append(" ".join(["FACTOR", f.type_name, *(str(k) for k in f.keys),
                               *(_fmt(x) for x in f.params())]))
    return "\n".join(lines) + "\n"


def problem_from_text(text: str) -> Problem:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].strip() != PROBLEM_HEADER:
        raise ProblemError("missing or unsupported problem header")
    p = None
    pending = []
    for ln in lines[1:]:
        tok = ln.split()
        tag = tok[0]
        if tag == "INTRINSICS":
            v = [float(x) for x in tok[1:6]]
            p = Problem(StereoIntrinsics(*v, int(tok[6]), int(tok[7])))
        elif p is None:
            raise ProblemError("INTRINSICS must precede other records")
        elif tag == "LOSS":
            p.loss = F.RobustLoss(tok[1], float(tok[2]))
        elif tag == "SIGMAS":
            p.sigma_v, p.sigma_w, p.sigma_xyz = (float(x) for x in tok[1:4])
        elif tag == "TIME":
            p.timestamps[int(tok[1])] = float(tok[2])
        elif tag == "VAR":
            key = VariableKey.parse(tok[1])
            p.add_variable(key, _parse_value(key.kind, tok[3:]), fixed=tok[2] == "1")
        elif tag == "FACTOR":
            pending.append(tok[1:])
        else:
            raise ProblemError(f"unknown record {tag!r}")
    for tok in pending:
        name = tok[0]
        if name not in FACTOR_TYPES:
            raise ProblemError(f"unknown factor type {name!r}")
        cls = FACTOR_TYPES[name]
        n_keys = {"StaticReprojection": 2, "ObjectReprojection": 3,
                  "ConstantVelocity": 2, "VelocityCoupling": 4}[name]
        keys = [VariableKey.parse(t) for t in tok[1:1 + n_keys]]
        nums = [float(x) for x in tok[1 + n_keys:]]
        if name in ("StaticReprojection", "ObjectReprojection"):
            obs = StereoObservation(*nums[:3])
            p.add_factor(cls(*keys, obs, nums[3]))
        else:
            p.add_factor(cls(*keys, nums[0]))
    return p
