"""3D bounding boxes: perpendicular-plane RANSAC, projection, multi-view refinement, IoU."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import ConvexHull

from .camera import Z_MIN, BehindCameraError, StereoIntrinsics
from .manifold import Pose, exp_so3, log_so3, rotation_angle

# world vertical axis (camera convention: y points down)
UP_AXIS = 1
_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)


class NotObservableError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Box3D:
    """Box with ``pose`` mapping box coordinates to the parent frame and full extents ``dims``."""

    pose: Pose
    dims: np.ndarray

    def __post_init__(self):
        d = np.array(self.dims, dtype=float).reshape(3)
        if not np.all(d > 0):
            raise ValueError(f"box dims must be positive, got {d}")
        d.setflags(write=False)
        object.__setattr__(self, "dims", d)

    def corners(self) -> np.ndarray:
        return (self.pose.R @ (0.5 * _SIGNS * self.dims).T).T + self.pose.t

    def placed(self, T: Pose) -> "Box3D":
        """The same box expressed in the frame that ``T`` maps into."""
        return Box3D(T @ self.pose, self.dims)

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))


@dataclass(frozen=True)
class Box2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(f"degenerate 2D box {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.u_min, self.v_min, self.u_max, self.v_max])

    @property
    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)


@dataclass(frozen=True, eq=False)
class ClassPrior:
    label: str
    mean_dims: np.ndarray
    std_dims: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean_dims, dtype=float).reshape(3)
        s = np.array(self.std_dims, dtype=float).reshape(3)
        if not (np.all(m > 0) and np.all(s > 0)):
            raise ValueError("prior dims and std devs must be positive")
        object.__setattr__(self, "mean_dims", m)
        object.__setattr__(self, "std_dims", s)


CAR_PRIOR = ClassPrior("car", [4.0, 1.8, 1.5], [0.5, 0.2, 0.2])


def canonicalize(box: Box3D) -> Box3D:
    """Reorder axes so dims are descending; keeps the rotation proper."""
    order = np.argsort(-box.dims, kind="stable")
    R = box.pose.R[:, order]
    if np.linalg.det(R) < 0:
        R = R * np.array([1.0, 1.0, -1.0])
    return Box3D(Pose(R, box.pose.t), box.dims[order])


def orientation_error(a: Box3D, b: Box3D) -> float:
    """Smallest rotation angle between canonicalized boxes over the box symmetries (radians)."""
    Ra, Rb = canonicalize(a).pose.R, canonicalize(b).pose.R
    best = np.pi
    for d in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]):
        best = min(best, rotation_angle(Ra.T @ Rb @ np.diag(d)))
    return best


# -- projection ---------------------------------------------------------------

def project_box(box: Box3D, T_wo: Pose, T_cw: Pose, intr: StereoIntrinsics, clip: bool = True) -> Box2D:
    """Axis-aligned hull of the left-image projection of the 8 corners.

    Corners closer than ``Z_MIN`` are clamped to that depth.
    """
    T = T_cw @ T_wo
    Xc = (T.R @ box.corners().T).T + T.t
    center = T.apply(box.pose.t)
    if center[2] <= Z_MIN:
        raise BehindCameraError(f"box center depth {center[2]:.3g} m")
    Z = np.maximum(Xc[:, 2], Z_MIN)
    u = intr.fx * Xc[:, 0] / Z + intr.cx
    v = intr.fy * Xc[:, 1] / Z + intr.cy
    lo = [u.min(), v.min()]
    hi = [u.max(), v.max()]
    if clip:
        lo = [max(lo[0], 0.0), max(lo[1], 0.0)]
        hi = [min(hi[0], float(intr.width)), min(hi[1], float(intr.height))]
    return Box2D(lo[0], lo[1], hi[0], hi[1])


def _project_edges(box: Box3D, T_wo: Pose, T_cw: Pose, intr: StereoIntrinsics) -> np.ndarray:
    try:
        return project_box(box, T_wo, T_cw, intr).as_array()
    except (BehindCameraError, ValueError):
        return None


# -- RANSAC initialization --------------------------------------------------------

@dataclass
class RansacConfig:
    iters: int = 200
    inlier_tol: float = 0.05
    min_iou: float = 0.3
    min_plane_frac: float = 0.08
    seed: int = 0


def _plane(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    nn = np.linalg.norm(n)
    if nn < 1e-9:
        return None
    return n / nn


def _match_hidden_dim(observed, prior: ClassPrior) -> float:
    """Assign observed extents to the closest prior dims; return the unmatched prior dim."""
    remaining = list(range(3))
    for ext in sorted(observed, reverse=True):
        j = min(remaining, key=lambda r: abs(prior.mean_dims[r] - ext))
        remaining.remove(j)
    return float(prior.mean_dims[remaining[0]])


def _box_from_axes(points, axes) -> tuple:
    proj = points @ axes
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    return axes @ (0.5 * (lo + hi)), hi - lo


def _one_plane_box(points, n1, inl1, viewpoint, prior: ClassPrior):
    face = points[inl1]
    c = face.mean(axis=0)
    # in-plane axes from the spread of the face
    q = face - c
    q = q - np.outer(q @ n1, n1)
    _, _, Vt = np.linalg.svd(q, full_matrices=False)
    e2 = Vt[0] - (Vt[0] @ n1) * n1
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(n1, e2)
    center_in, ext = _box_from_axes(face, np.stack([e2, e3], axis=1))
    depth = _match_hidden_dim(ext, prior)
    toward = viewpoint - c if viewpoint is not None else n1
    n = n1 if n1 @ toward >= 0 else -n1
    offset = (c @ n1) * n1
    center = center_in + offset - 0.5 * depth * n
    R = np.stack([n1, e2, e3], axis=1)
    return R, center, np.array([depth, ext[0], ext[1]])


def fit_box_ransac(points, prior: ClassPrior, T_wo: Pose | None = None, T_cw: Pose | None = None,
                   box2d: Box2D | None = None, intr: StereoIntrinsics | None = None,
                   cfg: RansacConfig | None = None):
    """Box hypothesis from two perpendicular planes fitted to a track-frame point cloud.

    When a camera and 2D box are supplied the winner maximizes the IoU of
    its projection with ``box2d`` (ties broken by inlier count) and ``None``
    is returned when no hypothesis reaches ``cfg.min_iou``. Otherwise the
    hypothesis with most inliers wins.
    """
    cfg = cfg or RansacConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n < 10:
        raise ValueError(f"need at least 10 points for a box, got {n}")
    rng = np.random.default_rng(cfg.seed)
    use_iou = box2d is not None and T_wo is not None and T_cw is not None and intr is not None
    viewpoint = (T_cw @ T_wo).inverse().t if (T_wo is not None and T_cw is not None) else None
    min_inl = max(3, int(cfg.min_plane_frac * n))
    best, best_score = None, (-1.0, -1)

    for _ in range(cfg.iters):
        i0, i1, i2 = rng.choice(n, 3, replace=False)
        n1 = _plane(pts[i0], pts[i1], pts[i2])
        if n1 is None:
            continue
        d1 = (pts - pts[i0]) @ n1
        inl1 = np.abs(d1) < cfg.inlier_tol
        if inl1.sum() < min_inl:
            continue
        rest = np.flatnonzero(~inl1)
        hyp = None
        if len(rest) >= 2:
            a, b = pts[rng.choice(rest, 2, replace=False)]
            n2 = np.cross(n1, b - a)
            nn = np.linalg.norm(n2)
            if nn > 1e-9:
                n2 /= nn
                inl2 = (~inl1) & (np.abs((pts - a) @ n2) < cfg.inlier_tol)
                if inl2.sum() >= min_inl:
                    R = np.stack([n1, n2, np.cross(n1, n2)], axis=1)
                    sel = pts[inl1 | inl2]
                    center, dims = _box_from_axes(sel, R)
                    hyp = (R, center, dims, int(inl1.sum() + inl2.sum()))
        if hyp is None:
            R, center, dims = _one_plane_box(pts, n1, inl1, viewpoint, prior)
            hyp = (R, center, dims, int(inl1.sum()))
        R, center, dims, n_inl = hyp
        if np.any(dims <= 1e-6):
            continue
        box = Box3D(Pose(R, center), dims)
        if use_iou:
            proj = _project_edges(box, T_wo, T_cw, intr)
            if proj is None:
                continue
            score = (iou_2d(Box2D(*proj), box2d), n_inl)
        else:
            score = (0.0, n_inl)
        if score > best_score:
            best, best_score = box, score
    if best is None or (use_iou and best_score[0] < cfg.min_iou):
        return None
    return canonicalize(best)


# -- multi-view refinement --------------------------------------------------------

@dataclass
class RefineResult:
    box: Box3D
    initial_cost: float
    final_cost: float
    edge_rmse_px: float
    n_views: int
    history: list = field(default_factory=list)


def refine_box(box: Box3D, views, intr: StereoIntrinsics, prior: ClassPrior,
               weights=(1.0, 1.0, 0.1), max_nfev: int = 200) -> RefineResult:
    """Adjust box pose and dims so projected edges match 2D detections.

    ``views`` is a sequence of ``(T_wo, T_cw, Box2D)``. The objective sums
    squared edge differences, a dimension prior and a prior tying the pose to
    its initial value, weighted by ``weights``.
    """
    views = list(views)
    if len(views) < 3:
        raise NotObservableError(f"box refinement needs at least 3 views, got {len(views)}")
    w_box, w_dim, w_pose = (float(np.sqrt(w)) for w in weights)
    R0, t0 = box.pose.R, box.pose.t
    dets = [v[2].as_array() for v in views]

    def unpack(x):
        return Box3D(Pose(R0 @ exp_so3(x[:3]), x[3:6]), np.maximum(x[6:9], 1e-6))

    def residuals(x):
        b = unpack(x)
        out = []
        for (T_wo, T_cw, _), det in zip(views, dets):
            e = _project_edges(b, T_wo, T_cw, intr)
            out.append(w_box * (e - det if e is not None else np.full(4, 1e3)))
        out.append(w_dim * (x[6:9] - prior.mean_dims) / prior.std_dims)
        out.append(w_pose * np.concatenate([x[:3], x[3:6] - t0]))
        return np.concatenate(out)

    x0 = np.concatenate([np.zeros(3), t0, box.dims])
    r0 = residuals(x0)
    c0 = float(r0 @ r0)
    sol = least_squares(residuals, x0, method="lm", max_nfev=max_nfev, x_scale="jac")
    x = sol.x if float(sol.fun @ sol.fun) <= c0 else x0
    r = residuals(x)
    n_edge = 4 * len(views)
    return RefineResult(canonicalize(unpack(x)), c0, float(r @ r),
                        float(np.sqrt(np.mean((r[:n_edge] / w_box) ** 2))) if w_box > 0 else float("nan"),
                        len(views))


# -- overlap ----------------------------------------------------------------------

def iou_2d(a: Box2D, b: Box2D) -> float:
    w = min(a.u_max, b.u_max) - max(a.u_min, b.u_min)
    h = min(a.v_max, b.v_max) - max(a.v_min, b.v_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return float(inter / (a.area + b.area - inter))


def _ground_axes():
    return [i for i in range(3) if i != UP_AXIS]


def footprint(box: Box3D) -> np.ndarray:
    """Counter-clockwise bird-view polygon of a world-placed box."""
    pts = box.corners()[:, _ground_axes()]
    hull = ConvexHull(pts)
    return pts[hull.vertices]


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return float(0.5 * abs(x @ np.roll(y, -1) - y @ np.roll(x, -1)))


def clip_convex(subject, clipper) -> np.ndarray:
    """Sutherland-Hodgman clipping of a polygon by a counter-clockwise convex polygon."""
    out = [tuple(p) for p in subject]
    m = len(clipper)
    for i in range(m):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % m]
        edge = b - a

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0

        def cross_pt(p, q):
            p, q = np.asarray(p), np.asarray(q)
            d = q - p
            den = edge[0] * d[1] - edge[1] * d[0]
            t = (edge[1] * (p[0] - a[0]) - edge[0] * (p[1] - a[1])) / den
            return tuple(p + t * d)

        src, out = out, []
        for j in range(len(src)):
            cur, prev = src[j], src[j - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross_pt(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross_pt(prev, cur))
    return np.array(out, dtype=float).reshape(-1, 2)


def _bev_intersection(a: Box3D, b: Box3D):
    pa, pb = footprint(a), footprint(b)
    inter = polygon_area(clip_convex(pa, pb))
    return inter, polygon_area(pa), polygon_area(pb)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird-view IoU of two world-placed boxes."""
    inter, aa, ab = _bev_intersection(a, b)
    union = aa + ab - inter
    return float(inter / union) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Bird-view intersection times vertical overlap, over the union volume."""
    inter, _, _ = _bev_intersection(a, b)
    ya, yb = a.corners()[:, UP_AXIS], b.corners()[:, UP_AXIS]
    h = min(ya.max(), yb.max()) - max(ya.min(), yb.min())
    if h <= 0 or inter <= 0:
        return 0.0
    iv = inter * h
    return float(iv / (a.volume + b.volume - iv))


def box_from_pose_dims(center, rotvec, dims) -> Box3D:
    return Box3D(Pose(exp_so3(rotvec), center), dims)


def box_to_fields(box: Box3D) -> list:
    return [*box.pose.t, *log_so3(box.pose.R), *box.dims]
