"""Trajectory error (ATE, RPE) and box-tracking precision (TP rate, MOTP)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .bbox import Box2D, Box3D, iou_2d, iou_3d, iou_bev
from .manifold import Pose, rotation_angle


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    timestamps: tuple
    poses: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timestamps)
        ps = tuple(self.poses)
        if len(ts) != len(ps):
            raise MetricError("timestamps and poses differ in length")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise MetricError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", ps)

    def __len__(self):
        return len(self.poses)

    @classmethod
    def from_camera_poses(cls, timestamps, T_cw) -> "Trajectory":
        """Camera trajectory (camera-to-world poses) from world-to-camera transforms."""
        return cls(timestamps, [T.inverse() for T in T_cw])

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def transformed(self, T: Pose) -> "Trajectory":
        return Trajectory(self.timestamps, [T @ p for p in self.poses])


def associate(est: Trajectory, gt: Trajectory, tol: float = 1e-6):
    """Index pairs matched by nearest timestamp within ``tol``."""
    g = np.asarray(gt.timestamps)
    pairs = []
    for i, t in enumerate(est.timestamps):
        if len(g) == 0:
            break
        j = int(np.argmin(np.abs(g - t)))
        if abs(g[j] - t) <= tol:
            pairs.append((i, j))
    return pairs


def align_rigid(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform (no scale) with ``dst ~= R src + t``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return Pose(R, mu_d - R @ mu_s)


def ate(est: Trajectory, gt: Trajectory, tol: float = 1e-6, align: bool = True) -> float:
    """RMSE of position differences after rigid alignment of ``est`` onto ``gt``."""
    pairs = associate(est, gt, tol)
    if len(pairs) < 2:
        raise MetricError(f"need at least 2 associated samples, got {len(pairs)}")
    P = est.positions()[[i for i, _ in pairs]]
    Q = gt.positions()[[j for _, j in pairs]]
    if align:
        T = align_rigid(P, Q)
        P = P @ T.R.T + T.t
    return float(np.sqrt(np.mean(np.sum((P - Q) ** 2, axis=1))))


def _rel(a: Pose, b: Pose) -> Pose:
    return a.inverse() @ b


def rpe(est: Trajectory, gt: Trajectory, mode: str = "per_frame", delta: float = 1, tol: float = 1e-6):
    """Relative pose error ``(translation, rotation in degrees)``.

    ``per_frame``: mean error over pose pairs ``delta`` frames apart, per frame
    step. ``per_distance``: pairs separated by ``delta`` meters of ground-truth
    path, errors normalized to ``delta`` meters (``delta=100`` gives m/100m,
    deg/100m).
    """
    pairs = associate(est, gt, tol)
    E = [est.poses[i] for i, _ in pairs]
    G = [gt.poses[j] for _, j in pairs]
    n = len(pairs)
    t_err, r_err = [], []
    if mode == "per_frame":
        step = int(delta)
        if step < 1 or step >= n:
            raise MetricError(f"frame interval {delta} does not fit a trajectory of {n} samples")
        for i in range(n - step):
            err = _rel(_rel(G[i], G[i + step]), _rel(E[i], E[i + step]))
            t_err.append(np.linalg.norm(err.t) / step)
            r_err.append(np.degrees(rotation_angle(err.R)) / step)
    elif mode == "per_distance":
        pos = np.array([g.t for g in G]).reshape(-1, 3)
        along = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])
        if delta <= 0 or along[-1] < delta:
            raise MetricError(f"distance interval {delta} m exceeds trajectory length {along[-1]:.3f} m")
        for i in range(n):
            j = int(np.searchsorted(along, along[i] + delta))
            if j >= n:
                break
            length = along[j] - along[i]
            err = _rel(_rel(G[i], G[j]), _rel(E[i], E[j]))
            t_err.append(np.linalg.norm(err.t) / length * delta)
            r_err.append(np.degrees(rotation_angle(err.R)) / length * delta)
    else:
        raise ValueError(f"unknown RPE mode {mode!r}")
    return float(np.mean(t_err)), float(np.mean(r_err))


# -- tracking precision ---------------------------------------------------------------

FLAVORS = ("2d", "bev", "3d")


def _iou(a, b, flavor: str) -> float:
    if flavor == "2d":
        return iou_2d(a, b)
    if flavor == "bev":
        return iou_bev(a, b)
    if flavor == "3d":
        return iou_3d(a, b)
    raise ValueError(f"unknown overlap flavor {flavor!r}")


@dataclass(frozen=True)
class MotReport:
    flavor: str
    n_gt: int
    n_est: int
    n_tp: int
    tp_percent: float
    motp_percent: float


def greedy_match(est, gt, flavor: str, min_iou: float):
    """One-to-one matches ``(est_idx, gt_idx, iou)`` taken in decreasing IoU order."""
    cand = []
    for a, e in enumerate(est):
        for b, g in enumerate(gt):
            v = _iou(e, g, flavor)
            if v >= min_iou:
                cand.append((-v, a, b))
    cand.sort()
    used_e, used_g, out = set(), set(), []
    for nv, a, b in cand:
        if a in used_e or b in used_g:
            continue
        used_e.add(a)
        used_g.add(b)
        out.append((a, b, -nv))
    return out


def mot_evaluate(est: dict, gt: dict, flavor: str = "2d", min_iou: float = 0.25) -> MotReport:
    """TP rate and mean IoU over TPs; ``est``/``gt`` map frame -> list of boxes."""
    n_gt = n_est = n_tp = 0
    ious = []
    for fr in sorted(set(gt) | set(est)):
        g = list(gt.get(fr, []))
        e = list(est.get(fr, []))
        n_gt += len(g)
        n_est += len(e)
        m = greedy_match(e, g, flavor, min_iou)
        n_tp += len(m)
        ious.extend(v for _, _, v in m)
    tp = 100.0 * n_tp / n_gt if n_gt else 0.0
    motp = 100.0 * float(np.mean(ious)) if ious else 0.0
    return MotReport(flavor, n_gt, n_est, n_tp, tp, motp)


# -- report table -------------------------------------------------------------------

CSV_COLUMNS = ["track", "ATE", "RPE_t", "RPE_R", "TP_2D", "MOTP_2D", "TP_BV", "MOTP_BV", "TP_3D", "MOTP_3D"]


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "nan"
    return f"{v:.6g}"


def per_track_csv(rows) -> str:
    """CSV text with one row per track; ``rows`` are dicts keyed by ``CSV_COLUMNS``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_track_csv(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        d = {"track": r["track"]}
        for c in CSV_COLUMNS[1:]:
            d[c] = float(r[c])
        out.append(d)
    return out


__all__ = ["Box2D", "Box3D", "CSV_COLUMNS", "FLAVORS", "MetricError", "MotReport", "Trajectory", "align_rigid",
           "associate", "ate", "greedy_match", "mot_evaluate", "per_track_csv", "read_track_csv", "rpe"]
