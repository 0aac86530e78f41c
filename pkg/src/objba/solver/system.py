"""Block-sparse normal equations in the ``[C | O | Op | Mp]`` layout.

``H_{CO,CO}`` is kept dense (its dimension is small by construction), point
self-blocks as a ``(n_p, 3, 3)`` stack and the ``CO``-point coupling as a
list of ``6x3`` blocks, one per (CO variable, point) pair with a factor
between them, stored in point-major CSR order. ``H_{O,Mp}`` and
``H_{Op,Mp}`` have no storage at all.

Convention: ``b = sum J^T W r``; the Gauss-Newton step is ``-H^{-1} b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import factors as F
from .._kernels import get_backend
from ..graph import (ConstantVelocityFactor, ObjectReprojectionFactor, Problem, StaticReprojectionFactor,
                     VarKind, VelocityCouplingFactor)
from ..manifold import exp_so3_batch, hat_batch, right_jacobian_batch

CO_KINDS = (VarKind.CameraPose, VarKind.ObjectPose, VarKind.ObjectTwist)
FAMILIES = (StaticReprojectionFactor, ObjectReprojectionFactor, ConstantVelocityFactor, VelocityCouplingFactor)
# number of CO slots and whether the last key is a point
FAMILY_SHAPE = {
    StaticReprojectionFactor: (1, True, 3),
    ObjectReprojectionFactor: (2, True, 3),
    ConstantVelocityFactor: (2, False, 6),
    VelocityCouplingFactor: (3, True, 3),
}


class AssemblyError(RuntimeError):
    pass


class SingularBlockError(np.linalg.LinAlgError):
    def __init__(self, key):
        super().__init__(f"singular 3x3 block for point {key} (insufficient observations)")
        self.key = key


@dataclass
class BlockLayout:
    co_keys: list
    p_keys: list
    co_index: dict = field(init=False)
    p_index: dict = field(init=False)

    def __post_init__(self):
        self.co_index = {k: i for i, k in enumerate(self.co_keys)}
        self.p_index = {k: i for i, k in enumerate(self.p_keys)}

    @classmethod
    def from_problem(cls, p: Problem) -> "BlockLayout":
        free = p.free_keys()
        return cls([k for k in free if k.kind in CO_KINDS], [k for k in free if k.kind not in CO_KINDS])

    def _count(self, keys, kinds):
        return sum(1 for k in keys if k.kind in kinds)

    @property
    def n_co(self) -> int:
        return len(self.co_keys)

    @property
    def n_p(self) -> int:
        return len(self.p_keys)

    @property
    def dims(self) -> dict:
        """Scalar dimensions of each group."""
        n_c = self._count(self.co_keys, (VarKind.CameraPose,))
        return {"C": 6 * n_c, "O": 6 * (self.n_co - n_c),
                "Op": 3 * self._count(self.p_keys, (VarKind.ObjectPoint,)),
                "Mp": 3 * self._count(self.p_keys, (VarKind.MapPoint,))}

    @property
    def N_CO(self) -> int:
        return 6 * self.n_co

    @property
    def N_P(self) -> int:
        return 3 * self.n_p

    @property
    def size(self) -> int:
        return self.N_CO + self.N_P

    def group_slices(self) -> dict:
        d = self.dims
        out, start = {}, 0
        for name in ("C", "O", "Op", "Mp"):
            out[name] = slice(start, start + d[name])
            start += d[name]
        return out

    def keys(self) -> list:
        return self.co_keys + self.p_keys

    def offset(self, key) -> int:
        if key in self.co_index:
            return 6 * self.co_index[key]
        return self.N_CO + 3 * self.p_index[key]

    @staticmethod
    def dim(key) -> int:
        return 6 if key.kind in CO_KINDS else 3


@dataclass
class BlockSparseSystem:
    layout: BlockLayout
    H_coco: np.ndarray
    b_co: np.ndarray
    H_pp: np.ndarray
    b_p: np.ndarray
    pair_ptr: np.ndarray
    pair_co: np.ndarray
    pair_blocks: np.ndarray
    cost: float = 0.0
    n_invalid: int = 0
    n_residuals: int = 0

    @property
    def pair_p(self) -> np.ndarray:
        return np.repeat(np.arange(self.layout.n_p), np.diff(self.pair_ptr))

    def to_dense(self):
        L = self.layout
        n = L.size
        H = np.zeros((n, n))
        H[:L.N_CO, :L.N_CO] = self.H_coco
        for p in range(L.n_p):
            o = L.N_CO + 3 * p
            H[o:o + 3, o:o + 3] = self.H_pp[p]
        for c, p, blk in zip(self.pair_co, self.pair_p, self.pair_blocks):
            o = L.N_CO + 3 * p
            H[6 * c:6 * c + 6, o:o + 3] = blk
            H[o:o + 3, 6 * c:6 * c + 6] = blk.T
        return H, np.concatenate([self.b_co, self.b_p.reshape(-1)])

    def block_pattern(self) -> np.ndarray:
        """Boolean variable-by-variable pattern of non-zero blocks."""
        L = self.layout
        n = L.n_co + L.n_p
        pat = np.zeros((n, n), dtype=bool)
        Hb = self.H_coco.reshape(L.n_co, 6, L.n_co, 6)
        pat[:L.n_co, :L.n_co] = np.abs(Hb).sum(axis=(1, 3)) > 0
        idx = np.arange(L.n_p)
        pat[L.n_co + idx, L.n_co + idx] = np.abs(self.H_pp).sum(axis=(1, 2)) > 0
        nz = np.abs(self.pair_blocks).sum(axis=(1, 2)) > 0
        pat[self.pair_co[nz], L.n_co + self.pair_p[nz]] = True
        pat[L.n_co + self.pair_p[nz], self.pair_co[nz]] = True
        return pat

    def damped(self, lam: float, min_diag: float = 1e-9) -> "BlockSparseSystem":
        """Copy with ``lam * diag(H)`` added to the diagonal."""
        H = self.H_coco.copy()
        d = np.diag(H).copy()
        H[np.diag_indices_from(H)] = d + lam * np.maximum(d, min_diag)
        Hpp = self.H_pp.copy()
        dp = np.diagonal(Hpp, axis1=1, axis2=2).copy()
        idx = np.arange(3)
        Hpp[:, idx, idx] = dp + lam * np.maximum(dp, min_diag)
        return BlockSparseSystem(self.layout, H, self.b_co, Hpp, self.b_p, self.pair_ptr, self.pair_co,
                                 self.pair_blocks, self.cost, self.n_invalid, self.n_residuals)


# -- linearization ------------------------------------------------------------

@dataclass
class _FamilyPlan:
    cls: type
    factors: list
    co_idx: np.ndarray
    p_idx: np.ndarray
    pair_idx: np.ndarray


@dataclass
class LinearizationPlan:
    """Index structure of a problem; depends only on factor keys and fixed flags."""
    layout: BlockLayout
    families: list
    pair_ptr: np.ndarray
    pair_co: np.ndarray

    @classmethod
    def build(cls, p: Problem, layout: BlockLayout | None = None) -> "LinearizationPlan":
        layout = layout or BlockLayout.from_problem(p)
        grouped = {c: [] for c in FAMILIES}
        for f in p.factors:
            grouped[type(f)].append(f)
        raw = []
        pair_set = set()
        for fam_cls, fs in grouped.items():
            s, has_p, _ = FAMILY_SHAPE[fam_cls]
            co = np.full((len(fs), s), -1, dtype=np.int64)
            pi = np.full(len(fs), -1, dtype=np.int64)
            for n, f in enumerate(fs):
                keys = f.keys
                for a in range(s):
                    co[n, a] = layout.co_index.get(keys[a], -1)
                if has_p:
                    pi[n] = layout.p_index.get(keys[s], -1)
                    if pi[n] >= 0:
                        for a in range(s):
                            if co[n, a] >= 0:
                                pair_set.add((int(pi[n]), int(co[n, a])))
            raw.append((fam_cls, fs, co, pi))
        pairs = sorted(pair_set)
        pair_id = {pr: i for i, pr in enumerate(pairs)}
        pair_p = np.array([pr[0] for pr in pairs], dtype=np.int64)
        pair_co = np.array([pr[1] for pr in pairs], dtype=np.int64)
        pair_ptr = np.zeros(layout.n_p + 1, dtype=np.int64)
        np.add.at(pair_ptr, pair_p + 1, 1)
        pair_ptr = np.cumsum(pair_ptr)
        families = []
        for fam_cls, fs, co, pi in raw:
            pidx = np.full(co.shape, -1, dtype=np.int64)
            for n in range(len(fs)):
                if pi[n] >= 0:
                    for a in range(co.shape[1]):
                        if co[n, a] >= 0:
                            pidx[n, a] = pair_id[(int(pi[n]), int(co[n, a]))]
            families.append(_FamilyPlan(fam_cls, fs, co, pi, pidx))
        return cls(layout, families, pair_ptr, pair_co)


def _stack_R(values, keys):
    return np.array([values[k].R for k in keys]).reshape(-1, 3, 3)


def _stack_t(values, keys):
    return np.array([values[k].t for k in keys]).reshape(-1, 3)


def _stack_vec(values, keys):
    return np.array([np.asarray(values[k], dtype=float) for k in keys]).reshape(-1, 3)


def _stack_twist(values, keys):
    return np.array([values[k].as_vector() for k in keys]).reshape(-1, 6)


def _project_batch(Xc, intr):
    X, Y, Z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / Z
    pred = np.stack([intr.fx * X * iz + intr.cx, intr.fy * Y * iz + intr.cy,
                     intr.fx * (X - intr.b) * iz + intr.cx], axis=1)
    P = np.zeros((len(Z), 3, 3))
    P[:, 0, 0] = intr.fx * iz
    P[:, 0, 2] = -intr.fx * X * iz * iz
    P[:, 1, 1] = intr.fy * iz
    P[:, 1, 2] = -intr.fy * Y * iz * iz
    P[:, 2, 0] = intr.fx * iz
    P[:, 2, 2] = -intr.fx * (X - intr.b) * iz * iz
    return pred, P


def _reproj_batch(p: Problem, fs, with_object: bool, jac: bool):
    v = p.values
    n = len(fs)
    Rc = _stack_R(v, [f.camera for f in fs])
    tc = _stack_t(v, [f.camera for f in fs])
    x = _stack_vec(v, [f.point for f in fs])
    obs = np.array([[f.obs.u_l, f.obs.v_l, f.obs.u_r] for f in fs]).reshape(-1, 3)
    sig = np.array([f.sigma_px for f in fs], dtype=float)
    if with_object:
        Ro = _stack_R(v, [f.object_pose for f in fs])
        to = _stack_t(v, [f.object_pose for f in fs])
        Xw = np.einsum("nij,nj->ni", Ro, x) + to
    else:
        Xw = x
    Xc = np.einsum("nij,nj->ni", Rc, Xw) + tc
    valid = Xc[:, 2] > 1e-3
    Xc_safe = np.where(valid[:, None], Xc, np.array([0.0, 0.0, 1.0]))
    pred, P = _project_batch(Xc_safe, p.intrinsics)
    r = np.where(valid[:, None], obs - pred, 0.0)
    info = np.eye(3)[None] / (sig ** 2)[:, None, None]
    if not jac:
        return r, info, valid, None, None
    s = 2 if with_object else 1
    Jco = np.zeros((n, s, 3, 6))
    PRc = P @ Rc
    Jco[:, 0, :, :3] = -PRc
    Jco[:, 0, :, 3:] = PRc @ hat_batch(Xw)
    if with_object:
        PRcRo = PRc @ Ro
        Jco[:, 1, :, :3] = -PRcRo
        Jco[:, 1, :, 3:] = PRcRo @ hat_batch(x)
        Jp = -PRcRo
    else:
        Jp = -PRc
    return r, info, valid, Jco, Jp


def _cv_batch(p: Problem, fs, jac: bool):
    n = len(fs)
    v = p.values
    ti = _stack_twist(v, [f.twist_i for f in fs])
    tj = _stack_twist(v, [f.twist_ip1 for f in fs])
    dt = np.array([f.dt for f in fs], dtype=float)
    if n and not np.all(dt > 0):
        raise F.InvalidIntervalError("constant-velocity factor with non-positive interval")
    r = tj - ti
    base = np.array([p.sigma_v] * 3 + [p.sigma_w] * 3) ** 2
    info = np.zeros((n, 6, 6))
    info[:, np.arange(6), np.arange(6)] = 1.0 / (dt[:, None] * base[None])
    valid = np.ones(n, dtype=bool)
    if not jac:
        return r, info, valid, None, None
    Jco = np.zeros((n, 2, 6, 6))
    Jco[:, 0] = -np.eye(6)
    Jco[:, 1] = np.eye(6)
    return r, info, valid, Jco, None


def _vc_batch(p: Problem, fs, jac: bool):
    n = len(fs)
    v = p.values
    R0 = _stack_R(v, [f.pose_i for f in fs])
    t0 = _stack_t(v, [f.pose_i for f in fs])
    R1 = _stack_R(v, [f.pose_ip1 for f in fs])
    t1 = _stack_t(v, [f.pose_ip1 for f in fs])
    tw = _stack_twist(v, [f.twist_i for f in fs])
    x = _stack_vec(v, [f.point for f in fs])
    dt = np.array([f.dt for f in fs], dtype=float)
    if n and not np.all(dt > 0):
        raise F.InvalidIntervalError("velocity-coupling factor with non-positive interval")
    wdt = tw[:, 3:] * dt[:, None]
    dR = exp_so3_batch(wdt)
    y = np.einsum("nij,nj->ni", dR, x) + tw[:, :3] * dt[:, None]
    r = (np.einsum("nij,nj->ni", R1, x) + t1) - (np.einsum("nij,nj->ni", R0, y) + t0)
    info = np.eye(3)[None] / (dt * p.sigma_xyz ** 2)[:, None, None]
    valid = np.ones(n, dtype=bool)
    if not jac:
        return r, info, valid, None, None
    Jco = np.zeros((n, 3, 3, 6))
    Jco[:, 0, :, :3] = -R0
    Jco[:, 0, :, 3:] = R0 @ hat_batch(y)
    Jco[:, 1, :, :3] = R1
    Jco[:, 1, :, 3:] = -R1 @ hat_batch(x)
    Jco[:, 2, :, :3] = -R0 * dt[:, None, None]
    Jco[:, 2, :, 3:] = (R0 @ dR @ hat_batch(x) @ right_jacobian_batch(wdt)) * dt[:, None, None]
    Jp = R1 - R0 @ dR
    return r, info, valid, Jco, Jp


def _family_batch(p: Problem, fam: _FamilyPlan, jac: bool):
    cls = fam.cls
    if cls is StaticReprojectionFactor:
        return _reproj_batch(p, fam.factors, False, jac)
    if cls is ObjectReprojectionFactor:
        return _reproj_batch(p, fam.factors, True, jac)
    if cls is ConstantVelocityFactor:
        return _cv_batch(p, fam.factors, jac)
    return _vc_batch(p, fam.factors, jac)


def _family_per_factor(p: Problem, fam: _FamilyPlan):
    """Slow path through each factor's ``evaluate`` (honours numeric-Jacobian mode)."""
    s, has_p, m = FAMILY_SHAPE[fam.cls]
    n = len(fam.factors)
    r = np.zeros((n, m))
    info = np.zeros((n, m, m))
    valid = np.ones(n, dtype=bool)
    Jco = np.zeros((n, s, m, 6))
    Jp = np.zeros((n, m, 3)) if has_p else None
    for i, f in enumerate(fam.factors):
        ev = f.evaluate(p.values, p)
        info[i] = ev.information
        if not ev.valid:
            valid[i] = False
            continue
        r[i] = ev.residual
        for a in range(s):
            Jco[i, a] = ev.jacobians[a]
        if has_p:
            Jp[i] = ev.jacobians[s]
    return r, info, valid, Jco, Jp


def linearize(p: Problem, plan: LinearizationPlan | None = None, backend=None,
              per_factor: bool | None = None) -> BlockSparseSystem:
    """Assemble ``H = sum J^T W J`` and ``b = sum J^T W r`` with robust weights folded into W."""
    plan = plan or LinearizationPlan.build(p)
    kern = get_backend(backend)
    L = plan.layout
    per_factor = p.numeric_jacobians if per_factor is None else per_factor
    H = np.zeros((L.N_CO, L.N_CO))
    b_co = np.zeros(L.N_CO)
    H_pp = np.zeros((L.n_p, 3, 3))
    b_p = np.zeros((L.n_p, 3))
    pair_blocks = np.zeros((len(plan.pair_co), 6, 3))
    cost = 0.0
    n_invalid = 0
    n_res = 0
    for fam in plan.families:
        if not fam.factors:
            continue
        if per_factor:
            r, info, valid, Jco, Jp = _family_per_factor(p, fam)
        else:
            r, info, valid, Jco, Jp = _family_batch(p, fam, True)
        bad = ~(np.isfinite(Jco).all(axis=(1, 2, 3)) & np.isfinite(r).all(axis=1))
        if Jp is not None:
            bad |= ~np.isfinite(Jp).all(axis=(1, 2))
        if bad.any():
            f = fam.factors[int(np.flatnonzero(bad)[0])]
            raise AssemblyError(f"non-finite linearization in {f.type_name} factor on {[str(k) for k in f.keys]}")
        s2 = np.einsum("ni,nij,nj->n", r, info, r)
        c, w = F.huber_apply_batch(p.loss, s2)
        w = np.where(valid, w, 0.0)
        cost += float(c[valid].sum())
        n_invalid += int((~valid).sum())
        n_res += int(valid.sum()) * r.shape[1]
        W = np.ascontiguousarray(info * w[:, None, None])
        co_idx = np.where(valid[:, None], fam.co_idx, -1)
        p_idx = np.where(valid, fam.p_idx, -1)
        kern.accumulate(H, b_co, H_pp, b_p, pair_blocks, np.ascontiguousarray(r), W,
                        np.ascontiguousarray(Jco), np.ascontiguousarray(co_idx),
                        None if Jp is None else np.ascontiguousarray(Jp), np.ascontiguousarray(p_idx),
                        np.ascontiguousarray(fam.pair_idx))
    return BlockSparseSystem(L, H, b_co, H_pp, b_p, plan.pair_ptr, plan.pair_co, pair_blocks,
                             cost, n_invalid, n_res)


def assemble(p: Problem, layout: BlockLayout | None = None, backend=None) -> BlockSparseSystem:
    return linearize(p, LinearizationPlan.build(p, layout), backend=backend)


def batch_cost(p: Problem, plan: LinearizationPlan) -> tuple:
    """Robust cost without Jacobians; returns (cost, n_invalid)."""
    cost = 0.0
    n_invalid = 0
    for fam in plan.families:
        if not fam.factors:
            continue
        r, info, valid, _, _ = _family_batch(p, fam, False)
        s2 = np.einsum("ni,nij,nj->n", r, info, r)
        c, _ = F.huber_apply_batch(p.loss, s2)
        cost += float(c[valid].sum())
        n_invalid += int((~valid).sum())
    return cost, n_invalid


def dense_jacobian(p: Problem, layout: BlockLayout | None = None):
    """Stacked whitened Jacobian/residual of all valid factors (test oracle).

    Returns ``(J, r, W)`` with ``H = J^T W J`` and ``b = J^T W r``.
    """
    layout = layout or BlockLayout.from_problem(p)
    rows_J, rows_r, blocks_W = [], [], []
    for f in p.factors:
        ev = f.evaluate(p.values, p)
        if not ev.valid:
            continue
        m = len(ev.residual)
        Jrow = np.zeros((m, layout.size))
        for key, Jk in zip(f.keys, ev.jacobians):
            if key in p.fixed or (key not in layout.co_index and key not in layout.p_index):
                continue
            o = layout.offset(key)
            Jrow[:, o:o + Jk.shape[1]] = Jk
        _, w = F.huber_apply(p.loss, ev.whitened_sq_norm())
        rows_J.append(Jrow)
        rows_r.append(ev.residual)
        blocks_W.append(w * ev.information)
    if not rows_J:
        return np.zeros((0, layout.size)), np.zeros(0), np.zeros((0, 0))
    from scipy.linalg import block_diag
    return np.vstack(rows_J), np.concatenate(rows_r), block_diag(*blocks_W)
