"""Schur elimination of point blocks and the reduced dense solve."""
from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .._kernels import get_backend
from .system import BlockSparseSystem, SingularBlockError


def schur_reduce(sys: BlockSparseSystem, backend=None):
    """Return ``(H_red, b_red, H_pp_inv)`` for the reduced camera/object system."""
    kern = get_backend(backend)
    H_red, b_red, Vinv, status = kern.schur_reduce(
        np.ascontiguousarray(sys.H_coco), np.ascontiguousarray(sys.b_co), np.ascontiguousarray(sys.H_pp),
        np.ascontiguousarray(sys.b_p), sys.pair_ptr, sys.pair_co, np.ascontiguousarray(sys.pair_blocks))
    if status >= 0:
        raise SingularBlockError(sys.layout.p_keys[status])
    return H_red, b_red, Vinv


def back_substitute(sys: BlockSparseSystem, Vinv, x_co, b_p=None, backend=None) -> np.ndarray:
    """``x_P = V^-1 (b_P - W^T x_CO)`` with ``V = H_PP`` and ``W = H_{CO,P}``."""
    kern = get_backend(backend)
    b_p = sys.b_p if b_p is None else b_p
    return kern.back_substitute(np.ascontiguousarray(Vinv), np.ascontiguousarray(b_p), sys.pair_ptr,
                                sys.pair_co, np.ascontiguousarray(sys.pair_blocks),
                                np.ascontiguousarray(x_co, dtype=float))


def solve_dense_spd(H, b) -> np.ndarray:
    if H.shape[0] == 0:
        return np.zeros(0)
    try:
        return cho_solve(cho_factor(H, lower=True, check_finite=False), b, check_finite=False)
    except LinAlgError:
        return np.linalg.lstsq(H, b, rcond=None)[0]


def solve_schur(sys: BlockSparseSystem, backend=None) -> np.ndarray:
    """Solve ``H x = b`` through the reduced system; returns the full ``x``."""
    H_red, b_red, Vinv = schur_reduce(sys, backend)
    x_co = solve_dense_spd(H_red, b_red)
    x_p = back_substitute(sys, Vinv, x_co, backend=backend)
    return np.concatenate([x_co, x_p.reshape(-1)])


def solve_dense(sys: BlockSparseSystem) -> np.ndarray:
    """Oracle path: factor the full assembled matrix."""
    H, b = sys.to_dense()
    return np.linalg.solve(H, b)
