"""Timing sweeps for the reduction and the reduced solve.

Systems are synthesized directly in block form (no factor evaluation), so the
timings isolate the two linear-algebra stages.
"""
from __future__ import annotations

import time

import numpy as np
from threadpoolctl import threadpool_limits

from .linear import schur_reduce, solve_dense_spd
from .system import BlockLayout, BlockSparseSystem
from ..graph import camera_key, map_point_key


def synthetic_system(n_c: int, n_mp: int, seed: int = 0) -> BlockSparseSystem:
    """SPD system with ``n_c`` cameras and ``n_mp`` points, each seen by every camera."""
    rng = np.random.default_rng(seed)
    layout = BlockLayout([camera_key(i) for i in range(n_c)], [map_point_key(l) for l in range(n_mp)])
    n_pairs = n_c * n_mp
    pair_blocks = 0.1 * rng.standard_normal((n_pairs, 6, 3)) / np.sqrt(n_c)
    A = 0.1 * rng.standard_normal((n_mp, 3, 3))
    H_pp = np.eye(3) * 2.0 + A @ A.transpose(0, 2, 1)
    H_coco = np.eye(6 * n_c) * (2.0 + n_mp)
    return BlockSparseSystem(
        layout, H_coco, rng.standard_normal(6 * n_c), H_pp, rng.standard_normal((n_mp, 3)),
        np.arange(0, n_pairs + 1, n_c, dtype=np.int64), np.tile(np.arange(n_c, dtype=np.int64), n_mp),
        pair_blocks)


def _best_time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def complexity_probe(reduce_sizes=((20, 2000), (20, 4000)), solve_sizes=((150, 10), (300, 10)),
                     repeats: int = 5, backend=None, threads: int = 1) -> list:
    """Time ``schur_reduce`` and the reduced dense solve over ``(n_c, n_mp)`` sizes.

    Returns rows ``{"stage", "n_c", "n_mp", "seconds"}`` with the best of
    ``repeats`` runs each.
    """
    rows = []
    with threadpool_limits(limits=threads):
        for n_c, n_mp in reduce_sizes:
            sys = synthetic_system(n_c, n_mp)
            t = _best_time(lambda: schur_reduce(sys, backend), repeats)
            rows.append({"stage": "reduce", "n_c": n_c, "n_mp": n_mp, "seconds": t})
        for n_c, n_mp in solve_sizes:
            sys = synthetic_system(n_c, n_mp)
            H_red, b_red, _ = schur_reduce(sys, backend)
            t = _best_time(lambda: solve_dense_spd(H_red, b_red), repeats)
            rows.append({"stage": "solve", "n_c": n_c, "n_mp": n_mp, "seconds": t})
    return rows


def format_table(rows) -> str:
    lines = [f"{'stage':<8}{'n_c':>6}{'n_mp':>8}{'seconds':>14}"]
    for r in rows:
        lines.append(f"{r['stage']:<8}{r['n_c']:>6}{r['n_mp']:>8}{r['seconds']:>14.6f}")
    return "\n".join(lines) + "\n"
