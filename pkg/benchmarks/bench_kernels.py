"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeats N]

Times normal-equation assembly on the acceptance scene and Schur reduction /
back-substitution on a synthetic system, for every available backend, and
checks that the backends agree.
"""
import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from objba import simulator as S
from objba._kernels import available_backends
from objba.solver import LinearizationPlan, back_substitute, linearize, schur_reduce, synthetic_system


def best_of(fn, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--n-c", type=int, default=20)
    ap.add_argument("--n-mp", type=int, default=2000)
    args = ap.parse_args(argv)

    ds = S.generate(S.acceptance_scene(0.5))
    problem = S.perturb(ds, seed=0)
    plan = LinearizationPlan.build(problem)
    system = synthetic_system(args.n_c, args.n_mp)

    results = {}
    with threadpool_limits(limits=1):
        for name in available_backends():
            t_lin, lin = best_of(lambda: linearize(problem, plan, backend=name), args.repeats)
            t_red, red = best_of(lambda: schur_reduce(system, name), args.repeats)
            t_back, x_p = best_of(lambda: back_substitute(system, red[2], red[1], backend=name), args.repeats)
            results[name] = (t_lin, t_red, t_back, lin, red, x_p)

    print(f"{'backend':<10}{'assemble [ms]':>16}{'reduce [ms]':>14}{'backsub [ms]':>14}")
    for name, (t_lin, t_red, t_back, *_) in results.items():
        print(f"{name:<10}{1e3 * t_lin:>16.2f}{1e3 * t_red:>14.2f}{1e3 * t_back:>14.2f}")

    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print(f"speedup   {py[0] / cy[0]:>16.1f}x{py[1] / cy[1]:>13.1f}x{py[2] / cy[2]:>13.1f}x")
        d_h = np.max(np.abs(py[3].H_coco - cy[3].H_coco)) / max(np.max(np.abs(py[3].H_coco)), 1e-300)
        d_r = np.max(np.abs(py[4][0] - cy[4][0])) / max(np.max(np.abs(py[4][0])), 1e-300)
        d_x = np.max(np.abs(py[5] - cy[5])) / max(np.max(np.abs(py[5])), 1e-300)
        print(f"max rel. difference: H {d_h:.2e}, reduced H {d_r:.2e}, x_P {d_x:.2e}")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
