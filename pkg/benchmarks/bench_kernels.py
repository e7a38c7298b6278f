"""Head-to-head timing of the numpy and numba element-kernel variants.

Both variants of every kernel in ``KERNEL_PAIRS`` run on the same random
inputs; the script reports per-call times, the speedup, and the maximum
disagreement between the two results (which must sit at rounding level).

    python benchmarks/bench_kernels.py --grid-n 201 --repeats 7

With FLOWGRAD_NO_NUMBA=1 the loop variants run as plain Python; expect
them to lose badly, which is the point of shipping both.
"""

import argparse
import time

import numpy as np

from flowgrad.accel import USE_NUMBA
from flowgrad.grid import StructuredGrid
from flowgrad.kernels import KERNEL_PAIRS


def _inputs(name, grid, rng):
    q = grid.quad
    n_elems = grid.n_elems
    field = rng.random((n_elems, 4)) + 0.5
    gelem = rng.standard_normal((n_elems, 4, 4))
    if name.startswith("diffusion"):
        lead = field if name.endswith("fwd") else gelem
        return (lead, q.wdet, q.dndx, q.dndy)
    if name.startswith("advection"):
        if name.endswith("fwd"):
            return (field, rng.random((n_elems, 4)), q.wdet, q.n, q.dndx, q.dndy)
        return (gelem, q.wdet, q.n, q.dndx, q.dndy)
    lead = field if name.endswith("fwd") else gelem
    return (lead, q.wdet, q.n)


def _agreement(a, b):
    if isinstance(a, tuple):
        return max(_agreement(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(a - b)))


def _time(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--grid-n", type=int, default=201,
                        help="nodes per side (default 201 -> 40000 elements)")
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repeats; the best run counts")
    args = parser.parse_args()

    grid = StructuredGrid(args.grid_n)
    rng = np.random.default_rng(0)
    mode = "numba" if USE_NUMBA else "python loops (FLOWGRAD_NO_NUMBA)"
    print(f"{grid.n_elems} elements per call, best of {args.repeats}; "
          f"loop variant: {mode}\n")
    header = f"{'kernel':<16} {'numpy ms':>9} {'loop ms':>9} {'speedup':>8} {'max diff':>10}"
    print(header)
    print("-" * len(header))
    for name, (np_fn, loop_fn) in KERNEL_PAIRS.items():
        inputs = _inputs(name, grid, rng)
        ref = np_fn(*inputs)
        out = loop_fn(*inputs)  # warmup doubles as the JIT compile
        diff = _agreement(ref, out)
        t_np = _time(np_fn, inputs, args.repeats)
        t_loop = _time(loop_fn, inputs, args.repeats)
        print(f"{name:<16} {t_np * 1e3:>9.3f} {t_loop * 1e3:>9.3f} "
              f"{t_np / t_loop:>7.2f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
