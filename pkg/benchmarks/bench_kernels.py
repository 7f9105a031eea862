"""Compare the compiled kernels with their pure-Python twins.

    python benchmarks/bench_kernels.py [--lengths 256,4096] [--width 256]

Prints a CSV of median times and the speed-up of the compiled backend, and
checks that both backends return bit-identical results.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from superscan import kernels
from superscan.bench import median_time_ns


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", default="256,1024,4096,16384")
    ap.add_argument("--width", type=int, default=256, help="independent channels per step")
    ap.add_argument("--trials", type=int, default=9)
    args = ap.parse_args(argv)
    if "compiled" not in kernels.available_backends():
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print("kernel,length,python_ns,compiled_ns,speedup,identical")
    for L in (int(t) for t in args.lengths.split(",")):
        a = rng.uniform(0.5, 1.0, (L, args.width)).astype(np.float32)
        b = rng.normal(size=(L, args.width)).astype(np.float32)
        h = kernels.affine_scan_forward(a, b)
        gh = rng.normal(size=(L, args.width)).astype(np.float32)
        cases = {
            "scan_forward": lambda be: kernels.affine_scan_forward(a, b, backend=be),
            "scan_backward": lambda be: kernels.affine_scan_backward(a, h, gh, backend=be),
            "xoshiro": lambda be: kernels.xoshiro_fill(np.array([1, 2, 3, 4], np.uint64),
                                                       L, backend=be),
        }
        for name, fn in cases.items():
            same = all(np.array_equal(p, c) for p, c in
                       zip(np.atleast_1d(fn("python")), np.atleast_1d(fn("compiled"))))
            t_py = median_time_ns(lambda: fn("python"), args.trials)
            t_c = median_time_ns(lambda: fn("compiled"), args.trials)
            print(f"{name},{L},{t_py},{t_c},{t_py / t_c:.2f},{same}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
