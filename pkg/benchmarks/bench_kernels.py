"""Timing comparison of the compiled sketch kernel vs the numpy fallback.

Run as a script: python benchmarks/bench_kernels.py [--rows 4096] [--n 20000]
[--local-k 5]. Both backends must produce bit-identical sketches; the script
asserts that before it prints anything.
"""

import argparse
import importlib
import time

import numpy as np

from vfkmeans import _sketch_kernel_py
from vfkmeans.core import Seed
from vfkmeans.rng import (StreamKey, derive_keys, geometric_thresholds,
                          id_digests, keys_to_array)


def _load_cython():
    try:
        return importlib.import_module("vfkmeans._sketch_kernel")
    except ImportError:
        return None


def _inputs(n: int, rows: int, local_k: int, gamma: float):
    ids = [b"u%08d" % i for i in range(n)]
    id64 = id_digests(ids)
    assign = (StreamKey.from_seed(Seed(0), b"bench.assign")
              .u64_block(n) % local_k).astype(np.int64)
    keys = keys_to_array(derive_keys(Seed(1), rows))
    thresholds = geometric_thresholds(gamma)
    return id64, assign, keys, thresholds


def _time(fn, repeats: int = 3):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--local-k", type=int, default=5)
    ap.add_argument("--gamma", type=float, default=1.0)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    cy = _load_cython()
    id64, assign, keys, thresholds = _inputs(args.n, args.rows, args.local_k,
                                             args.gamma)

    py_out, py_t = _time(
        lambda: _sketch_kernel_py.partition_sketch_maxes(
            id64, assign, keys, thresholds, args.local_k), args.repeats)
    print(f"python backend: {py_t:8.3f} s "
          f"(n={args.n}, rows={args.rows}, local_k={args.local_k})")
    if cy is None:
        print("cython backend: not built (pip install -e . compiles it)")
        return 0
    cy_out, cy_t = _time(
        lambda: cy.partition_sketch_maxes(
            id64, assign, keys, thresholds, args.local_k), args.repeats)
    assert np.array_equal(py_out, cy_out), "backends disagree"
    print(f"cython backend: {cy_t:8.3f} s (identical output)")
    print(f"speedup: {py_t / cy_t:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
