"""Compare the numba kernels against their pure-numpy/python fallbacks.

Run:  python benchmarks/bench_accel.py [--sizes 65536,1048576] [--repeat 5]

SHA-1: jit kernel vs numpy fallback vs hashlib (reference, C).
Oracle: jit event loop vs the same function run as plain python.
"""
from __future__ import annotations

import argparse
import hashlib
import time
import warnings

import numpy as np

from offloadkit import _accel
from offloadkit.core import FrameworkConfig, MiB
from offloadkit.model import des_simulate
from offloadkit.workloads import builtin_profile, sha1_digest


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_sha1(sizes, repeat):
    rng = np.random.default_rng(0)
    print(f"{'bytes':>9} {'jit ms':>9} {'numpy ms':>9} {'hashlib ms':>10} {'jit/numpy':>9}")
    for size in sizes:
        data = rng.integers(0, 256, size, dtype=np.uint8)
        ref = hashlib.sha1(data.tobytes()).digest()
        assert sha1_digest(data, accelerated=True) == ref
        assert sha1_digest(data, accelerated=False) == ref
        t_jit = best_of(lambda: sha1_digest(data, accelerated=True), repeat)
        # the fallback is slow; one run is plenty for big blocks
        t_np = best_of(lambda: sha1_digest(data, accelerated=False), 1 if size > 256 * 1024 else repeat)
        t_ref = best_of(lambda: hashlib.sha1(data.tobytes()).digest(), repeat)
        print(f"{size:>9} {t_jit * 1e3:>9.3f} {t_np * 1e3:>9.3f} {t_ref * 1e3:>10.3f} {t_np / t_jit:>8.1f}x")


def bench_oracle(n_jobs, repeat):
    cfg = FrameworkConfig(MiB, 20, post_workers=1)
    prof = builtin_profile("small")
    des_simulate(prof, 2, cfg, accelerated=True)  # compile
    a = des_simulate(prof, n_jobs, cfg, accelerated=True)
    b = des_simulate(prof, n_jobs, cfg, accelerated=False)
    assert a == b
    t_jit = best_of(lambda: des_simulate(prof, n_jobs, cfg, accelerated=True), repeat)
    t_py = best_of(lambda: des_simulate(prof, n_jobs, cfg, accelerated=False), 1)
    print(f"oracle, {n_jobs} jobs: jit {t_jit * 1e3:.1f} ms, python {t_py * 1e3:.1f} ms ({t_py / t_jit:.1f}x)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="64,65536,1048576")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=2000, help="stream length for the oracle benchmark")
    args = ap.parse_args()
    if not _accel.USE_NUMBA:
        raise SystemExit("numba is disabled (OFFLOADKIT_DISABLE_NUMBA); nothing to compare")
    warnings.simplefilter("ignore")
    bench_sha1([int(s) for s in args.sizes.split(",")], args.repeat)
    bench_oracle(args.jobs, args.repeat)


if __name__ == "__main__":
    main()
