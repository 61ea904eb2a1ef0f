"""Time the numba kernels against the pure-numpy path, then one training stage under each.

    python benchmarks/bench_kernels.py [--repeat 20]

The end-to-end part runs a subprocess per backend because the backend is
chosen once at import time from ``STAIR_DISABLE_NUMBA``.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from stair._kernels import numba_kernels, numpy_kernels


def workloads(rng):
    B, L, H, C = 64, 96, 96, 321
    x = rng.standard_normal((B, L, C)).astype(np.float32)
    mu = rng.standard_normal((B, C))
    sd = rng.random((B, C)) + 0.5
    y = rng.standard_normal((B, H, C)).astype(np.float32)
    t = rng.standard_normal((B, H, C)).astype(np.float32)
    seg = rng.standard_normal((8640, C)).astype(np.float32)
    starts = rng.permutation(8640 - L - H)[:B]
    p = rng.standard_normal((C, 512, 96)).astype(np.float32)
    g, m, v = rng.standard_normal(p.shape).astype(np.float32), np.zeros_like(p), np.zeros_like(p)
    return {
        "instance_stats": lambda k: k.instance_stats(x, 1e-5),
        "shift_scale": lambda k: k.shift_scale(x, mu, sd),
        "scale_shift": lambda k: k.scale_shift(y, sd, mu),
        "gather_windows": lambda k: k.gather_windows(seg, starts, L, H),
        "mse_and_grad": lambda k: k.mse_and_grad(y, t),
        "adam_update (16M)": lambda k: k.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001, 1e-5),
        "sumsq (16M)": lambda k: k.sumsq(g),
    }


STAGE_SNIPPET = r"""
import time
from stair.backbone import BackboneConfig
from stair.dataio import SplitSpec, gen_synthetic, shared_rule_spec
from stair.training import NormConfig, StageConfig, prepare_data, run_stage1
from stair._kernels import BACKEND
s = gen_synthetic(shared_rule_spec(C=64, L=96, H=96, T=6000))
d = prepare_data(s, SplitSpec("ratio-7-1-2", 96), 96)
run_stage1(d, BackboneConfig(96, 96), NormConfig(), StageConfig(epochs=1))  # warm-up / JIT
t = time.perf_counter()
run_stage1(d, BackboneConfig(96, 96), NormConfig(), StageConfig(epochs=5, patience=99))
print(BACKEND, time.perf_counter() - t)
"""


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-stage", action="store_true")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in workloads(rng).items():
        fn(numba_kernels)  # compile
        tn = min(timeit.repeat(lambda: fn(numpy_kernels), number=1, repeat=args.repeat)) * 1e3
        tb = min(timeit.repeat(lambda: fn(numba_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{tn:>10.3f}{tb:>10.3f}{tn / tb:>8.2f}x")
    if args.skip_stage:
        return
    print("\nstage 1, 5 epochs, C=64 L=H=96 linear:")
    for flag in ("1", "0"):
        env = {**os.environ, "STAIR_DISABLE_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", STAGE_SNIPPET], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:<8}{float(out[1]):8.2f} s")


if __name__ == "__main__":
    main()
