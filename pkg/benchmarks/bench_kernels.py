"""Compiled vs numpy kernels: forward and backward timings on encoder-shaped inputs.

    python benchmarks/bench_kernels.py [--repeat 50] [--json out.json]

Shapes follow the default encoder: a 128-view batch of 19-token visual
sequences at width 32 (layer norm), its MLP hidden width 64 (GELU) and
4-head attention rows (softmax).
"""
import argparse
import json
import timeit

import numpy as np

from promptsync import kernels


def cases(rng):
    x = rng.normal(size=(128 * 19, 32))
    g, b = rng.normal(size=32), rng.normal(size=32)
    h = rng.normal(size=(128 * 19, 64))
    s = rng.normal(size=(128 * 4 * 19, 19))

    def make(k):
        y, xhat, rstd = k.layer_norm_fwd(x, g, b, 1e-5)
        gy, t = k.gelu_fwd(h)
        p = k.softmax_fwd(s, 2.0)
        return {
            "layer_norm_fwd": lambda: k.layer_norm_fwd(x, g, b, 1e-5),
            "layer_norm_bwd": lambda: k.layer_norm_bwd(y, xhat, rstd, g),
            "gelu_fwd": lambda: k.gelu_fwd(h),
            "gelu_bwd": lambda: k.gelu_bwd(gy, h, t),
            "softmax_fwd": lambda: k.softmax_fwd(s, 2.0),
            "softmax_bwd": lambda: k.softmax_bwd(p, p, 2.0),
        }
    return make


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args()

    backends = ["python"]
    try:
        kernels.get_backend("cython")
        backends.append("cython")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")
    make = cases(np.random.default_rng(0))
    results = {}
    for name in backends:
        for op, fn in make(kernels.get_backend(name)).items():
            fn()
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            results.setdefault(op, {})[name] = best * 1e3

    header = f"{'kernel':<16}" + "".join(f"{b + ' ms':>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for op, row in results.items():
        line = f"{op:<16}" + "".join(f"{row[b]:>12.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{row['python'] / row['cython']:>9.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=1)


if __name__ == "__main__":
    main()
