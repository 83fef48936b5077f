"""Time the numba kernels against their numpy twins on typical layer shapes.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Both backends are called directly, so ``SCANET_DISABLE_JIT`` does not matter
here unless numba is missing altogether. Prints one row per kernel with the
best-of-``repeat`` wall time, the speedup and the max abs difference.
"""
import argparse
import time

import numpy as np

from scanet import kernels
from scanet._jit import JIT_AVAILABLE


def cases(quick: bool):
    rng = np.random.default_rng(0)
    n, s = (2, 28) if quick else (8, 56)

    def conv(name, cin, cout, k, stride, groups):
        pad = k // 2
        xp = rng.standard_normal((n, cin, s + 2 * pad, s + 2 * pad)).astype(np.float32)
        w = rng.standard_normal((cout, cin // groups, k, k)).astype(np.float32)
        ho = (s + 2 * pad - k) // stride + 1
        dout = rng.standard_normal((n, cout, ho, ho)).astype(np.float32)
        hp = xp.shape[2]
        yield f"{name} fwd", "conv_forward", (xp, w, stride, stride, groups, ho, ho)
        yield f"{name} bwd-in", "conv_backward_input", (dout, w, stride, stride, groups, hp, hp)
        yield f"{name} bwd-w", "conv_backward_weight", (xp, dout, cin // groups, k, k, stride,
                                                        stride, groups)

    yield from conv("conv3x3 64->64", 64, 64, 3, 1, 1)
    yield from conv("conv1x1 64->256", 64, 256, 1, 1, 1)
    yield from conv("dw3x3 s2 128", 128, 128, 3, 2, 128)
    xp = rng.standard_normal((n, 64, s + 2, s + 2)).astype(np.float32)
    ho = (s + 2 - 3) // 2 + 1
    yield "maxpool 3x3 s2 fwd", "maxpool_forward", (xp, 3, 3, 2, 2, ho, ho)
    counts = np.full((ho, ho), 9.0, dtype=np.float32)
    yield "avgpool 3x3 s2 fwd", "avgpool_forward", (xp, 3, 3, 2, 2, ho, ho, counts)


def best_time(fn, args, repeat):
    out = fn(*args)  # warm-up, includes compilation on first use
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def first(out):
    return out[0] if isinstance(out, tuple) else out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small shapes, for smoke runs")
    args = ap.parse_args(argv)
    if not JIT_AVAILABLE:
        print("numba is not installed; only the numpy kernels can run")
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for label, name, a in cases(args.quick):
        t_np, o_np = best_time(getattr(kernels.numpy_, name), a, args.repeat)
        if JIT_AVAILABLE:
            t_jit, o_jit = best_time(getattr(kernels.jit, name), a, args.repeat)
            diff = float(np.max(np.abs(first(o_jit) - first(o_np))))
            print(f"{label:<26}{1e3 * t_jit:>10.2f}{1e3 * t_np:>10.2f}{t_np / t_jit:>8.1f}x{diff:>12.1e}")
        else:
            print(f"{label:<26}{'-':>10}{1e3 * t_np:>10.2f}{'-':>9}{'-':>12}")


if __name__ == "__main__":
    main()
