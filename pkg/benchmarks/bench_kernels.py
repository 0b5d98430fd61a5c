"""Timing comparison of the compiled and pure-numpy kernel backends.

Runs each hot kernel on training-shaped inputs and prints per-call times
plus the speedup of the compiled extension.  Both backends are also
cross-checked for numerical agreement on every benchmarked call, so a
speed win can never hide a correctness regression.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 12] [--side 64]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from warpseg.kernels import backend_name, get_backend


def time_call(fn, args, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(batch: int, side: int, f0: int = 8):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, f0, side, side)).astype(np.float32)
    w = rng.standard_normal((f0 * 2, f0, 3, 3)).astype(np.float32) * 0.1
    b = rng.standard_normal(f0 * 2).astype(np.float32)
    gy = rng.standard_normal((batch, f0 * 2, side, side)).astype(np.float32)
    grid = rng.uniform(-0.95, 0.95, (batch, side, side, 2)).astype(np.float32)
    img = rng.standard_normal((batch, 3, side, side)).astype(np.float32)
    g_img = rng.standard_normal((batch, 3, side, side)).astype(np.float32)
    pool_in = rng.standard_normal((batch, f0, side, side)).astype(np.float32)

    cases = [
        ("conv2d forward 3x3", "conv2d_forward", (x, w, b, 1, 1)),
        ("conv2d grad/weight", "conv2d_backward_weight", (gy, x, 3, 1, 1)),
        ("conv2d grad/input", "conv2d_backward_input", (gy, w, side, side, 1, 1)),
        ("maxpool 2x2 forward", "maxpool2d_forward", (pool_in, 2, 2)),
        ("bilinear sample fwd", "bilinear_forward", (img, grid)),
        ("bilinear sample bwd", "bilinear_backward", (img, grid, g_img, True, True)),
    ]
    return cases


def agreement(a, b) -> float:
    if isinstance(a, tuple):
        return max(agreement(x, y) for x, y in zip(a, b))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1.0)
    return float(np.abs(a - b).max(initial=0.0)) / scale


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--batch", type=int, default=12)
    parser.add_argument("--side", type=int, default=64)
    args = parser.parse_args()

    numpy_be = get_backend("numpy")
    try:
        cython_be = get_backend("cython")
    except ImportError:
        print("compiled extension not available; active backend:", backend_name())
        return 1

    print(f"batch {args.batch}, side {args.side}, best of {args.repeat} runs\n")
    head = f"{'kernel':<22} {'numpy':>10} {'cython':>10} {'speedup':>8} {'max rel diff':>13}"
    print(head)
    print("-" * len(head))
    worst = 0.0
    for label, fn_name, call_args in make_cases(args.batch, args.side):
        t_np = time_call(getattr(numpy_be, fn_name), call_args, args.repeat)
        t_cy = time_call(getattr(cython_be, fn_name), call_args, args.repeat)
        diff = agreement(getattr(numpy_be, fn_name)(*call_args),
                         getattr(cython_be, fn_name)(*call_args))
        worst = max(worst, diff)
        print(f"{label:<22} {t_np * 1e3:>8.2f}ms {t_cy * 1e3:>8.2f}ms "
              f"{t_np / t_cy:>7.2f}x {diff:>13.2e}")
    print(f"\nactive backend at import: {backend_name()}")
    if worst > 1e-5:
        print(f"backend disagreement {worst:.2e} exceeds 1e-5")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
