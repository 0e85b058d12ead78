"""Benchmark the compiled convolution kernels against the numpy fallback.

Runs a sweep of convolution shapes through both backends, checks that the
fp32 forward pass and the integer accumulator pass are bit-identical, and
reports per-backend timings. Forward bit-identity is a hard contract (the
simulator's results must not depend on which backend got built); a mismatch
makes the script exit 1.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--seed 0] [--quick]
"""

import argparse
import sys
import time

import numpy as np

from qlower._kernels import pyref

try:
    from qlower._kernels import _convk
except ImportError:
    _convk = None

# (label, n, cin, hw, cout, k, stride, padding, groups)
SHAPES = [
    ("3x3 small", 4, 16, 32, 32, 3, 1, 1, 1),
    ("3x3 stride2", 4, 32, 32, 64, 3, 2, 1, 1),
    ("1x1 pointwise", 4, 64, 16, 128, 1, 1, 0, 1),
    ("3x3 grouped", 4, 32, 16, 32, 3, 1, 1, 4),
    ("5x5 wide", 2, 8, 48, 24, 5, 1, 2, 1),
]
QUICK = SHAPES[:2]


def make_case(rng, spec):
    _, n, cin, hw, cout, k, stride, padding, groups = spec
    x = rng.standard_normal((n, cin, hw, hw)).astype(np.float32)
    w = rng.standard_normal((cout, cin // groups, k, k)).astype(np.float32)
    xq = rng.integers(-128, 128, x.shape, dtype=np.int64).astype(np.int32)
    wq = rng.integers(-128, 128, w.shape, dtype=np.int64).astype(np.int32)
    return x, w, xq, wq, (stride, stride), (padding, padding), groups


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def conv_gflop(x, w, stride, padding, groups):
    ho, wo = pyref.conv_out_hw(x.shape[2], x.shape[3],
                               w.shape[2], w.shape[3], stride, padding)
    macs = (x.shape[0] * w.shape[0] * ho * wo
            * w.shape[1] * w.shape[2] * w.shape[3])
    return 2.0 * macs / 1e9


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repetitions, best is reported")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true",
                    help="only the first two shapes")
    args = ap.parse_args(argv)

    if _convk is None:
        print("compiled backend not built; benchmarking the fallback "
              "against itself is pointless", file=sys.stderr)
        return 1

    rng = np.random.default_rng(args.seed)
    shapes = QUICK if args.quick else SHAPES
    header = (f"{'shape':<14} {'gflop':>7} {'python':>10} {'cython':>10} "
              f"{'speedup':>8}  bit-identical")
    print(header)
    print("-" * len(header))

    mismatches = 0
    for spec in shapes:
        label = spec[0]
        x, w, xq, wq, stride, padding, groups = make_case(rng, spec)

        y_py = pyref.conv2d_forward(x, w, stride, padding, groups)
        y_cy = _convk.conv2d_forward(x, w, stride, padding, groups)
        a_py = pyref.conv2d_int(xq, wq, stride, padding, groups, 0)
        a_cy = _convk.conv2d_int(xq, wq, stride, padding, groups, 0)
        fwd_ok = (y_py.dtype == y_cy.dtype
                  and np.array_equal(y_py, y_cy))
        int_ok = np.array_equal(a_py, a_cy)
        if not (fwd_ok and int_ok):
            mismatches += 1

        t_py = best_of(
            lambda: pyref.conv2d_forward(x, w, stride, padding, groups),
            args.repeats)
        t_cy = best_of(
            lambda: _convk.conv2d_forward(x, w, stride, padding, groups),
            args.repeats)
        gf = conv_gflop(x, w, stride, padding, groups)
        status = "yes" if fwd_ok and int_ok else "NO"
        print(f"{label:<14} {gf:7.3f} {t_py * 1e3:9.2f}ms "
              f"{t_cy * 1e3:9.2f}ms {t_py / t_cy:7.2f}x  {status}")

    # backward has no bit contract, but it should agree to fp32 accuracy
    x, w, xq, wq, stride, padding, groups = make_case(rng, shapes[0])
    dy = rng.standard_normal(
        pyref.conv2d_forward(x, w, stride, padding, groups).shape
    ).astype(np.float32)
    gx_p, gw_p = pyref.conv2d_backward(x, w, dy, stride, padding, groups)
    gx_c, gw_c = _convk.conv2d_backward(x, w, dy, stride, padding, groups)
    rel = max(
        float(np.max(np.abs(gx_p - gx_c)) / (np.max(np.abs(gx_p)) + 1e-12)),
        float(np.max(np.abs(gw_p - gw_c)) / (np.max(np.abs(gw_p)) + 1e-12)))
    print(f"\nbackward max relative gap: {rel:.2e} "
          f"(tolerance 1e-5, no bit contract)")
    if rel > 1e-5:
        mismatches += 1

    if mismatches:
        print(f"\n{mismatches} case(s) FAILED the backend agreement check",
              file=sys.stderr)
        return 1
    print("all cases bit-identical across backends")
    return 0


if __name__ == "__main__":
    sys.exit(main())
