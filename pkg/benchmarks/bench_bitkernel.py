"""Compare the numba and pure-numpy bit-serial convolution backends.

    python benchmarks/bench_bitkernel.py [--repeat 5] [--size 32] [--channels 64]

Each case runs one 3x3 convolution (stride 1, pad 1) on random signed codes,
checks that both backends agree exactly, and reports the best-of-``repeat``
wall time. The first numba call (JIT compile or cache load) is excluded.
"""

import argparse
import time

import numpy as np

from fqsr import _accel
from fqsr.bitkernel import conv2d_bitserial
from fqsr.tensor import offset_layout, pack_bitplanes


def make_case(rng, channels, size, bits):
    planes, off = offset_layout(bits, True)
    hi = (1 << bits) - 1
    x = rng.integers(-hi, hi + 1, (1, channels, size, size))
    w = rng.integers(-hi, hi + 1, (channels, channels, 3, 3))
    return pack_bitplanes(x, planes, off), pack_bitplanes(w, planes, off)


def best_time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--size", type=int, default=32, help="feature map height and width")
    parser.add_argument("--channels", type=int, default=64)
    parser.add_argument("--bits", type=int, nargs="+", default=[1, 2, 4, 8])
    args = parser.parse_args(argv)

    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    previous = _accel.backend()
    print(f"conv 3x3, {args.channels}->{args.channels} channels, {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'bits':>4} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    try:
        for bits in args.bits:
            x, w = make_case(rng, args.channels, args.size, bits)
            _accel.set_backend("numpy")
            t_np, ref = best_time(lambda: conv2d_bitserial(x, w, 1, 1), args.repeat)
            _accel.set_backend("numba")
            conv2d_bitserial(x, w, 1, 1)  # compile / load cache
            t_nb, out = best_time(lambda: conv2d_bitserial(x, w, 1, 1), args.repeat)
            if not np.array_equal(ref, out):
                raise SystemExit(f"backends disagree at {bits} bits")
            print(f"{bits:>4} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>7.1f}x")
    finally:
        _accel.set_backend(previous)


if __name__ == "__main__":
    main()
