"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 256]

Both backends are imported directly, so the result does not depend on
QUANTLAB_PURE_PYTHON. Outputs are checked for bit equality before timing.
"""

import argparse
import sys
import timeit

import numpy as np

from quantlab import _kernels_py
from quantlab.tensor import make_rng

try:
    from quantlab import _kernels
except ImportError:
    sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")


def cases(n: int):
    rng = make_rng(0)
    a = rng.standard_normal((n, n)).astype(np.float32)
    b = rng.standard_normal((n, n)).astype(np.float32)
    x = rng.standard_normal(n * n * 4).astype(np.float32)
    codes = rng.integers(0, 16, size=n * n * 4).astype(np.int32)
    packed = np.frombuffer(bytes(_kernels_py.pack_bits(codes, 4)), dtype=np.uint8).copy()
    return {
        f"matmul {n}x{n}": lambda k: k.matmul(a, b),
        f"affine_codes {x.size}": lambda k: k.affine_codes(x, 0.01, 128, 0, 255)[0],
        f"affine_values {codes.size}": lambda k: k.affine_values(codes, 0.01, 8),
        f"pack_bits 4b {codes.size}": lambda k: k.pack_bits(codes, 4),
        f"unpack_bits 4b {codes.size}": lambda k: k.unpack_bits(packed, 4, codes.size, False),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=256, help="matrix side; vectors hold 4*size^2 elements")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    print(f"{'kernel':<28}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for name, fn in cases(args.size).items():
        c_out, p_out = np.asarray(fn(_kernels)), np.asarray(fn(_kernels_py))
        if c_out.tobytes() != p_out.tobytes():
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_c = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        t_p = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28}{t_c:>12.3f}{t_p:>12.3f}{t_p / t_c:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
