"""Compare the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times each hot kernel on desk-scale shapes for every available backend and
checks that both backends return the same values.
"""

import argparse
import timeit

import numpy as np

from msranet import kernels


def cases(rng):
    # stage-0 conv of a batch of 16 64x64 images: padded 65x65x3 input, 32x32 output
    xp = rng.random((16, 65, 65, 3), dtype=np.float32)
    cols = rng.random((16 * 32 * 32, 27), dtype=np.float32)
    # align-and-upsample: deep tap 2x2 -> 4x4 at 64 channels; plus a larger resize
    small = rng.random((16, 2, 2, 64), dtype=np.float32)
    big = rng.random((8, 56, 56, 64), dtype=np.float32)
    g_big = rng.random((8, 112, 112, 64), dtype=np.float32)

    def coords(src, dst):
        return kernels.bilinear_coords(src, dst, np.float32)

    def bil(x, ho, wo):
        _, h, w, _ = x.shape
        return (x, *coords(h, ho), *coords(w, wo))

    def bil_grad(g, h, w):
        _, ho, wo, _ = g.shape
        return (g, h, w, *coords(h, ho), *coords(w, wo))

    return {
        "im2col 16x65x65x3 k3 s2": ("im2col", (xp, 3, 3, 2, 32, 32)),
        "col2im 16x65x65x3 k3 s2": ("col2im", (cols, 16, 65, 65, 3, 3, 3, 2, 32, 32)),
        "bilinear 16x2x2x64 -> 4x4": ("bilinear", bil(small, 4, 4)),
        "bilinear 8x56x56x64 -> 112": ("bilinear", bil(big, 112, 112)),
        "bilinear_grad 112 -> 56": ("bilinear_grad", bil_grad(g_big, 56, 56)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    names = list(backends)
    print(f"{'kernel':<30}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}{'max |diff|':>12}")
    for label, (fn, call_args) in cases(rng).items():
        times, outs = {}, {}
        for name, mod in backends.items():
            f = getattr(mod, fn)
            outs[name] = f(*call_args)
            times[name] = min(timeit.repeat(lambda: f(*call_args), number=1, repeat=args.repeat)) * 1e3
        row = f"{label:<30}" + "".join(f"{times[n]:>14.3f}" for n in names)
        if "cython" in backends:
            diff = float(np.abs(outs["cython"].astype(np.float64) - outs["python"]).max())
            row += f"{times['python'] / times['cython']:>9.1f}x{diff:>12.2e}"
        print(row)


if __name__ == "__main__":
    main()
