"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N wall time for each backend
and checks that both produce identical arrays.
"""
import argparse
import timeit

import numpy as np

from segda import kernels


def cases(rng):
    x = rng.standard_normal((2, 16, 64, 64))
    cols1 = kernels._im2col3x3_numpy(x, 1)
    cols2 = kernels._im2col3x3_numpy(x, 2)
    truth = rng.integers(0, 6, (100, 64, 64)).ravel()
    pred = rng.integers(0, 6, (100, 64, 64)).ravel()
    return [
        ("im2col3x3 stride 1", kernels._im2col3x3_numpy, "im2col3x3", (x, 1)),
        ("im2col3x3 stride 2", kernels._im2col3x3_numpy, "im2col3x3", (x, 2)),
        ("col2im3x3 stride 1", kernels._col2im3x3_numpy, "col2im3x3", (cols1, 64, 64, 1)),
        ("col2im3x3 stride 2", kernels._col2im3x3_numpy, "col2im3x3", (cols2, 64, 64, 2)),
        ("confusion_counts", kernels._confusion_counts_numpy, "confusion_counts", (truth, pred, 6)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    ext = kernels._ext
    if ext is None:
        print("compiled extension not built; only the numpy path is available")
    print(f"{'kernel':<22}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  identical")
    for name, py_fn, ext_name, call in cases(np.random.default_rng(0)):
        t_py = min(timeit.repeat(lambda: py_fn(*call), number=1, repeat=args.repeat)) * 1e3
        if ext is None:
            print(f"{name:<22}{t_py:>10.3f}{'-':>11}{'-':>9}  -")
            continue
        c_fn = getattr(ext, ext_name)
        t_c = min(timeit.repeat(lambda: c_fn(*call), number=1, repeat=args.repeat)) * 1e3
        same = np.array_equal(py_fn(*call), c_fn(*call))
        print(f"{name:<22}{t_py:>10.3f}{t_c:>11.3f}{t_py / t_c:>8.2f}x  {same}")


if __name__ == "__main__":
    main()
