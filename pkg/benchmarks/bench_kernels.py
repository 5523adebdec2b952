"""Time the numba and numpy kernel backends on the shapes the desk models use.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--batch 128]

Each row checks that both backends agree bit for bit before timing them.
"""
import argparse
import time

import numpy as np

from mcgen import kernels
from mcgen import tensor as T
from mcgen._jit import HAVE_NUMBA, limit_threads

# (channels, size, kernel, stride, pad)
SHAPES = [
    (1, 16, 4, 2, 1),
    (16, 8, 4, 2, 1),
    (16, 16, 3, 1, 1),
    (32, 8, 3, 1, 1),
    (64, 4, 3, 1, 1),
]


def _best(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _conv_step(x, w, backend):
    kernels.set_backend(backend)
    xt = T.Tensor(x, requires_grad=True)
    wt = T.Tensor(w, requires_grad=True)
    T.sum(T.conv2d(xt, wt, None, 1, 1)).backward()
    return xt.grad


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args(argv)
    limit_threads()
    if not HAVE_NUMBA:
        print("numba is not importable; only the numpy backend can run")
        return 1
    rng = np.random.default_rng(0)
    previous = kernels.get_backend()
    print(f"{'op':8} {'shape':>22} {'numba ms':>9} {'numpy ms':>9} {'speedup':>8}")
    try:
        for c, s, k, stride, pad in SHAPES:
            x = rng.standard_normal((args.batch, c, s, s)).astype(np.float32)
            cols = {b: kernels.im2col(x, k, k, stride, pad, backend=b) for b in ("numba", "numpy")}
            assert np.array_equal(cols["numba"], cols["numpy"])
            back = {b: kernels.col2im(cols["numpy"], x.shape, k, k, stride, pad, backend=b) for b in ("numba", "numpy")}
            assert np.array_equal(back["numba"], back["numpy"])
            label = f"{c}x{s}x{s} k{k}s{stride}p{pad}"
            for op, fn in (
                ("im2col", lambda b: kernels.im2col(x, k, k, stride, pad, backend=b)),
                ("col2im", lambda b: kernels.col2im(cols["numpy"], x.shape, k, k, stride, pad, backend=b)),
            ):
                tn = _best(lambda: fn("numba"), args.repeats)
                tp = _best(lambda: fn("numpy"), args.repeats)
                print(f"{op:8} {label:>22} {tn * 1e3:9.3f} {tp * 1e3:9.3f} {tp / tn:8.2f}")
        x = rng.standard_normal((args.batch, 16, 16, 16)).astype(np.float32)
        w = (rng.standard_normal((16, 16, 3, 3)) * 0.1).astype(np.float32)
        assert np.array_equal(_conv_step(x, w, "numba"), _conv_step(x, w, "numpy"))
        tn = _best(lambda: _conv_step(x, w, "numba"), args.repeats)
        tp = _best(lambda: _conv_step(x, w, "numpy"), args.repeats)
        print(f"{'conv fb':8} {'16x16x16 k3s1p1':>22} {tn * 1e3:9.3f} {tp * 1e3:9.3f} {tp / tn:8.2f}")
    finally:
        kernels.set_backend(previous)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
