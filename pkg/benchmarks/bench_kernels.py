"""Compare the compiled (Cython) and numpy convolution/pooling kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the tokenizer at desk scale (16px, 32 channels) and at the
reference scale (224px input, first layer). Outputs are checked for equality
before timing.
"""

import argparse
import timeit

import numpy as np

from adapter.ndcore import kernels

try:
    from adapter.ndcore import _kernels as compiled
except ImportError:
    compiled = None
from adapter.ndcore import _kernels_py as python

CASES = [
    # name, (B, C, H, W), kernel, stride, pool window, pool stride
    ("desk conv1", (16, 3, 18, 18), 3, 1, 3, 2),
    ("desk conv2", (16, 32, 10, 10), 3, 1, 3, 2),
    ("reference conv1", (2, 3, 230, 230), 7, 1, 3, 2),
]


def workloads(impl, shape, k, stride, pool_k, pool_stride, rng):
    x = rng.standard_normal(shape).astype(np.float32)
    cols = impl.im2col(x, k, k, stride)
    pooled, argmax = impl.maxpool_forward(x, pool_k, pool_stride)
    grad = rng.standard_normal(pooled.shape).astype(np.float32)
    return {
        "im2col": lambda: impl.im2col(x, k, k, stride),
        "col2im": lambda: impl.col2im(cols, shape, k, k, stride),
        "maxpool fwd": lambda: impl.maxpool_forward(x, pool_k, pool_stride),
        "maxpool bwd": lambda: impl.maxpool_backward(grad, argmax, shape[2], shape[3]),
    }


def check_equal(shape, k, stride, pool_k, pool_stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape).astype(np.float32)
    a, b = python.im2col(x, k, k, stride), compiled.im2col(x, k, k, stride)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(python.col2im(a, shape, k, k, stride), compiled.col2im(a, shape, k, k, stride))
    (pa, ia), (pb, ib) = python.maxpool_forward(x, pool_k, pool_stride), compiled.maxpool_forward(x, pool_k, pool_stride)
    np.testing.assert_array_equal(pa, pb)
    np.testing.assert_array_equal(ia, ib)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    if compiled is None:
        print("compiled kernels not built; only the numpy fallback is timed")
    print(f"{'case':<18}{'kernel':<13}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}")
    for name, shape, k, stride, pool_k, pool_stride in CASES:
        if compiled is not None:
            check_equal(shape, k, stride, pool_k, pool_stride)
        py = workloads(python, shape, k, stride, pool_k, pool_stride, np.random.default_rng(1))
        cc = workloads(compiled, shape, k, stride, pool_k, pool_stride, np.random.default_rng(1)) if compiled else {}
        for kernel, fn in py.items():
            t_py = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
            if kernel in cc:
                t_cc = min(timeit.repeat(cc[kernel], number=1, repeat=args.repeat)) * 1e3
                print(f"{name:<18}{kernel:<13}{t_py:>10.3f}{t_cc:>13.3f}{t_py / t_cc:>8.2f}x")
            else:
                print(f"{name:<18}{kernel:<13}{t_py:>10.3f}{'-':>13}{'-':>9}")


if __name__ == "__main__":
    main()
