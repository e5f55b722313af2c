"""Backend selection for the loop-heavy conv/pool kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``ADAPTER_KERNELS=python`` to force the fallback.
"""

import os

from adapter.ndcore import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ADAPTER_KERNELS", "").lower() != "python":
    try:
        from adapter.ndcore import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def use_backend(name: str) -> None:
    """Switch backends at runtime (benchmarks and equivalence tests)."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "compiled":
        from adapter.ndcore import _kernels as _compiled

        _impl, BACKEND = _compiled, "compiled"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def im2col(xp, kh, kw, stride):
    return _impl.im2col(xp, kh, kw, stride)


def col2im(cols, shape, kh, kw, stride):
    return _impl.col2im(cols, tuple(shape), kh, kw, stride)


def maxpool_forward(xp, k, stride):
    return _impl.maxpool_forward(xp, k, stride)


def maxpool_backward(grad, argmax, hp, wp):
    return _impl.maxpool_backward(grad, argmax, hp, wp)
