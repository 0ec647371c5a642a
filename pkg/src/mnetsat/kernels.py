"""Backend selection for the sliding-window kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation. Set ``MNETSAT_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MNETSAT_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def get_backend(name: str):
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def use_backend(name: str) -> None:
    """Switch the process-wide kernel implementation."""
    global _impl, BACKEND
    _impl = get_backend(name)
    BACKEND = name


def im2col(xp, kh, kw, stride, dilation, ho, wo):
    return _impl.im2col(np.ascontiguousarray(xp), kh, kw, stride, dilation, ho, wo)


def col2im(cols, hp, wp, stride, dilation):
    return _impl.col2im(np.ascontiguousarray(cols), hp, wp, stride, dilation)


def maxpool_forward(xp, k, stride, ho, wo):
    return _impl.maxpool_forward(np.ascontiguousarray(xp), k, stride, ho, wo)


def maxpool_backward(g, argmax, hp, wp, k, stride):
    return _impl.maxpool_backward(np.ascontiguousarray(g), np.ascontiguousarray(argmax, dtype=np.int32), hp, wp, k, stride)
