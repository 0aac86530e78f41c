"""Hot kernels: compiled if the extension is built, numpy/scipy otherwise.

Set ``OBJBA_KERNELS=python`` to force the fallback.
"""
import os

from . import _pykernels as python_backend

try:
    from . import _ckernels as cython_backend
except ImportError:  # extension not built
    cython_backend = None

if cython_backend is not None and os.environ.get("OBJBA_KERNELS", "").lower() != "python":
    backend = cython_backend
    BACKEND = "cython"
else:
    backend = python_backend
    BACKEND = "python"


def available_backends() -> dict:
    out = {"python": python_backend}
    if cython_backend is not None:
        out["cython"] = cython_backend
    return out


def get_backend(name=None):
    if name is None:
        return backend
    try:
        return available_backends()[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None
