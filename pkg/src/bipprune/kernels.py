"""Backend selection for the conv2d kernels.

The compiled Cython module is preferred; the numpy implementation is used
when it is not built or when ``BIP_PURE_PYTHON=1`` is set.
"""

import importlib
import os

_BACKENDS = {"cython": "bipprune._ckernels", "numpy": "bipprune._pykernels"}


def load_backend(name):
    """Import a kernel backend by name ('cython' or 'numpy')."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {sorted(_BACKENDS)}")
    return importlib.import_module(_BACKENDS[name])


def _select():
    if os.environ.get("BIP_PURE_PYTHON", "") not in ("", "0"):
        return "numpy", load_backend("numpy")
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "numpy", load_backend("numpy")


BACKEND, _impl = _select()


def conv2d_forward(x, w, pad):
    return _impl.conv2d_forward(x, w, pad)


def conv2d_backward(x, w, gout, pad):
    return _impl.conv2d_backward(x, w, gout, pad)
