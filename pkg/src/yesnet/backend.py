"""Kernel backend selection.

The env var ``YESNET_BACKEND`` picks between the numba-compiled kernels and
the pure-numpy fallback (values: ``numba`` / ``numpy``). Unset, numba is used
when importable. ``set_backend`` exists for tests and the benchmark; results
are bit-deterministic within a backend but the two backends may differ in the
last float bits (different accumulation orders).
"""

import os

_backend_name = None
_kernels = None


def _load(name):
    if name == "numba":
        from . import kernels_numba as mod
    elif name == "numpy":
        from . import kernels_numpy as mod
    else:
        raise ValueError(f"unknown backend {name!r} (expected 'numba' or 'numpy')")
    return mod


def set_backend(name):
    global _backend_name, _kernels
    _kernels = _load(name)
    _backend_name = name


def _init_default():
    name = os.environ.get("YESNET_BACKEND", "").strip().lower()
    if name:
        set_backend(name)
        return
    try:
        set_backend("numba")
    except ImportError:
        set_backend("numpy")


def kernels():
    if _kernels is None:
        _init_default()
    return _kernels


def backend_name():
    if _backend_name is None:
        _init_default()
    return _backend_name
