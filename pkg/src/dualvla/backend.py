"""Kernel backend selection.

At import time the compiled extension (`dualvla._kernels`) is preferred when
present; otherwise the numpy fallback (`dualvla.kernels_py`) is used. The
environment variable DUALVLA_KERNELS forces a choice:

    DUALVLA_KERNELS=cython   require the compiled core (raise if missing)
    DUALVLA_KERNELS=python   force the numpy fallback
    DUALVLA_KERNELS=auto     default behaviour

Both backends implement the same functions with the same semantics; tests
assert their outputs agree to float64 round-off.
"""

import os

from . import kernels_py

_FUNCS = (
    "gelu_fwd",
    "gelu_bwd",
    "softmax_lastdim_fwd",
    "softmax_lastdim_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "bpe_apply",
)


class _Kernels:
    """Mutable dispatch table so tests can swap backends in-process."""

    def __init__(self, module):
        self._bind(module)

    def _bind(self, module):
        self._module = module
        for fn in _FUNCS:
            setattr(self, fn, getattr(module, fn))

    @property
    def name(self):
        return self._module.NAME


def _load_cython():
    from . import _kernels  # noqa: F401  (built by setup.py, may be absent)

    return _kernels


def _initial_module():
    choice = os.environ.get("DUALVLA_KERNELS", "auto").lower()
    if choice == "python":
        return kernels_py
    if choice == "cython":
        return _load_cython()
    if choice != "auto":
        raise ValueError(f"DUALVLA_KERNELS must be auto|cython|python, got {choice!r}")
    try:
        return _load_cython()
    except ImportError:
        return kernels_py


kernels = _Kernels(_initial_module())


def use_backend(name):
    """Switch the active kernel backend ('cython' or 'python') in-process."""
    if name == "python":
        kernels._bind(kernels_py)
    elif name == "cython":
        kernels._bind(_load_cython())
    else:
        raise ValueError(f"unknown backend {name!r}")


def active_backend():
    return kernels.name


def available_backends():
    names = ["python"]
    try:
        _load_cython()
        names.insert(0, "cython")
    except ImportError:
        pass
    return names
