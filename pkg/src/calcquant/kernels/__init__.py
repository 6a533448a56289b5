"""Kernel backend selection.

The hot inner loops (interpolation gathers and connected-component
labeling) exist twice: a Cython extension (``calcquant.kernels._core``)
and a numpy/scipy fallback (``calcquant.kernels.pykernels``). The
compiled backend is preferred when importable; set the environment
variable ``CALCQUANT_KERNELS=python`` or ``=compiled`` to force one.
"""

import os

from . import pykernels as _pykernels

_REQUESTED = os.environ.get("CALCQUANT_KERNELS", "").strip().lower()
if _REQUESTED not in ("", "compiled", "python"):
    raise RuntimeError(
        f"CALCQUANT_KERNELS must be 'compiled' or 'python', got {_REQUESTED!r}"
    )

_compiled = None
if _REQUESTED != "python":
    try:
        from . import _core as _compiled
    except ImportError:
        if _REQUESTED == "compiled":
            raise

_active = _compiled if _compiled is not None else _pykernels

BACKEND = _active.BACKEND
gather_linear = _active.gather_linear
gather_nearest = _active.gather_nearest
label_components = _active.label_components


def available_backends():
    """Names of importable backends, preferred first."""
    names = []
    if _compiled is not None:
        names.append(_compiled.BACKEND)
    names.append(_pykernels.BACKEND)
    return names


def get_backend(name):
    """Fetch a backend module by name ('compiled' or 'python')."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernel backend is not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
