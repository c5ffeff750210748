"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_pykernels``. Set ``PARSPACE_PURE_PYTHON=1`` to force the
fallback (checked once, at import).
"""

import os

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

if os.environ.get("PARSPACE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if _impl is compiled_backend else "python"

jacobi_rows = _impl.jacobi_rows
im2col = _impl.im2col
col2im = _impl.col2im


def backends():
    """Mapping name -> kernel module for every backend usable in this process."""
    found = {"python": python_backend}
    if compiled_backend is not None:
        found["cython"] = compiled_backend
    return found
