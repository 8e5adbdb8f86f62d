"""Backend selection for the compiled kernels.

Set ``PROBE_RELEASE_BACKEND=numpy`` before import to run every kernel as plain
Python/numpy. The default is ``numba`` when the package is importable.
"""
from __future__ import annotations

import os

_requested = os.environ.get("PROBE_RELEASE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(
        f"PROBE_RELEASE_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

HAVE_NUMBA = False
if _requested == "numba":
    try:
        import numba  # noqa: F401

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on the environment
        HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def jit(func):
    """Compile ``func`` with numba when that backend is active, else return it."""
    if HAVE_NUMBA:
        import numba

        return numba.njit(cache=True)(func)
    return func
