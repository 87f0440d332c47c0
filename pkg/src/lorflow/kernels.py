"""Backend selection for the stencil kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Set ``LORFLOW_BACKEND=python`` to force the
fallback (``compiled`` makes a missing extension an error).
"""

import ctypes
import logging
import os
import sys

from . import _pykernels

_logger = logging.getLogger(__name__)

_choice = os.environ.get("LORFLOW_BACKEND", "auto").lower()
if _choice not in ("auto", "python", "compiled"):
    raise ImportError(f"LORFLOW_BACKEND must be auto, python or compiled, got {_choice!r}")

_impl = _pykernels
BACKEND = "python"
if _choice != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        _logger.info("compiled kernels unavailable, using numpy fallback")

TARGET_NONE = _pykernels.TARGET_NONE
TARGET_SPHERE = _pykernels.TARGET_SPHERE
TARGET_TORUS = _pykernels.TARGET_TORUS
ProjectionError = _pykernels.ProjectionError

cell_density = _impl.cell_density
laplacian = _impl.laplacian
cell_average = _impl.cell_average
node_average = _impl.node_average
face_coefficients = _impl.face_coefficients
apply_operator = _impl.apply_operator
quadratic_form = _impl.quadratic_form
pcg = _impl.pcg
project = _impl.project
explicit_step = _impl.explicit_step

_tuned = False


def tune_allocator() -> bool:
    """Keep large temporaries on the heap (glibc only).

    At n = 129 every scalar field is just over glibc's default mmap
    threshold, so each temporary would page-fault in fresh memory. Raising
    the threshold roughly halves the per-step cost. Idempotent; returns
    whether the setting took effect.
    """
    global _tuned
    if _tuned or not sys.platform.startswith("linux"):
        return _tuned
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(-3, 64 << 20) == 1  # M_MMAP_THRESHOLD
        ok = ok and libc.mallopt(-1, 256 << 20) == 1  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        ok = False
    _tuned = ok
    return ok


__all__ = [
    "BACKEND",
    "ProjectionError",
    "TARGET_NONE",
    "TARGET_SPHERE",
    "TARGET_TORUS",
    "apply_operator",
    "cell_average",
    "cell_density",
    "explicit_step",
    "face_coefficients",
    "laplacian",
    "node_average",
    "pcg",
    "project",
    "quadratic_form",
    "tune_allocator",
]
