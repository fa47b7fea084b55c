"""Kernel dispatch: the compiled extension when built, NumPy otherwise.

Set ``MIMIC_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
splat_zbuffer = _kernels_py.splat_zbuffer
kmeans_assign = _kernels_py.kmeans_assign
polyline_distance = _kernels_py.polyline_distance

if os.environ.get("MIMIC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    if _compiled is not None:
        splat_zbuffer = _compiled.splat_zbuffer
        kmeans_assign = _compiled.kmeans_assign
        polyline_distance = _compiled.polyline_distance
        BACKEND = "compiled"


def compiled_available() -> bool:
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
