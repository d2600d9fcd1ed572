"""Hot-kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``NECKFORGE_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("NECKFORGE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

holder_window_max = _impl.holder_window_max
triangle_areas = _impl.triangle_areas
weighted_area = _impl.weighted_area

__all__ = ["BACKEND", "holder_window_max", "triangle_areas", "weighted_area"]
