"""Backend selection for the projection kernels.

The compiled extension is used when importable; set ``DUDOTRANS_PURE_PYTHON=1``
to force the numpy implementation.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DUDOTRANS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

fan_project = _impl.fan_project
backproject = _impl.backproject
project_parallel = _impl.project_parallel

__all__ = ["BACKEND", "fan_project", "backproject", "project_parallel"]
