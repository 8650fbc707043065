"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback keeps the package
usable from a plain source checkout.  ``SVP_TTA_BACKEND=python`` forces the
fallback, ``SVP_TTA_BACKEND=ext`` makes a missing extension a hard error.
The choice is fixed at import time.
"""

import os

from ..errors import ConfigError

_requested = os.environ.get("SVP_TTA_BACKEND", "").strip().lower()
if _requested not in ("", "ext", "python"):
    raise ConfigError(
        f"SVP_TTA_BACKEND must be 'ext' or 'python', got {_requested!r}"
    )

if _requested == "python":
    from . import fallback as _impl
else:
    try:
        from . import _core as _impl
    except ImportError:
        if _requested == "ext":
            raise
        from . import fallback as _impl

jacobi_sweeps = _impl.jacobi_sweeps
BACKEND_NAME = _impl.BACKEND_NAME


def backend_name():
    """Name of the active sweep kernel backend ('ext' or 'python')."""
    return BACKEND_NAME
