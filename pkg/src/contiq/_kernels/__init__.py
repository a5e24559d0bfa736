"""Hot-path kernels with a compiled backend and a numpy fallback.

The compiled extension (``contiq._kernels._native``) is used when it imported
cleanly; otherwise the numpy reference (``_ref``) takes over. Set
``CONTIQ_KERNELS=python`` or ``CONTIQ_KERNELS=native`` to force a backend.
Both expose the same nine functions with identical semantics.
"""

import logging
import os

log = logging.getLogger(__name__)

_FORCED = os.environ.get("CONTIQ_KERNELS", "").strip().lower()

if _FORCED == "python":
    from . import _ref as _impl

    BACKEND = "python"
elif _FORCED == "native":
    try:
        from . import _native as _impl
    except ImportError as exc:
        raise ImportError(
            "CONTIQ_KERNELS=native but the compiled backend is unavailable; "
            "reinstall with a C toolchain or unset the variable"
        ) from exc
    BACKEND = "native"
elif _FORCED:
    raise ValueError(
        f"CONTIQ_KERNELS={_FORCED!r} not understood (use 'python' or 'native')"
    )
else:
    try:
        from . import _native as _impl

        BACKEND = "native"
    except ImportError:
        from . import _ref as _impl

        BACKEND = "python"
        log.debug("compiled kernels unavailable; using numpy fallback")

normal_cdf = _impl.normal_cdf
pair_pref_forward = _impl.pair_pref_forward
fidelity_forward = _impl.fidelity_forward
relu = _impl.relu
relu_backward = _impl.relu_backward
l2_normalize_rows = _impl.l2_normalize_rows
l2_normalize_backward = _impl.l2_normalize_backward
adam_update = _impl.adam_update
assign_nearest = _impl.assign_nearest


def backend_name():
    """Name of the active kernel backend: 'native' or 'python'."""
    return BACKEND


__all__ = [
    "BACKEND",
    "backend_name",
    "normal_cdf",
    "pair_pref_forward",
    "fidelity_forward",
    "relu",
    "relu_backward",
    "l2_normalize_rows",
    "l2_normalize_backward",
    "adam_update",
    "assign_nearest",
]
