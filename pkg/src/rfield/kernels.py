"""Kernel backend selection: compiled extension if available, NumPy otherwise.

Set RFIELD_KERNELS=py or =cy to force a backend (forcing cy raises if the
extension was not built). `BACKEND` names the active implementation.
"""

import os

_force = os.environ.get("RFIELD_KERNELS", "").strip().lower()

if _force in ("py", "python", "pure"):
    from . import _kernels_py as _impl

    BACKEND = "python"
elif _force in ("cy", "cython", "compiled"):
    from . import _kernels as _impl  # type: ignore[no-redef]

    BACKEND = "cython"
elif _force:
    raise RuntimeError(f"unknown RFIELD_KERNELS value: {_force!r} (use 'py' or 'cy')")
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl

        BACKEND = "python"

trilerp_forward = _impl.trilerp_forward
trilerp_backward = _impl.trilerp_backward
composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward
adam_step = _impl.adam_step
