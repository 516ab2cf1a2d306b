"""Hot-loop kernels, selected at import.

The compiled ``_gru_ext`` module is used when it was built; otherwise
the numpy implementation in ``_gru_py`` is. Setting the environment
variable ``FEDLASER_PURE_PYTHON=1`` forces the numpy path.

Both backends are deterministic, but they round differently, so results
are bit-reproducible only within one backend.
"""

import os

from fedlaser import _gru_py

BACKEND = "python"
_impl = _gru_py

if os.environ.get("FEDLASER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from fedlaser import _gru_ext as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward


def available_backends():
    """Map backend name to kernel module for every importable backend."""
    found = {"python": _gru_py}
    try:
        from fedlaser import _gru_ext

        found["cython"] = _gru_ext
    except ImportError:
        pass
    return found
