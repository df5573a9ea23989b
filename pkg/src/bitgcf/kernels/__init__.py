"""Kernel backend selection: compiled extension with a pure-NumPy fallback.

The compiled core is preferred when importable. Set ``BITGCF_BACKEND`` to
``compiled`` or ``fallback`` to force a choice (``compiled`` raises if the
extension is missing). ``get_backend`` exposes both implementations so the
backend benchmark can compare them side by side.
"""

import os

try:
    from bitgcf.kernels import _core

    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False

from bitgcf.kernels import fallback as _fallback

_requested = os.environ.get("BITGCF_BACKEND", "").strip().lower()
if _requested not in ("", "compiled", "fallback"):
    raise ValueError(f"BITGCF_BACKEND must be 'compiled' or 'fallback', got {_requested!r}")
if _requested == "compiled" and not HAVE_COMPILED:
    raise ImportError("BITGCF_BACKEND=compiled but the bitgcf.kernels._core extension is not built")

if _requested == "fallback" or not HAVE_COMPILED:
    BACKEND = "fallback"
    _impl = _fallback
else:
    BACKEND = "compiled"
    _impl = _core

propagate_csr = _impl.propagate_csr
score_int8 = _impl.score_int8
score_f32 = _impl.score_f32


def get_backend(name):
    """Return the named kernel module ('compiled' or 'fallback')."""
    if name == "compiled":
        if not HAVE_COMPILED:
            raise ImportError("compiled kernel extension is not built")
        return _core
    if name == "fallback":
        return _fallback
    raise ValueError(f"unknown backend {name!r}")
