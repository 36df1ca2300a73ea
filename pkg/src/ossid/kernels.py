"""Kernel dispatch: compiled extension if available, NumPy fallback otherwise.

Set ``OSSID_PURE_PY=1`` to force the fallback even when the extension built.
Both implementations are bit-identical (verified by the parity tests), so the
choice only affects speed.
"""
import os

from . import _kernels_py

HAVE_COMPILED = False
if not os.environ.get("OSSID_PURE_PY"):
    try:
        from . import _kernels  # type: ignore[attr-defined]
        HAVE_COMPILED = True
    except ImportError:
        pass

if HAVE_COMPILED:
    render_depth = _kernels.render_depth
    ppf_vote = _kernels.ppf_vote
else:
    render_depth = _kernels_py.render_depth
    ppf_vote = _kernels_py.ppf_vote

BACKEND = "compiled" if HAVE_COMPILED else "python"
