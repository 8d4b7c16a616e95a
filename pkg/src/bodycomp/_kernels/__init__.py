"""Kernel backend selection: compiled extension if available, numpy otherwise.

Set ``BODYCOMP_PURE_PYTHON=1`` to force the numpy fallback. Both backends
are bit-identical; the compiled one is just faster.
"""

import os

from . import fallback
from .fallback import (
    LBL_BACKGROUND,
    LBL_LIVER,
    LBL_SUBQ,
    LBL_THIGH_LEFT,
    LBL_THIGH_RIGHT,
    LBL_TORSO,
    LBL_VAT,
)

try:
    from . import _native
except ImportError:
    _native = None

_forced = os.environ.get("BODYCOMP_PURE_PYTHON", "") == "1"
_impl = fallback if (_forced or _native is None) else _native

label_voxels = _impl.label_voxels
mip_mean = _impl.mip_mean
resize_bilinear = _impl.resize_bilinear
quantize_u8 = _impl.quantize_u8


def active_backend() -> str:
    """Name of the backend in use: 'native' or 'fallback'."""
    return _impl.BACKEND_NAME


def available_backends():
    """The importable backend modules, keyed by name."""
    mods = {"fallback": fallback}
    if _native is not None:
        mods["native"] = _native
    return mods
