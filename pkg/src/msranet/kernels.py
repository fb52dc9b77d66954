"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy fallback in ``_pykernels`` is loaded. Setting ``MSRANET_KERNELS=python``
forces the fallback.
"""

import importlib
import os
from math import floor
from types import ModuleType

import numpy as np

from . import _pykernels


def _load_compiled() -> ModuleType | None:
    try:
        return importlib.import_module("msranet._ckernels")
    except ImportError:
        return None


_compiled = _load_compiled()

if os.environ.get("MSRANET_KERNELS", "").lower() == "python" or _compiled is None:
    backend: ModuleType = _pykernels
    BACKEND = "python"
else:
    backend = _compiled
    BACKEND = "cython"


def available_backends() -> dict[str, ModuleType]:
    out = {"python": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def bilinear_coords(src: int, dst: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source taps for resizing an axis of ``src`` to ``dst``.

    Returns the lower index, upper index and blend fraction per output index.
    """
    scale = src / dst
    i0 = np.empty(dst, dtype=np.int64)
    i1 = np.empty(dst, dtype=np.int64)
    frac = np.empty(dst, dtype=np.float64)
    for d in range(dst):
        s = (d + 0.5) * scale - 0.5
        s = min(max(s, 0.0), src - 1.0)
        lo = int(floor(s))
        i0[d] = lo
        i1[d] = min(lo + 1, src - 1)
        frac[d] = s - lo
    return i0, i1, frac.astype(dtype)


def im2col(xp, kh, kw, stride, ho, wo):
    return backend.im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)


def col2im(cols, n, hp, wp, c, kh, kw, stride, ho, wo):
    return backend.col2im(np.ascontiguousarray(cols), n, hp, wp, c, kh, kw, stride, ho, wo)


def bilinear(x, ho, wo):
    _, h, w, _ = x.shape
    i0y, i1y, fy = bilinear_coords(h, ho, x.dtype)
    i0x, i1x, fx = bilinear_coords(w, wo, x.dtype)
    return backend.bilinear(np.ascontiguousarray(x), i0y, i1y, fy, i0x, i1x, fx)


def bilinear_grad(g, h, w):
    _, ho, wo, _ = g.shape
    i0y, i1y, fy = bilinear_coords(h, ho, g.dtype)
    i0x, i1x, fx = bilinear_coords(w, wo, g.dtype)
    return backend.bilinear_grad(np.ascontiguousarray(g), h, w, i0y, i1y, fy, i0x, i1x, fx)
