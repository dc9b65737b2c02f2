"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``ICONO_PURE_PYTHON=1`` to force the numpy path.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

if os.environ.get("ICONO_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"


def channel_stats(x):
    return _impl.channel_stats(np.ascontiguousarray(x, dtype=np.float64))


def adain(content, style, eps):
    return _impl.adain(
        np.ascontiguousarray(content, dtype=np.float64),
        np.ascontiguousarray(style, dtype=np.float64),
        float(eps),
    )


def confusion_counts(y_true, y_pred, k):
    return _impl.confusion_counts(
        np.ascontiguousarray(y_true, dtype=np.int64),
        np.ascontiguousarray(y_pred, dtype=np.int64),
        int(k),
    )
