# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Same contract as ``icono._fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def channel_stats(const double[:, ::1] x):
    """Per-row mean and population standard deviation (two-pass)."""
    cdef Py_ssize_t c, i, n_ch = x.shape[0], n = x.shape[1]
    cdef double s, d
    mean = np.empty(n_ch, dtype=np.float64)
    std = np.empty(n_ch, dtype=np.float64)
    cdef double[::1] m = mean, sd = std
    for c in range(n_ch):
        s = 0.0
        for i in range(n):
            s += x[c, i]
        s /= n
        m[c] = s
        d = 0.0
        for i in range(n):
            d += (x[c, i] - s) * (x[c, i] - s)
        sd[c] = sqrt(d / n)
    return mean, std


def adain(const double[:, ::1] content, const double[:, ::1] style, double eps):
    """Renormalize each content row to the mean/std of the matching style row.

    Returns (output, degenerate) where ``degenerate[c]`` is set when the
    content row's std fell below ``eps`` and was clamped to it.
    """
    cdef Py_ssize_t c, i, n_ch = content.shape[0], n = content.shape[1]
    cm, cs = channel_stats(content)
    sm, ss = channel_stats(style)
    cdef double[::1] c_mean = cm, c_std = cs, s_mean = sm, s_std = ss
    out = np.empty((n_ch, n), dtype=np.float64)
    flags = np.zeros(n_ch, dtype=np.uint8)
    cdef double[:, ::1] o = out
    cdef unsigned char[::1] f = flags
    cdef double sigma, scale
    for c in range(n_ch):
        sigma = c_std[c]
        if sigma < eps:
            sigma = eps
            f[c] = 1
        scale = s_std[c] / sigma
        for i in range(n):
            o[c, i] = (content[c, i] - c_mean[c]) * scale + s_mean[c]
    return out, flags.astype(bool)


def confusion_counts(const cnp.int64_t[::1] y_true, const cnp.int64_t[::1] y_pred, Py_ssize_t k):
    """k x k count grid indexed [true][predicted]; inputs must lie in [0, k)."""
    cdef Py_ssize_t i, n = y_true.shape[0]
    counts = np.zeros((k, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] cc = counts
    for i in range(n):
        cc[y_true[i], y_pred[i]] += 1
    return counts
