"""Compiled inner loops for :class:`~tractfusion.autonet.layers.AffineMax`."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def max_argmax(z):
    """Max and first argmax over axis 1 of a ``(G, M, o)`` array."""
    g_n, m_n, o_n = z.shape
    zmax = np.empty((g_n, o_n))
    idx = np.zeros((g_n, o_n), dtype=np.int64)
    for g in range(g_n):
        for c in range(o_n):
            zmax[g, c] = z[g, 0, c]
        for m in range(1, m_n):
            for c in range(o_n):
                v = z[g, m, c]
                if v > zmax[g, c]:
                    zmax[g, c] = v
                    idx[g, c] = m
    return zmax, idx


@numba.njit(cache=True)
def route_backward(x, idx, dz, wt, dwt, dx):
    """Accumulate ``dwt`` (o, i) and ``dx`` (G, M, i) through the winning rows."""
    g_n, o_n = idx.shape
    i_n = x.shape[2]
    # two passes: a fused loop aliases dwt/dx and does not vectorize
    for g in range(g_n):
        for c in range(o_n):
            d = dz[g, c]
            if d != 0.0:
                m = idx[g, c]
                for i in range(i_n):
                    dwt[c, i] += x[g, m, i] * d
    for g in range(g_n):
        for c in range(o_n):
            d = dz[g, c]
            if d != 0.0:
                m = idx[g, c]
                for i in range(i_n):
                    dx[g, m, i] += d * wt[c, i]
