"""Compiled inner loops for the hash-grid encoding.

Both kernels are plain loops over points and levels; they produce exactly the
values the vectorized formulas in :mod:`voxgrad.radiance` describe.
"""

from __future__ import annotations

import numba as nb
import numpy as np

_P1 = np.uint32(2654435761)
_P2 = np.uint32(805459861)


@nb.njit(cache=True)
def hash_encode(t, tables, res_levels, table_size, ids, weights, feats):
    """Fill ``ids``/``weights`` ``(N, L, 8)`` and ``feats`` ``(N, L*F)``.

    ``t`` holds normalized coordinates in [0, 1]. Corner order matches
    ``corner_offsets(3)``: the z offset varies fastest.
    """
    n = t.shape[0]
    n_levels = res_levels.shape[0]
    n_feat = tables.shape[2]
    size = np.uint64(table_size)
    for i in range(n):
        for lv in range(n_levels):
            r = res_levels[lv]
            u0 = t[i, 0] * (r - 1)
            u1 = t[i, 1] * (r - 1)
            u2 = t[i, 2] * (r - 1)
            b0 = min(int(np.floor(u0)), r - 2)
            b1 = min(int(np.floor(u1)), r - 2)
            b2 = min(int(np.floor(u2)), r - 2)
            f0 = u0 - b0
            f1 = u1 - b1
            f2 = u2 - b2
            for f in range(n_feat):
                feats[i, lv * n_feat + f] = 0.0
            c = 0
            for ox in range(2):
                hx = np.uint32(b0 + ox)
                wx = f0 if ox else 1.0 - f0
                for oy in range(2):
                    hy = np.uint32(b1 + oy) * _P1
                    wy = f1 if oy else 1.0 - f1
                    for oz in range(2):
                        hz = np.uint32(b2 + oz) * _P2
                        wz = f2 if oz else 1.0 - f2
                        h = ((hx ^ hy ^ hz) & np.uint64(0xFFFFFFFF)) % size
                        w = wx * wy * wz
                        ids[i, lv, c] = lv * table_size + h
                        weights[i, lv, c] = w
                        for f in range(n_feat):
                            feats[i, lv * n_feat + f] += w * tables[lv, h, f]
                        c += 1


@nb.njit(cache=True)
def scatter_table_grad(ids, weights, d_feat, out):
    """``out[ids[i, l, c]] += weights[i, l, c] * d_feat[i, l]`` (rows of F)."""
    n, n_levels, n_corners = ids.shape
    n_feat = out.shape[1]
    for i in range(n):
        for lv in range(n_levels):
            for c in range(n_corners):
                row = ids[i, lv, c]
                w = weights[i, lv, c]
                for f in range(n_feat):
                    out[row, f] += w * d_feat[i, lv * n_feat + f]


@nb.njit(cache=True)
def sparse_adam(p, m, v, count, ids, g, lr, beta1, beta2, eps):
    """Adam on rows ``ids`` of the 2-D arrays ``p``, ``m``, ``v`` (in place)."""
    for r in range(ids.shape[0]):
        row = ids[r]
        count[row] += 1
        c1 = 1.0 - beta1 ** count[row]
        c2 = 1.0 - beta2 ** count[row]
        for j in range(p.shape[1]):
            gj = g[r, j]
            mj = beta1 * m[row, j] + (1.0 - beta1) * gj
            vj = beta2 * v[row, j] + (1.0 - beta2) * gj * gj
            m[row, j] = mj
            v[row, j] = vj
            p[row, j] -= lr * (mj / c1) / (np.sqrt(vj / c2) + eps)
