"""Numba kernels for the attention hot path.

The fused kernels avoid materializing the T x T score matrix (the
dominant memory cost at long sequence lengths) by streaming keys with
an online softmax. Forward saves per-row max/denominator so backward
can recompute probabilities tile-free. Invalid query rows are skipped
outright: their outputs are zero and every consumer masks them anyway.
Loop order is fixed and no atomics are used, so results are
bit-reproducible for a given thread count on one machine.
"""

from __future__ import annotations

import os

import numpy as np

# TBB on this image is too old for numba; pick the OpenMP layer up front
# so imports stay quiet.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from numba import njit, prange

__all__ = ["attn_fwd", "attn_bwd"]


@njit(parallel=True, fastmath=True, cache=True)
def attn_fwd(q, k, v, key_valid, query_valid, out, mstat, lstat):
    """Masked scaled-dot-product attention with grouped KV heads.

    q: (B, Tq, Nq, H), k/v: (B, Tk, Nv, H), key_valid: (B, Tk) uint8,
    query_valid: (B, Tq) uint8. Writes out (B, Tq, Nq, H) and the row
    stats mstat/lstat (B, Nq, Tq). Skipped or fully-masked rows produce
    zeros with lstat 0.
    """
    B, Tq, Nq, H = q.shape
    Tk = k.shape[1]
    Nv = k.shape[2]
    group = Nq // Nv
    scale = 1.0 / np.sqrt(H)
    for bn in prange(B * Nq):
        b = bn // Nq
        n = bn % Nq
        g = n // group
        acc = np.empty(H)
        qi = np.empty(H)
        for i in range(Tq):
            if query_valid[b, i] == 0:
                for hh in range(H):
                    out[b, i, n, hh] = 0.0
                mstat[b, n, i] = -1.0e300
                lstat[b, n, i] = 0.0
                continue
            for hh in range(H):
                qi[hh] = q[b, i, n, hh] * scale
            m = -1.0e300
            l = 0.0
            for hh in range(H):
                acc[hh] = 0.0
            for j in range(Tk):
                if key_valid[b, j] == 0:
                    continue
                s = 0.0
                for hh in range(H):
                    s += qi[hh] * k[b, j, g, hh]
                if s > m:
                    c = np.exp(m - s)
                    l *= c
                    for hh in range(H):
                        acc[hh] *= c
                    m = s
                p = np.exp(s - m)
                l += p
                for hh in range(H):
                    acc[hh] += p * v[b, j, g, hh]
            if l > 0.0:
                inv = 1.0 / l
                for hh in range(H):
                    out[b, i, n, hh] = acc[hh] * inv
            else:
                for hh in range(H):
                    out[b, i, n, hh] = 0.0
            mstat[b, n, i] = m
            lstat[b, n, i] = l


@njit(parallel=True, fastmath=True, cache=True)
def attn_bwd(q, k, v, key_valid, out, mstat, lstat, gout, dq, dk, dv):
    """Backward pass for :func:`attn_fwd`.

    Parallelized over (batch, kv head): each task owns its dk/dv slices,
    so accumulation order is fixed without atomics. Rows with lstat 0
    (masked or skipped queries) contribute nothing.
    """
    B, Tq, Nq, H = q.shape
    Tk = k.shape[1]
    Nv = k.shape[2]
    group = Nq // Nv
    scale = 1.0 / np.sqrt(H)
    for bg in prange(B * Nv):
        b = bg // Nv
        g = bg % Nv
        gi = np.empty(H)
        qi = np.empty(H)
        for n in range(g * group, (g + 1) * group):
            for i in range(Tq):
                l = lstat[b, n, i]
                if l <= 0.0:
                    continue
                m = mstat[b, n, i]
                inv = 1.0 / l
                d_i = 0.0
                for hh in range(H):
                    gi[hh] = gout[b, i, n, hh]
                    qi[hh] = q[b, i, n, hh]
                    d_i += gi[hh] * out[b, i, n, hh]
                for j in range(Tk):
                    if key_valid[b, j] == 0:
                        continue
                    s = 0.0
                    for hh in range(H):
                        s += qi[hh] * k[b, j, g, hh]
                    p = np.exp(s * scale - m) * inv
                    gv = 0.0
                    for hh in range(H):
                        dv[b, j, g, hh] += p * gi[hh]
                        gv += gi[hh] * v[b, j, g, hh]
                    ds = p * (gv - d_i) * scale
                    for hh in range(H):
                        dq[b, i, n, hh] += ds * k[b, j, g, hh]
                        dk[b, j, g, hh] += ds * qi[hh]
