"""Same-padding, stride-1 convolution kernels.

Two interchangeable implementations with identical signatures:

* ``*_numba``: direct loops compiled with numba; the innermost loop runs
  along image rows so it vectorizes.
* ``*_numpy``: shift-and-accumulate over kernel taps with ``np.einsum``.

All kernels take an already zero-padded input ``xp`` of shape
``(n, c, h + k - 1, w + k - 1)``. Both are deterministic; they differ from
each other only by floating-point summation order.
"""

import numpy as np

from ._backend import USE_NUMBA, njit

_FASTMATH = {"contract"}


# --------------------------------------------------------------------------
# numpy reference path


def conv_forward_numpy(xp, w, b, out):
    n, o_c, h, wd = out.shape
    k = w.shape[2]
    out[...] = b.reshape(1, o_c, 1, 1)
    for ky in range(k):
        for kx in range(k):
            out += np.einsum("oi,nihw->nohw", w[:, :, ky, kx], xp[:, :, ky:ky + h, kx:kx + wd])
    return out


def conv_grad_weight_numpy(xp, g, gw):
    h, wd = g.shape[2], g.shape[3]
    k = gw.shape[2]
    for ky in range(k):
        for kx in range(k):
            gw[:, :, ky, kx] = np.einsum("nohw,nihw->oi", g, xp[:, :, ky:ky + h, kx:kx + wd])
    return gw


# --------------------------------------------------------------------------
# numba path


@njit(cache=True, fastmath=_FASTMATH)
def conv_forward_numba(xp, w, b, out):
    n, o_c, h, wd = out.shape
    i_c = xp.shape[1]
    k = w.shape[2]
    row = np.empty(wd, dtype=out.dtype)
    for s in range(n):
        for o in range(o_c):
            for y in range(h):
                for x in range(wd):
                    row[x] = b[o]
                for i in range(i_c):
                    for ky in range(k):
                        src = xp[s, i, y + ky]
                        for kx in range(k):
                            wv = w[o, i, ky, kx]
                            for x in range(wd):
                                row[x] += wv * src[x + kx]
                for x in range(wd):
                    out[s, o, y, x] = row[x]
    return out


@njit(cache=True, fastmath=_FASTMATH)
def conv_grad_weight_numba(xp, g, gw):
    n, o_c, h, wd = g.shape
    i_c = xp.shape[1]
    k = gw.shape[2]
    acc = np.empty(wd, dtype=gw.dtype)
    for o in range(o_c):
        for i in range(i_c):
            for ky in range(k):
                for kx in range(k):
                    for x in range(wd):
                        acc[x] = 0.0
                    for s in range(n):
                        for y in range(h):
                            gr = g[s, o, y]
                            src = xp[s, i, y + ky]
                            for x in range(wd):
                                acc[x] += gr[x] * src[x + kx]
                    tot = 0.0
                    for x in range(wd):
                        tot += acc[x]
                    gw[o, i, ky, kx] = tot
    return gw


if USE_NUMBA:
    conv_forward = conv_forward_numba
    conv_grad_weight = conv_grad_weight_numba
else:
    conv_forward = conv_forward_numpy
    conv_grad_weight = conv_grad_weight_numpy
