"""Fused single-pass kernels for the hot elementwise/gather paths.

Internal math is float64 (like the raster kernels) with results stored in the
caller's dtype; fusing avoids numpy's multi-pass temporaries.
"""

import numpy as np
from numba import njit

from . import _raster_kernels  # noqa: F401  (pins the threading layer first)


@njit(cache=True)
def softplus_fwd(x, out, e_out):
    """out = softplus(x); e_out = exp(-|x|) cached for the backward pass."""
    n = x.size
    xf = x.reshape(n)
    of = out.reshape(n)
    ef = e_out.reshape(n)
    for i in range(n):
        v = float(xf[i])
        e = np.exp(-abs(v))
        ef[i] = e
        of[i] = max(v, 0.0) + np.log1p(e)


@njit(cache=True)
def softplus_bw(x, e, g, out):
    """out = g * sigmoid(x), with e = exp(-|x|) from the forward pass."""
    n = x.size
    xf = x.reshape(n)
    ef = e.reshape(n)
    gf = g.reshape(n)
    of = out.reshape(n)
    for i in range(n):
        e_i = float(ef[i])
        s = 1.0 / (1.0 + e_i)
        if xf[i] < 0:
            s = e_i * s
        of[i] = gf[i] * s


@njit(cache=True)
def bilinear_gather(grid, x0, y0, x1, y1, tx, ty, out):
    """out[i] = bilinear blend of the four corner texels per point."""
    n = x0.shape[0]
    C = grid.shape[2]
    for i in range(n):
        a = y0[i]
        b = y1[i]
        u = x0[i]
        v = x1[i]
        fx = float(tx[i])
        fy = float(ty[i])
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = fx * (1.0 - fy)
        w10 = (1.0 - fx) * fy
        w11 = fx * fy
        for c in range(C):
            out[i, c] = (w00 * grid[a, u, c] + w01 * grid[a, v, c]
                         + w10 * grid[b, u, c] + w11 * grid[b, v, c])
