"""Numba kernels for tiled alpha-compositing and its analytic backward.

Compositing semantics shared by every kernel (per pixel, primitives in
ascending depth order, ties by primitive index):

    alpha = min(o * exp(-0.5 * d^T conic d), 1)
    skip the primitive when alpha < 1/255
    C += color * alpha * T;  T *= 1 - alpha;  stop once T < 1e-4
    C += background * T

All per-pixel arithmetic runs in float64 regardless of storage dtype so the
tiled, reference and backward paths agree bit-for-bit. The tiled kernels
additionally prune by the per-primitive cull radius (rows first, then pixels),
which by construction only removes contributions below the alpha threshold.
"""

import numpy as np
import numba
from numba import njit, prange

# skip the TBB probe (the image's TBB is too old and only triggers a warning)
numba.config.THREADING_LAYER = "omp"

ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
TILE = 16
RADIUS_PAD = 0.5


@njit(cache=True, inline="always")
def _composite_px(cx, cy, rown, rowk, rowmy_d, lmx, la, lb, lc, lo, lrem,
                  lcr, lcg, lcb, out_rgbT):
    T = 1.0
    r = 0.0
    g = 0.0
    b = 0.0
    for j in range(rown):
        k = rowk[j]
        dx = cx - lmx[k]
        if dx * dx > lrem[j]:
            continue
        dy = rowmy_d[j]
        power = -0.5 * (la[k] * dx * dx + lc[k] * dy * dy) - lb[k] * dx * dy
        alpha = lo[k] * np.exp(power)
        if alpha < ALPHA_MIN:
            continue
        if alpha > 1.0:
            alpha = 1.0
        w = alpha * T
        r += lcr[k] * w
        g += lcg[k] * w
        b += lcb[k] * w
        T *= 1.0 - alpha
        if T < T_STOP:
            break
    out_rgbT[0] = r
    out_rgbT[1] = g
    out_rgbT[2] = b
    out_rgbT[3] = T


@njit(cache=True, parallel=True)
def forward_tiles(mean, conic, opac, color, radius2, pair_prim, tile_start,
                  tiles_x, tile, H, W, bg, img, out_T):
    n_tiles = tile_start.shape[0] - 1
    for ti in prange(n_tiles):
        s0 = tile_start[ti]
        s1 = tile_start[ti + 1]
        ty = ti // tiles_x
        tx = ti % tiles_x
        y0 = ty * tile
        x0 = tx * tile
        y1 = min(y0 + tile, H)
        x1 = min(x0 + tile, W)
        ne = s1 - s0
        if ne == 0:
            for py in range(y0, y1):
                for px in range(x0, x1):
                    img[py, px, 0] = bg[0]
                    img[py, px, 1] = bg[1]
                    img[py, px, 2] = bg[2]
                    out_T[py, px] = 1.0
            continue
        lmx = np.empty(ne, np.float64)
        lmy = np.empty(ne, np.float64)
        la = np.empty(ne, np.float64)
        lb = np.empty(ne, np.float64)
        lc = np.empty(ne, np.float64)
        lo = np.empty(ne, np.float64)
        lr2 = np.empty(ne, np.float64)
        lcr = np.empty(ne, np.float64)
        lcg = np.empty(ne, np.float64)
        lcb = np.empty(ne, np.float64)
        for k in range(ne):
            p = pair_prim[s0 + k]
            lmx[k] = mean[p, 0]
            lmy[k] = mean[p, 1]
            la[k] = conic[p, 0]
            lb[k] = conic[p, 1]
            lc[k] = conic[p, 2]
            lo[k] = opac[p]
            lr2[k] = radius2[p]
            lcr[k] = color[p, 0]
            lcg[k] = color[p, 1]
            lcb[k] = color[p, 2]
        rowk = np.empty(ne, np.int64)
        rowdy = np.empty(ne, np.float64)
        rowrem = np.empty(ne, np.float64)
        px_out = np.empty(4, np.float64)
        for py in range(y0, y1):
            cy = py + 0.5
            rn = 0
            for k in range(ne):
                dy = cy - lmy[k]
                rem = lr2[k] - dy * dy
                if rem >= 0.0:
                    rowk[rn] = k
                    rowdy[rn] = dy
                    rowrem[rn] = rem
                    rn += 1
            for px in range(x0, x1):
                _composite_px(px + 0.5, cy, rn, rowk, rowdy, lmx, la, lb, lc,
                              lo, rowrem, lcr, lcg, lcb, px_out)
                img[py, px, 0] = px_out[0] + bg[0] * px_out[3]
                img[py, px, 1] = px_out[1] + bg[1] * px_out[3]
                img[py, px, 2] = px_out[2] + bg[2] * px_out[3]
                out_T[py, px] = px_out[3]


@njit(cache=True)
def forward_reference(mean, conic, opac, color, H, W, bg, img, out_T):
    """Per-pixel loop over every depth-sorted primitive; no tiles, no radius."""
    M = mean.shape[0]
    for py in range(H):
        cy = py + 0.5
        for px in range(W):
            cx = px + 0.5
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for k in range(M):
                dx = cx - mean[k, 0]
                dy = cy - mean[k, 1]
                power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) \
                    - conic[k, 1] * dx * dy
                alpha = opac[k] * np.exp(power)
                if alpha < ALPHA_MIN:
                    continue
                if alpha > 1.0:
                    alpha = 1.0
                w = alpha * T
                r += color[k, 0] * w
                g += color[k, 1] * w
                b += color[k, 2] * w
                T *= 1.0 - alpha
                if T < T_STOP:
                    break
            img[py, px, 0] = r + bg[0] * T
            img[py, px, 1] = g + bg[1] * T
            img[py, px, 2] = b + bg[2] * T
            out_T[py, px] = T


@njit(cache=True, parallel=True)
def backward_tiles(mean, conic, opac, color, radius2, pair_prim, tile_start,
                   tiles_x, tile, H, W, bg, dimg, pair_grad):
    """Replays the forward compositing per pixel, then walks the contributors
    back-to-front accumulating gradients into per-pair slots (disjoint across
    tiles, hence deterministic under any scheduling).

    pair_grad columns: dmx dmy da db dc do dcr dcg dcb
    """
    n_tiles = tile_start.shape[0] - 1
    for ti in prange(n_tiles):
        s0 = tile_start[ti]
        s1 = tile_start[ti + 1]
        ne = s1 - s0
        if ne == 0:
            continue
        ty = ti // tiles_x
        tx = ti % tiles_x
        y0 = ty * tile
        x0 = tx * tile
        y1 = min(y0 + tile, H)
        x1 = min(x0 + tile, W)
        lmx = np.empty(ne, np.float64)
        lmy = np.empty(ne, np.float64)
        la = np.empty(ne, np.float64)
        lb = np.empty(ne, np.float64)
        lc = np.empty(ne, np.float64)
        lo = np.empty(ne, np.float64)
        lr2 = np.empty(ne, np.float64)
        lcr = np.empty(ne, np.float64)
        lcg = np.empty(ne, np.float64)
        lcb = np.empty(ne, np.float64)
        for k in range(ne):
            p = pair_prim[s0 + k]
            lmx[k] = mean[p, 0]
            lmy[k] = mean[p, 1]
            la[k] = conic[p, 0]
            lb[k] = conic[p, 1]
            lc[k] = conic[p, 2]
            lo[k] = opac[p]
            lr2[k] = radius2[p]
            lcr[k] = color[p, 0]
            lcg[k] = color[p, 1]
            lcb[k] = color[p, 2]
        rowk = np.empty(ne, np.int64)
        rowdy = np.empty(ne, np.float64)
        rowrem = np.empty(ne, np.float64)
        rec_k = np.empty(ne, np.int64)
        rec_alpha = np.empty(ne, np.float64)
        rec_T = np.empty(ne, np.float64)
        for py in range(y0, y1):
            cy = py + 0.5
            rn = 0
            for k in range(ne):
                dy = cy - lmy[k]
                rem = lr2[k] - dy * dy
                if rem >= 0.0:
                    rowk[rn] = k
                    rowdy[rn] = dy
                    rowrem[rn] = rem
                    rn += 1
            if rn == 0:
                continue
            for px in range(x0, x1):
                cx = px + 0.5
                gr = dimg[py, px, 0]
                gg = dimg[py, px, 1]
                gb = dimg[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                T = 1.0
                cnt = 0
                for j in range(rn):
                    k = rowk[j]
                    dx = cx - lmx[k]
                    if dx * dx > rowrem[j]:
                        continue
                    dy = rowdy[j]
                    power = -0.5 * (la[k] * dx * dx + lc[k] * dy * dy) \
                        - lb[k] * dx * dy
                    alpha = lo[k] * np.exp(power)
                    if alpha < ALPHA_MIN:
                        continue
                    if alpha > 1.0:
                        alpha = 1.0
                    rec_k[cnt] = k
                    rec_alpha[cnt] = alpha
                    rec_T[cnt] = T
                    cnt += 1
                    T *= 1.0 - alpha
                    if T < T_STOP:
                        break
                if cnt == 0:
                    continue
                # U = d(loss)/d(remaining transmittance), seeded by background
                U = bg[0] * gr + bg[1] * gg + bg[2] * gb
                for j in range(cnt - 1, -1, -1):
                    k = rec_k[j]
                    alpha = rec_alpha[j]
                    Tj = rec_T[j]
                    cg = lcr[k] * gr + lcg[k] * gg + lcb[k] * gb
                    w = alpha * Tj
                    row = s0 + k
                    pair_grad[row, 6] += w * gr
                    pair_grad[row, 7] += w * gg
                    pair_grad[row, 8] += w * gb
                    dalpha = Tj * (cg - U)
                    # alpha = o * exp(power); at the clamp alpha == 1 the
                    # upstream sensitivity to o and power is zero
                    if alpha < 1.0:
                        gexp = alpha / lo[k]
                        pair_grad[row, 5] += gexp * dalpha
                        dpower = alpha * dalpha
                        dx = cx - lmx[k]
                        dy = cy - lmy[k]
                        pair_grad[row, 0] += dpower * (la[k] * dx + lb[k] * dy)
                        pair_grad[row, 1] += dpower * (lb[k] * dx + lc[k] * dy)
                        pair_grad[row, 2] += -0.5 * dx * dx * dpower
                        pair_grad[row, 3] += -dx * dy * dpower
                        pair_grad[row, 4] += -0.5 * dy * dy * dpower
                    U = alpha * cg + (1.0 - alpha) * U


@njit(cache=True)
def scatter_bilinear(ggrid, y0, x0, y1, x1, tx, ty, gout):
    """Deterministic serial scatter-add of bilinear corner weights."""
    n, C = gout.shape
    for i in range(n):
        wx1 = tx[i]
        wx0 = 1.0 - wx1
        wy1 = ty[i]
        wy0 = 1.0 - wy1
        a, b = y0[i], y1[i]
        u, v = x0[i], x1[i]
        w00 = wx0 * wy0
        w01 = wx1 * wy0
        w10 = wx0 * wy1
        w11 = wx1 * wy1
        for c in range(C):
            g = gout[i, c]
            ggrid[a, u, c] += w00 * g
            ggrid[a, v, c] += w01 * g
            ggrid[b, u, c] += w10 * g
            ggrid[b, v, c] += w11 * g
