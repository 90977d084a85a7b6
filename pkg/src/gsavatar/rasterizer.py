"""Differentiable 3D Gaussian splatting on the CPU.

project() performs the EWA first-order projection of world-space Gaussians to
screen space; rasterize() composites them through 16x16 tiles; the naive
rasterize_reference() shares the exact compositing semantics and serves as
the oracle; rasterize_backward() produces analytic gradients for all five
attribute arrays.
"""

import numpy as np

from . import _raster_kernels as K
from . import autodiff as ad
from .autodiff import Tensor
from .cameras import quat_to_rotmat

COV_DILATION = 0.3  # px^2 screen-space low-pass added to the diagonal


class ImageBuffer:
    """H x W x 3 linear-color image with an optional alpha (coverage) plane."""

    def __init__(self, color, alpha=None):
        self.color = np.asarray(color)
        self.alpha = None if alpha is None else np.asarray(alpha)
        if not np.all(np.isfinite(self.color)):
            raise ValueError("image contains non-finite values")

    @property
    def shape(self):
        return self.color.shape

    def to_srgb8(self):
        c = np.clip(self.color, 0.0, 1.0)
        srgb = np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)
        return (srgb * 255.0 + 0.5).astype(np.uint8)

    def save_png(self, path):
        from PIL import Image

        Image.fromarray(self.to_srgb8(), mode="RGB").save(path)

    def save_raw(self, path):
        """Planar float32 little-endian: 3 x H x W, C-order."""
        planes = np.ascontiguousarray(
            self.color.transpose(2, 0, 1).astype("<f4")
        )
        with open(path, "wb") as fh:
            fh.write(planes.tobytes())

    @classmethod
    def load_raw(cls, path, height, width):
        data = np.fromfile(path, dtype="<f4")
        planes = data.reshape(3, height, width)
        return cls(planes.transpose(1, 2, 0).astype(np.float32))


class ProjectedGaussians:
    """Screen-space batch: means, packed 2x2 covariances/conics, depths,
    per-primitive cull radii and the indices of surviving primitives."""

    __slots__ = ("mean", "cov", "conic", "depth", "radius", "opacity", "color",
                 "index", "count")

    def __init__(self, mean, cov, conic, depth, radius, opacity, color, index):
        self.mean = mean
        self.cov = cov
        self.conic = conic
        self.depth = depth
        self.radius = radius
        self.opacity = opacity
        self.color = color
        self.index = index
        self.count = mean.shape[0]


def _attr_arrays(gset):
    mu, s, q, o, c = gset.arrays()
    return (np.asarray(mu, np.float64), np.asarray(s, np.float64),
            np.asarray(q, np.float64), np.asarray(o, np.float64),
            np.asarray(c, np.float64))


def project(gset, camera, resolution):
    """EWA projection with +0.3 px^2 dilation; culls primitives with camera
    depth below the near plane or with everywhere-negligible alpha."""
    mu, s, q, o, c = _attr_arrays(gset)
    f, cx, cy = camera.scaled_intrinsics(resolution)
    t = mu @ camera.R.T + camera.t
    tz = t[:, 2]
    valid = tz >= camera.near
    if not np.any(valid):
        empty = np.zeros((0,))
        return ProjectedGaussians(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
                                  empty, empty, empty, np.zeros((0, 3)),
                                  np.zeros(0, np.int64))
    idx = np.nonzero(valid)[0]
    t = t[idx]
    tz = t[:, 2]
    sx, sq, so, sc = s[idx], q[idx], o[idx], c[idx]

    mean = np.stack([f * t[:, 0] / tz + cx, f * t[:, 1] / tz + cy], axis=1)

    R = quat_to_rotmat(sq)
    r = [[R[:, i, k] for k in range(3)] for i in range(3)]
    sqr = [sx[:, 0] ** 2, sx[:, 1] ** 2, sx[:, 2] ** 2]
    sig3 = [[sum(r[i][k] * r[j][k] * sqr[k] for k in range(3)) for j in range(3)]
            for i in range(3)]
    W = camera.R
    j0 = f / tz
    j2 = -f * t[:, 0] / (tz * tz)
    j5 = -f * t[:, 1] / (tz * tz)
    T2 = [[j0 * W[0, k] + j2 * W[2, k] for k in range(3)],
          [j0 * W[1, k] + j5 * W[2, k] for k in range(3)]]
    V = [[sum(T2[p][k] * sig3[k][n] for k in range(3)) for n in range(3)]
         for p in range(2)]
    A = sum(V[0][n] * T2[0][n] for n in range(3)) + COV_DILATION
    B = sum(V[0][n] * T2[1][n] for n in range(3))
    C = sum(V[1][n] * T2[1][n] for n in range(3)) + COV_DILATION
    det = A * C - B * B
    pd = det > 0
    inv = np.where(pd, 1.0 / np.where(pd, det, 1.0), 0.0)
    conic = np.stack([C * inv, -B * inv, A * inv], axis=1)

    mid = 0.5 * (A + C)
    disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
    lam_max = mid + disc
    # alpha >= 1/255 is impossible beyond this radius, so culling by it keeps
    # the tiled output identical to the untiled reference
    amp = so * 255.0
    with np.errstate(invalid="ignore"):
        r2 = 2.0 * lam_max * np.log(np.maximum(amp, 1.0))
    radius = np.where(amp > 1.0, np.sqrt(np.maximum(r2, 0.0)), -1.0)
    keep = pd & (radius >= 0.0)

    k = np.nonzero(keep)[0]
    return ProjectedGaussians(
        mean[k], np.stack([A, B, C], axis=1)[k], conic[k], tz[k], radius[k],
        so[k], sc[k], idx[k],
    )


def _bin_pairs(proj, resolution):
    """Depth-sort surviving primitives and assign them to 16x16 tiles.

    Returns sorted per-primitive arrays plus (pair_prim, tile_start) in
    tile-major order; within a tile, pairs keep ascending depth order.
    """
    H = W = int(resolution)
    ts = K.TILE
    tiles_x = (W + ts - 1) // ts
    tiles_y = (H + ts - 1) // ts
    order = np.argsort(proj.depth, kind="stable")
    mean = proj.mean[order]
    conic = proj.conic[order]
    opac = proj.opacity[order]
    color = proj.color[order]
    rad = proj.radius[order] + K.RADIUS_PAD
    radius2 = rad * rad

    x_lo = mean[:, 0] - rad
    x_hi = mean[:, 0] + rad
    y_lo = mean[:, 1] - rad
    y_hi = mean[:, 1] + rad
    on = (x_hi >= 0) & (y_hi >= 0) & (x_lo <= W) & (y_lo <= H)
    tx0 = np.clip(np.floor(x_lo / ts), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor(x_hi / ts), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor(y_lo / ts), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor(y_hi / ts), 0, tiles_y - 1).astype(np.int64)
    nx = np.where(on, tx1 - tx0 + 1, 0)
    ny = np.where(on, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    n_tiles = tiles_x * tiles_y
    if total == 0:
        return (mean, conic, opac, color, radius2, order,
                np.zeros(0, np.int64), np.zeros(n_tiles + 1, np.int64), tiles_x)
    offs = np.concatenate([[0], np.cumsum(counts)])
    prim_of_pair = np.repeat(np.arange(counts.size), counts)
    k = np.arange(total) - offs[prim_of_pair]
    w = nx[prim_of_pair]
    dy = k // w
    dx = k - dy * w
    tile_id = (ty0[prim_of_pair] + dy) * tiles_x + (tx0[prim_of_pair] + dx)
    perm = np.argsort(tile_id, kind="stable")  # keeps depth order inside tiles
    pair_prim = prim_of_pair[perm]
    tile_sorted = tile_id[perm]
    tile_start = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    return mean, conic, opac, color, radius2, order, pair_prim, tile_start, tiles_x


def _forward_arrays(gset, camera, resolution, background):
    H = W = int(resolution)
    bg = np.broadcast_to(np.asarray(background, np.float64).reshape(-1), (3,)).astype(np.float64)
    proj = project(gset, camera, resolution)
    binned = _bin_pairs(proj, resolution)
    mean, conic, opac, color, radius2, order, pair_prim, tile_start, tiles_x = binned
    img = np.empty((H, W, 3), np.float64)
    out_T = np.empty((H, W), np.float64)
    K.forward_tiles(mean, conic, opac, color, radius2, pair_prim, tile_start,
                    tiles_x, K.TILE, H, W, bg, img, out_T)
    aux = {"proj": proj, "binned": binned, "bg": bg, "resolution": int(resolution)}
    return img, out_T, aux


def rasterize(gset, camera, resolution, background=0.0, with_alpha=True):
    """Tiled differential-semantics forward pass returning an ImageBuffer."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    img, out_T, _ = _forward_arrays(gset, camera, resolution, background)
    dtype = gset.arrays()[0].dtype
    return ImageBuffer(img.astype(dtype), alpha=(1.0 - out_T).astype(dtype))


def rasterize_reference(gset, camera, resolution, background=0.0, with_alpha=True):
    """Naive per-pixel oracle: global depth sort, no tiles, no radius cull."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    H = W = int(resolution)
    bg = np.broadcast_to(np.asarray(background, np.float64).reshape(-1), (3,)).astype(np.float64)
    proj = project(gset, camera, resolution)
    order = np.argsort(proj.depth, kind="stable")
    img = np.empty((H, W, 3), np.float64)
    out_T = np.empty((H, W), np.float64)
    K.forward_reference(proj.mean[order], proj.conic[order], proj.opacity[order],
                        proj.color[order], H, W, bg, img, out_T)
    dtype = gset.arrays()[0].dtype
    return ImageBuffer(img.astype(dtype), alpha=(1.0 - out_T).astype(dtype))


def _backward_arrays(gset, camera, resolution, dimg, aux):
    """Pair-slot kernel gradients chained through projection back to
    (mu, s, q, o, c); returns float64 arrays shaped like the inputs."""
    mu, s, q, o, c = _attr_arrays(gset)
    n = mu.shape[0]
    proj = aux["proj"]
    mean, conic, opac, color, radius2, order, pair_prim, tile_start, tiles_x = aux["binned"]
    H = W = aux["resolution"]
    bg = aux["bg"]

    dt = gset.arrays()[0].dtype
    grads = {
        "mu": np.zeros((n, 3), dt), "s": np.zeros((n, 3), dt),
        "q": np.zeros((n, 4), dt), "o": np.zeros(n, dt),
        "c": np.zeros((n, 3), dt),
    }
    if proj.count == 0 or pair_prim.size == 0:
        return grads

    pair_grad = np.zeros((pair_prim.size, 9), np.float64)
    K.backward_tiles(mean, conic, opac, color, radius2, pair_prim, tile_start,
                     tiles_x, K.TILE, H, W, bg, np.ascontiguousarray(dimg, np.float64),
                     pair_grad)

    # deterministic segmented reduction of pair slots onto sorted primitives
    m = mean.shape[0]
    perm = np.argsort(pair_prim, kind="stable")
    pp = pair_prim[perm]
    pg = pair_grad[perm]
    starts = np.searchsorted(pp, np.arange(m))
    present = np.searchsorted(pp, np.arange(m), side="right") > starts
    red = np.zeros((m, 9))
    if pp.size:
        seg = np.add.reduceat(pg, np.minimum(starts, pp.size - 1), axis=0)
        red[present] = seg[present]

    d_mean = red[:, 0:2]
    d_conic = red[:, 2:5]
    d_o_px = red[:, 5]
    d_color = red[:, 6:9]

    # undo the depth sort, back to projection (valid-primitive) order
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    d_mean = d_mean[inv]
    d_conic = d_conic[inv]
    d_o_px = d_o_px[inv]
    d_color = d_color[inv]

    idx = proj.index
    # the chain runs in the set's own precision; float64 only for verification
    ct = gset.arrays()[0].dtype.type
    f, cx, cy = camera.scaled_intrinsics(aux["resolution"])
    t = (mu[idx] @ camera.R.T + camera.t).astype(ct)
    tz = t[:, 2]
    sx, sq = s[idx].astype(ct), q[idx].astype(ct)
    d_mean = d_mean.astype(ct)
    d_conic = d_conic.astype(ct)

    # conic -> dilated 2D covariance: GS = -Q GQ Q with Q, GQ symmetric 2x2,
    # GQ = [[da, db/2], [db/2, dc]]; everything expanded componentwise
    qa, qb, qc = (proj.conic[:, 0].astype(ct), proj.conic[:, 1].astype(ct),
                  proj.conic[:, 2].astype(ct))
    da, db, dc = d_conic[:, 0], ct(0.5) * d_conic[:, 1], d_conic[:, 2]
    p00 = qa * da + qb * db
    p01 = qa * db + qb * dc
    p10 = qb * da + qc * db
    p11 = qb * db + qc * dc
    gs00 = -(p00 * qa + p01 * qb)
    gs01 = -(p00 * qb + p01 * qc)
    gs11 = -(p10 * qb + p11 * qc)

    # rotation components as flat arrays
    R = quat_to_rotmat(sq)
    r = [[R[:, i, k] for k in range(3)] for i in range(3)]
    s0, s1, s2 = sx[:, 0], sx[:, 1], sx[:, 2]
    sqr = [s0 * s0, s1 * s1, s2 * s2]
    # sigma3[i][j] = sum_k R[i,k] R[j,k] s_k^2 (symmetric)
    sig3 = [[sum(r[i][k] * r[j][k] * sqr[k] for k in range(3)) for j in range(3)]
            for i in range(3)]

    # T2 = J W with J = [[f/tz, 0, -f tx/tz^2], [0, f/tz, -f ty/tz^2]]
    W = camera.R.astype(ct)
    j0 = f / tz
    j2 = -f * t[:, 0] / (tz * tz)
    j5 = -f * t[:, 1] / (tz * tz)
    T2 = [[j0 * W[0, k] + j2 * W[2, k] for k in range(3)],
          [j0 * W[1, k] + j5 * W[2, k] for k in range(3)]]

    # G_sig3 = T2^T GS T2 (3x3 symmetric)
    g3 = [[gs00 * T2[0][m] * T2[0][n]
           + gs01 * (T2[0][m] * T2[1][n] + T2[1][m] * T2[0][n])
           + gs11 * T2[1][m] * T2[1][n] for n in range(3)] for m in range(3)]

    # dT = 2 GS T2 sigma3; V = T2 sigma3 first
    V = [[sum(T2[p][k] * sig3[k][n] for k in range(3)) for n in range(3)]
         for p in range(2)]
    dT = [[2.0 * (gs00 * V[0][n] + gs01 * V[1][n]) for n in range(3)],
          [2.0 * (gs01 * V[0][n] + gs11 * V[1][n]) for n in range(3)]]
    # dJ = dT W^T
    dJ = [[sum(dT[p][n] * W[m, n] for n in range(3)) for m in range(3)]
          for p in range(2)]

    ftz2 = f / (tz * tz)
    dtx0 = -dJ[0][2] * ftz2
    dtx1 = -dJ[1][2] * ftz2
    dtx2 = (-(dJ[0][0] + dJ[1][1]) * ftz2
            + dJ[0][2] * 2.0 * f * t[:, 0] / tz ** 3
            + dJ[1][2] * 2.0 * f * t[:, 1] / tz ** 3)
    # screen-mean path shares the Jacobian rows
    dtx0 += d_mean[:, 0] * j0
    dtx1 += d_mean[:, 1] * j0
    dtx2 += -(d_mean[:, 0] * t[:, 0] + d_mean[:, 1] * t[:, 1]) * ftz2
    d_mu = np.stack([dtx0, dtx1, dtx2], axis=1) @ W

    # sigma3 = M M^T with M = R diag(s): dM = 2 G_sig3 M
    dM = [[2.0 * sum(g3[i][j] * r[j][k] * (s0 if k == 0 else s1 if k == 1 else s2)
                     for j in range(3)) for k in range(3)] for i in range(3)]
    d_s = np.stack([
        sum(dM[i][0] * r[i][0] for i in range(3)),
        sum(dM[i][1] * r[i][1] for i in range(3)),
        sum(dM[i][2] * r[i][2] for i in range(3)),
    ], axis=1)
    # dR[i][k] = dM[i][k] * s_k
    sk = [s0, s1, s2]
    dR = [[dM[i][k] * sk[k] for k in range(3)] for i in range(3)]

    w_, x_, y_, z_ = sq[:, 0], sq[:, 1], sq[:, 2], sq[:, 3]
    d_qw = 2.0 * (-dR[0][1] * z_ + dR[0][2] * y_ + dR[1][0] * z_
                  - dR[1][2] * x_ - dR[2][0] * y_ + dR[2][1] * x_)
    d_qx = 2.0 * (dR[0][1] * y_ + dR[0][2] * z_ + dR[1][0] * y_
                  - 2 * dR[1][1] * x_ - dR[1][2] * w_ + dR[2][0] * z_
                  + dR[2][1] * w_ - 2 * dR[2][2] * x_)
    d_qy = 2.0 * (-2 * dR[0][0] * y_ + dR[0][1] * x_ + dR[0][2] * w_
                  + dR[1][0] * x_ + dR[1][2] * z_ - dR[2][0] * w_
                  + dR[2][1] * z_ - 2 * dR[2][2] * y_)
    d_qz = 2.0 * (-2 * dR[0][0] * z_ - dR[0][1] * w_ + dR[0][2] * x_
                  + dR[1][0] * w_ - 2 * dR[1][1] * z_ + dR[1][2] * y_
                  + dR[2][0] * x_ + dR[2][1] * y_)
    d_q = np.stack([d_qw, d_qx, d_qy, d_qz], axis=1)

    grads["mu"][idx] = d_mu
    grads["s"][idx] = d_s
    grads["q"][idx] = d_q
    grads["o"][idx] = d_o_px
    grads["c"][idx] = d_color
    return grads


def rasterize_backward(gset, camera, resolution, dimg, background=0.0, aux=None):
    """Gradients of a scalar loss w.r.t. mu, s, q, o, c given dL/dImage.

    Recomputes the forward projection/compositing state when `aux` from a
    prior forward call is not supplied.
    """
    if aux is None:
        _, _, aux = _forward_arrays(gset, camera, resolution, background)
    if aux.get("resolution") != int(resolution):
        raise ValueError("forward state does not match the requested resolution")
    return _backward_arrays(gset, camera, resolution, dimg, aux)


def render_image(gset, camera, resolution, background=0.0):
    """Differentiable render: returns an (H, W, 3) Tensor recorded on the tape
    whenever any Gaussian attribute is a tracked Tensor."""
    img, out_T, aux = _forward_arrays(gset, camera, resolution, background)
    fields = [gset.mu, gset.s, gset.q, gset.o, gset.c]
    tensors = [fld for fld in fields if isinstance(fld, Tensor)]
    dtype = gset.arrays()[0].dtype
    out_data = img.astype(dtype)
    if not tensors:
        return Tensor(out_data)

    def bw(g):
        grads = _backward_arrays(gset, camera, resolution, g, aux)
        by_name = {"mu": grads["mu"], "s": grads["s"], "q": grads["q"],
                   "o": grads["o"], "c": grads["c"]}
        out = []
        for name, fld in zip(["mu", "s", "q", "o", "c"], fields):
            if isinstance(fld, Tensor):
                out.append(by_name[name].astype(fld.data.dtype))
        return tuple(out)

    return ad.custom_op(out_data, tensors, bw)
