"""Gaussian placement: one ray per sampling pixel, a uniform coarse pass, and
an opacity-driven importance resampling pass, each decoded into primitives.

The coarse/fine passes are concatenated, so every call yields exactly
grid^2 * (n_coarse + n_fine) primitives, each carrying its sample anchor and
motion basis vector.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import Camera
from .gaussians import decode, concat_sets


class SamplingConfig:
    def __init__(self, grid=32, n_coarse=6, n_fine=6, jitter=False):
        if grid < 1:
            raise ValueError("grid must be >= 1")
        if n_coarse < 2:
            raise ValueError("n_coarse must be >= 2")
        if n_fine < 0:
            raise ValueError("n_fine must be >= 0")
        self.grid = int(grid)
        self.n_coarse = int(n_coarse)
        self.n_fine = int(n_fine)
        self.jitter = bool(jitter)

    @property
    def per_ray(self):
        return self.n_coarse + self.n_fine

    @property
    def total(self):
        return self.grid * self.grid * self.per_ray

    @classmethod
    def paper(cls, jitter=False):
        return cls(grid=64, n_coarse=24, n_fine=24, jitter=jitter)

    @classmethod
    def desk(cls, jitter=False):
        return cls(grid=32, n_coarse=6, n_fine=6, jitter=jitter)


def canonical_frontal_camera(bbox_half_extent=1.0, base_size=256):
    """Frontal viewpoint on the -z axis used to instantiate avatars for reuse."""
    dist = 2.7 * bbox_half_extent
    from .cameras import look_at

    R, t = look_at((0.0, 0.0, -dist), (0.0, 0.0, 0.0))
    near = dist - 1.2 * bbox_half_extent
    far = dist + 1.2 * bbox_half_extent
    focal = 1.2 * base_size
    return Camera(focal, (base_size / 2, base_size / 2), R, t, near, far, base_size)


def shoot_rays(camera, grid):
    """Rays through the centers of a grid x grid pixel lattice.

    Returns (origins, directions): (grid^2, 3) arrays in world space with
    normalized directions, in row-major pixel order.
    """
    f, cx, cy = camera.scaled_intrinsics(grid)
    px = (np.arange(grid) + 0.5).astype(np.float64)
    xs = (px - cx) / f
    ys = (px - cy) / f
    gx, gy = np.meshgrid(xs, ys)  # gy rows = image rows
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs_world = dirs_cam @ camera.R  # R^T applied row-wise
    dirs_world /= np.linalg.norm(dirs_world, axis=1, keepdims=True)
    origin = camera.position
    origins = np.broadcast_to(origin, dirs_world.shape).copy()
    return origins, dirs_world


def stratified_points(near, far, n, rng=None):
    """One depth per equal stratum of [near, far]; midpoints when rng is None."""
    if not near < far:
        raise ValueError("near must be smaller than far")
    edges = np.linspace(near, far, n + 1)
    if rng is None:
        return 0.5 * (edges[:-1] + edges[1:])
    u = rng.random(n)
    return edges[:-1] + u * (edges[1:] - edges[:-1])


def importance_resample(weights, near, far, n_fine, rng=None):
    """Inverse-CDF sampling of the piecewise-constant density over the coarse bins.

    `weights` holds one non-negative weight per coarse bin; all-zero weights
    degrade to the uniform density. Deterministic mode (rng=None) uses the
    midpoint quantiles (k + 0.5) / n_fine.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("importance weights must be non-negative")
    n_bins = w.shape[-1]
    total = w.sum(axis=-1, keepdims=True)
    flat = total <= 0
    w = np.where(flat, 1.0, w)
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(pdf, axis=-1)
    cdf[..., -1] = 1.0
    squeeze = w.ndim == 1
    if squeeze:
        pdf, cdf = pdf[None], cdf[None]
    if rng is None:
        u = (np.arange(n_fine) + 0.5) / n_fine
        u = np.broadcast_to(u, cdf.shape[:-1] + (n_fine,)).copy()
    else:
        u = rng.random(cdf.shape[:-1] + (n_fine,))
    # one global searchsorted: row i's cdf is shifted into [i, i + 1)
    rows = cdf.shape[0]
    offs = np.arange(rows)[:, None]
    flat_cdf = (cdf + offs).ravel()
    flat_u = (u + offs).ravel()
    idx = (np.searchsorted(flat_cdf, flat_u, side="left").reshape(u.shape)
           - offs * n_bins)
    idx = np.clip(idx, 0, n_bins - 1)
    cdf_prev = np.concatenate([np.zeros(cdf.shape[:-1] + (1,)), cdf[..., :-1]], axis=-1)
    lo = np.take_along_axis(cdf_prev, idx, axis=-1)
    p = np.take_along_axis(pdf, idx, axis=-1)
    frac = np.clip((u - lo) / np.maximum(p, 1e-12), 0.0, 1.0)
    bin_w = (far - near) / n_bins
    depths = near + (idx + frac) * bin_w
    return depths[0] if squeeze else depths


def _ray_points(origins, dirs, depths):
    """(R,3) origins/dirs and (R,S) depths -> (R*S, 3) points, ray-major."""
    pts = origins[:, None, :] + dirs[:, None, :] * depths[..., None]
    return pts.reshape(-1, 3)


def instantiate(triplane, phi, camera, config, rng=None, return_parts=False):
    """Full placement pipeline: rays -> coarse decode -> importance resample ->
    fine decode -> concatenated GaussianSet with anchors and motion bases.

    Deterministic when rng is None. Gradients flow into the triplane and phi;
    resampled depths are treated as constants.
    """
    grid = config.grid
    origins, dirs = shoot_rays(camera, grid)
    n_rays = origins.shape[0]

    jrng = rng if (config.jitter and rng is not None) else None
    d_coarse = stratified_points(camera.near, camera.far, config.n_coarse, jrng)
    if d_coarse.ndim == 1:
        d_coarse = np.broadcast_to(d_coarse, (n_rays, config.n_coarse)).copy()

    pts_c = _ray_points(origins, dirs, d_coarse)
    f_c, m_c = triplane.sample(pts_c)
    set_c = decode(phi, f_c, pts_c.astype(f_c.dtype))
    set_c.basis = m_c

    if config.n_fine > 0:
        o_np = set_c.o.data if isinstance(set_c.o, Tensor) else set_c.o
        weights = o_np.reshape(n_rays, config.n_coarse)
        d_fine = importance_resample(weights, camera.near, camera.far,
                                     config.n_fine, jrng)
        pts_f = _ray_points(origins, dirs, d_fine)
        f_f, m_f = triplane.sample(pts_f)
        set_f = decode(phi, f_f, pts_f.astype(f_f.dtype))
        set_f.basis = m_f
        full = concat_sets(set_c, set_f)
        features = ad.concat([f_c, f_f], axis=0)
    else:
        full = set_c
        features = f_c

    if return_parts:
        return full, {"features": features, "coarse_depths": d_coarse}
    return full
