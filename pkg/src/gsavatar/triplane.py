"""Triplane feature field: three axis-aligned grids sampled by projection.

A 3D point is projected onto the xy, yz and zx planes, each plane is sampled
bilinearly, the three vectors are summed, and the channels are split into an
appearance feature f and a motion basis vector m.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class BBox:
    """Axis-aligned cube mapping world coordinates into plane UV space."""

    def __init__(self, center=(0.0, 0.0, 0.0), half_extent=1.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.half_extent = float(half_extent)
        if self.half_extent <= 0:
            raise ValueError("bbox half extent must be positive")

    @property
    def extent(self):
        return 2.0 * self.half_extent

    def normalize(self, pts):
        """World points to [-1, 1]^3 (points outside map outside, clamped later)."""
        return (pts - self.center) / self.half_extent


class Triplane:
    """Three R x R x C learnable grids plus the f/m channel split.

    Projection convention: point (x, y, z) samples T_xy at (u, v) = (x, y),
    T_yz at (y, z) and T_zx at (z, x).
    """

    def __init__(self, resolution, channels, split, bbox=None, planes=None):
        if resolution < 1 or channels < 1:
            raise ValueError("resolution and channels must be >= 1")
        if not 0 < split < channels:
            raise ValueError(f"split must lie strictly inside (0, {channels}), got {split}")
        self.resolution = int(resolution)
        self.channels = int(channels)
        self.split = int(split)
        self.bbox = bbox if bbox is not None else BBox()
        if planes is None:
            shape = (resolution, resolution, channels)
            planes = [Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
                      for _ in range(3)]
        self.planes = list(planes)  # [T_xy, T_yz, T_zx]

    @classmethod
    def create(cls, resolution, channels, split, bbox=None, init="zeros",
               sigma=0.01, rng=None, dtype=np.float32):
        tp = cls(resolution, channels, split, bbox)
        if init == "zeros":
            pass
        elif init == "gaussian":
            rng = rng if rng is not None else np.random.default_rng(0)
            for p in tp.planes:
                p.data = (sigma * rng.standard_normal(p.data.shape)).astype(dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        if dtype != np.float32:
            for p in tp.planes:
                p.data = p.data.astype(dtype)
        return tp

    @property
    def parameters(self):
        return self.planes

    def sample(self, pts):
        """Sample the field at an (N, 3) world-point batch.

        Returns (f, m): Tensors of shape (N, split) and (N, C - split).
        Points outside the bbox clamp to the border. Differentiable in the
        plane contents (and in the points when given as a tracked Tensor).
        """
        pts_t = pts if isinstance(pts, Tensor) else Tensor(np.asarray(pts))
        if not np.all(np.isfinite(pts_t.data)):
            raise ValueError("triplane sample: non-finite points")
        n = self.bbox.normalize(pts_t.data).astype(self.planes[0].data.dtype)
        uv_xy = Tensor(n[:, (0, 1)])
        uv_yz = Tensor(n[:, (1, 2)])
        uv_zx = Tensor(n[:, (2, 0)])
        s = ad.bilinear_sample_2d(self.planes[0], uv_xy)
        s = s + ad.bilinear_sample_2d(self.planes[1], uv_yz)
        s = s + ad.bilinear_sample_2d(self.planes[2], uv_zx)
        f = s[:, : self.split]
        m = s[:, self.split:]
        return f, m

    def sample_raw(self, pts):
        """Summed C-channel sample without the f/m split."""
        f, m = self.sample(pts)
        return ad.concat([f, m], axis=1)


def new_triplane(resolution, channels, split, bbox=None, init="zeros", sigma=0.01, rng=None):
    return Triplane.create(resolution, channels, split, bbox=bbox, init=init,
                           sigma=sigma, rng=rng)
