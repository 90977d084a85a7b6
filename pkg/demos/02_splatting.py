"""Differentiable splatting: tiled renderer vs the naive reference, plus an
analytic-vs-numeric gradient check on a small scene.
"""

import numpy as np

from gsavatar.autodiff import Tensor
from gsavatar.cameras import orbit_camera
from gsavatar.gaussians import GaussianSet
from gsavatar.gradcheck import finite_diff_check
from gsavatar.rasterizer import rasterize, rasterize_reference, render_image

rng = np.random.default_rng(3)
n = 300
q = rng.standard_normal((n, 4))
scene = GaussianSet(
    rng.uniform(-0.7, 0.7, (n, 3)).astype(np.float32),
    rng.uniform(0.02, 0.15, (n, 3)).astype(np.float32),
    (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32),
    rng.uniform(0.2, 0.95, n).astype(np.float32),
    rng.uniform(0, 1, (n, 3)).astype(np.float32),
)
cam = orbit_camera(0.3, -0.15, 3.0, base_size=128)

tiled = rasterize(scene, cam, 128, background=(0.05, 0.05, 0.08))
naive = rasterize_reference(scene, cam, 128, background=(0.05, 0.05, 0.08))
print("max |tiled - reference| =", np.abs(tiled.color - naive.color).max())
tiled.save_png("demo_splat.png")
print("wrote demo_splat.png")

# gradients: a 3-Gaussian scene checked against central differences
mu = Tensor(np.array([[0.0, 0.0, -0.3], [0.2, 0.1, 0.0], [-0.2, -0.1, 0.3]]),
            requires_grad=True)
s = Tensor(np.full((3, 3), 0.6), requires_grad=True)
qq = Tensor(np.tile([1.0, 0, 0, 0], (3, 1)), requires_grad=True)
o = Tensor(np.array([0.4, 0.5, 0.6]), requires_grad=True)
c = Tensor(rng.uniform(0.2, 0.8, (3, 3)), requires_grad=True)
small = GaussianSet(mu, s, qq, o, c)
w = Tensor(rng.uniform(0.1, 1.0, (8, 8, 3)))
res = finite_diff_check(
    lambda: (render_image(small, orbit_camera(0, 0, 3.0, base_size=8), 8) * w).sum(),
    [mu, s, qq, o, c])
print("worst gradient relative error:", res.max_rel_err)
