"""Named finite-difference verification suites over every differentiable stage.

Each suite builds a randomized 64-bit micro instance whose loss is smooth in a
finite-difference window (broad Gaussians, mid-range opacities, interior
sample points) and compares reverse-mode gradients against central
differences.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import Camera, look_at
from .gaussians import DecoderPhi, GaussianSet, decode
from .gradcheck import finite_diff_check
from .motion import MotionDecoderPsi, animate_features, modulate, residual
from .rasterizer import render_image
from .triplane import Triplane

DEFAULT_TOL = 1e-6


def _cam(base=8, dist=3.0):
    R, t = look_at((0, 0, -dist), (0, 0, 0))
    return Camera(base * 1.2, (base / 2, base / 2), R, t, dist - 1.5,
                  dist + 1.5, base)


def suite_autodiff_primitives(rng):
    a = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    x = Tensor(rng.uniform(0.3, 2.0, (4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3)))

    def f():
        h = ad.softplus(a @ b)
        h = ad.layer_normalize(h + x)
        h = ad.sigmoid(h) * ad.tanh(x) + ad.sqrt(x) + ad.absolute(h)
        both = ad.concat([h, x], axis=1)
        return (both.mean(axis=0) ** 2.0).sum() + (h * w).sum()

    return finite_diff_check(f, [a, b, x])


def suite_conv2d(rng):
    x = Tensor(rng.standard_normal((1, 6, 6, 2)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 3, 2, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 2, 2, 3)))

    def f():
        return (ad.conv2d(x, k, stride=2) * w).sum()

    return finite_diff_check(f, [x, k])


def suite_bilinear(rng):
    g = Tensor(rng.standard_normal((6, 7, 4)), requires_grad=True)
    uv = Tensor(rng.uniform(-0.8, 0.8, (9, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((9, 4)))

    def f():
        return (ad.bilinear_sample_2d(g, uv) * w).sum()

    return finite_diff_check(f, [g, uv])


def suite_triplane_sample(rng):
    tp = Triplane.create(6, 6, 3, init="gaussian", sigma=0.5, rng=rng,
                         dtype=np.float64)
    pts = rng.uniform(-0.8, 0.8, (7, 3))
    wf = Tensor(rng.standard_normal((7, 3)))
    wm = Tensor(rng.standard_normal((7, 3)))

    def f():
        fe, mo = tp.sample(pts)
        return (fe * wf).sum() + (mo * wm).sum()

    return finite_diff_check(f, tp.parameters)


def suite_decode(rng):
    phi = DecoderPhi(in_dim=5, hidden=7, rng=rng, dtype=np.float64)
    feats = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    anchors = rng.uniform(-0.5, 0.5, (4, 3))
    ws = [Tensor(rng.standard_normal(sh))
          for sh in [(4, 3), (4, 3), (4, 4), (4,), (4, 3)]]

    def f():
        gs = decode(phi, feats, anchors)
        return ((gs.mu * ws[0]).sum() + (gs.s * ws[1]).sum()
                + (gs.q * ws[2]).sum() + (gs.o * ws[3]).sum()
                + (gs.c * ws[4]).sum())

    return finite_diff_check(f, [feats] + phi.parameters)


def suite_motion(rng):
    psi = MotionDecoderPsi(code_dim=4, channels=6, hidden=9, rng=rng,
                           dtype=np.float64)
    # exercise a non-trivial output layer, not the zero init
    psi.w2.data = 0.3 * rng.standard_normal(psi.w2.data.shape)
    psi.b2.data = 0.1 * rng.standard_normal(psi.b2.data.shape)
    m = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    code_s = rng.uniform(-1, 1, 4).astype(np.float64)
    code_d = rng.uniform(-1, 1, 4).astype(np.float64)
    w = Tensor(rng.standard_normal((5, 6)))

    def f():
        mt = modulate(psi, m, code_s, code_d)
        return (residual(psi, mt) * w).sum()

    return finite_diff_check(f, [m] + psi.parameters)


def _micro_scene(rng, n=3):
    mu = rng.uniform(-0.3, 0.3, (n, 3))
    mu[:, 2] = np.linspace(-0.4, 0.4, n)
    s = rng.uniform(0.5, 0.9, (n, 3))
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    o = rng.uniform(0.3, 0.6, n)
    c = rng.uniform(0.2, 0.8, (n, 3))
    return [Tensor(v, requires_grad=True) for v in (mu, s, q, o, c)]


def suite_rasterize(rng):
    mu, s, q, o, c = _micro_scene(rng)
    gset = GaussianSet(mu, s, q, o, c)
    cam = _cam(base=8)
    w = Tensor(rng.uniform(0.1, 1.0, (8, 8, 3)))

    def f():
        return (render_image(gset, cam, 8, background=0.3) * w).sum()

    return finite_diff_check(f, [mu, s, q, o, c])


def suite_full_pipeline(rng):
    """Triplane -> decode -> animate -> rasterize -> masked loss, end to end."""
    tp = Triplane.create(6, 6, 3, init="gaussian", sigma=0.4, rng=rng,
                         dtype=np.float64)
    phi = DecoderPhi(in_dim=3, hidden=6, rng=rng, dtype=np.float64)
    # widen initial scales so the 3-ray micro scene covers the 8x8 image
    phi.scale_bias = 2.0
    phi.scale_max = 1.2
    psi = MotionDecoderPsi(code_dim=3, channels=3, hidden=6, rng=rng,
                           dtype=np.float64)
    psi.w2.data = 0.2 * rng.standard_normal(psi.w2.data.shape)
    cam = _cam(base=8)
    anchors = rng.uniform(-0.35, 0.35, (3, 3))
    code_s = rng.uniform(-1, 1, 3)
    code_d = rng.uniform(-1, 1, 3)
    w = Tensor(rng.uniform(0.1, 1.0, (8, 8, 3)))

    def f():
        feats, bases = tp.sample(anchors)
        gset, delta = animate_features(phi, psi, feats, bases, anchors,
                                       code_s, code_d)
        img = render_image(gset, cam, 8, background=0.2)
        norm = ad.sqrt((delta * delta).sum(axis=1) + 1e-12).mean()
        return (img * w).sum() + 0.1 * norm

    params = tp.parameters + phi.parameters + psi.parameters
    return finite_diff_check(f, params)


SUITES = {
    "autodiff": suite_autodiff_primitives,
    "conv2d": suite_conv2d,
    "bilinear": suite_bilinear,
    "triplane": suite_triplane_sample,
    "decode": suite_decode,
    "motion": suite_motion,
    "rasterize": suite_rasterize,
    "pipeline": suite_full_pipeline,
}


def run_suites(names=None, seed=0, tol=DEFAULT_TOL):
    """Returns {name: (GradCheckResult, passed)} for the selected suites."""
    names = list(SUITES) if not names else list(names)
    out = {}
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown gradient suite {name!r}")
        rng = np.random.default_rng([seed, hash(name) % (2 ** 32)])
        res = SUITES[name](rng)
        out[name] = (res, res.max_rel_err <= tol)
    return out
