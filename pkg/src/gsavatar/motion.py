"""Feature-space deformation for animation.

Each primitive carries a fixed motion basis vector m_i. To animate, the basis
is AdaLN-modulated by the concatenated source/driving motion codes, a small
MLP predicts a per-primitive residual feature, and the Gaussian is re-decoded
from f_i + delta_f_i. Geometry, appearance and shading all deform through the
decoder; the basis and anchors never change.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import quat_mul
from .gaussians import GaussianSet, decode


class MotionCode:
    """1D motion coefficient vector of fixed dimension."""

    def __init__(self, values, dim=None):
        v = np.asarray(values, dtype=np.float32).reshape(-1)
        if dim is not None and v.shape[0] != dim:
            raise ValueError(f"expected a {dim}-dim motion code, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("motion code contains non-finite values")
        self.values = v

    @property
    def dim(self):
        return self.values.shape[0]

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim, dtype=np.float32))

    @classmethod
    def from_expression(cls, e, dim):
        e = np.asarray(e, dtype=np.float32).reshape(-1)
        if e.shape[0] > dim:
            raise ValueError(f"expression dim {e.shape[0]} exceeds code dim {dim}")
        v = np.zeros(dim, dtype=np.float32)
        v[: e.shape[0]] = e
        return cls(v)


def _code_values(code, dim):
    if isinstance(code, MotionCode):
        v = code.values
    else:
        v = np.asarray(code, dtype=np.float32).reshape(-1)
    if v.shape[0] != dim:
        raise ValueError(f"motion code has dim {v.shape[0]}, decoder expects {dim}")
    return v


class MotionDecoderPsi:
    """Single-layer AdaLN over the basis channels followed by a one-hidden-layer
    MLP predicting the residual feature. The MLP output layer starts at zero so
    animation is exactly the identity at initialization."""

    def __init__(self, code_dim=16, channels=12, hidden=48, out_dim=None,
                 rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.code_dim = int(code_dim)
        self.channels = int(channels)
        self.hidden = int(hidden)
        self.out_dim = int(out_dim) if out_dim is not None else self.channels
        cat = 2 * self.code_dim
        sw = 0.02
        self.w_gamma = Tensor((sw * rng.standard_normal((cat, channels))).astype(dtype),
                              requires_grad=True)
        self.b_gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.w_beta = Tensor((sw * rng.standard_normal((cat, channels))).astype(dtype),
                             requires_grad=True)
        self.b_beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        k1 = np.sqrt(1.0 / channels)
        self.w1 = Tensor((k1 * rng.standard_normal((channels, hidden))).astype(dtype),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(np.zeros((hidden, self.out_dim), dtype=dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(self.out_dim, dtype=dtype), requires_grad=True)

    @property
    def parameters(self):
        return [self.w_gamma, self.b_gamma, self.w_beta, self.b_beta,
                self.w1, self.b1, self.w2, self.b2]

    def zero_adaln(self):
        for p in (self.w_gamma, self.b_gamma, self.w_beta, self.b_beta):
            p.data[:] = 0

    def film(self, code_src, code_drv):
        """Per-channel scale and shift from the concatenated codes (source first)."""
        src = _code_values(code_src, self.code_dim)
        drv = _code_values(code_drv, self.code_dim)
        cat = Tensor(np.concatenate([src, drv])[None, :])
        gamma = ad.linear(cat, self.w_gamma, self.b_gamma)
        beta = ad.linear(cat, self.w_beta, self.b_beta)
        return gamma, beta


def modulate(psi, m, code_src, code_drv, ln_m=None):
    """AdaLN modulation: gamma(cat) * layer_norm(m) + beta(cat)."""
    m = m if isinstance(m, Tensor) else Tensor(m)
    if m.shape[1] != psi.channels:
        raise ad.ShapeError(f"basis has {m.shape[1]} channels, psi expects {psi.channels}")
    gamma, beta = psi.film(code_src, code_drv)
    normed = ln_m if ln_m is not None else ad.layer_normalize(m, eps=1e-5)
    return gamma * normed + beta


def residual(psi, m_tilde):
    """Per-row residual MLP; rows never interact."""
    h = ad.softplus(ad.linear(m_tilde, psi.w1, psi.b1))
    return ad.linear(h, psi.w2, psi.b2)


class AvatarState:
    """Frozen instantiation of one identity: anchors, features, bases, decoder
    parameters and the camera used at instantiation. Immutable once built."""

    def __init__(self, anchors, features, bases, phi, camera):
        self.anchors = np.asarray(anchors)
        self.features = np.asarray(features)
        self.bases = np.asarray(bases)
        self.phi = phi
        self.camera = camera
        n = self.anchors.shape[0]
        if self.features.shape[0] != n or self.bases.shape[0] != n:
            raise ValueError("anchors, features and bases must share their row count")
        self._ln_m = None

    @property
    def count(self):
        return self.anchors.shape[0]

    @property
    def ln_bases(self):
        """Cached layer-normalized bases; the bases are fixed, so this is
        computed once per avatar."""
        if self._ln_m is None:
            self._ln_m = ad.layer_normalize(Tensor(self.bases), eps=1e-5).data
        return self._ln_m

    @classmethod
    def from_gaussian_set(cls, gset, features, phi, camera):
        anchors = gset.anchor.data if isinstance(gset.anchor, Tensor) else gset.anchor
        bases = gset.basis.data if isinstance(gset.basis, Tensor) else gset.basis
        feats = features.data if isinstance(features, Tensor) else features
        return cls(anchors.copy(), np.asarray(feats).copy(), np.asarray(bases).copy(),
                   phi, camera)

    def decode_static(self):
        return decode(self.phi, Tensor(self.features), Tensor(self.anchors))


def animate_features(phi, psi, f, m, anchors, code_src, code_drv, ln_m=None):
    """Tape-aware animation core: returns (GaussianSet, delta_f)."""
    m_tilde = modulate(psi, m, code_src, code_drv, ln_m=ln_m)
    delta_f = residual(psi, m_tilde)
    f = f if isinstance(f, Tensor) else Tensor(f)
    gset = decode(phi, f + delta_f, anchors)
    gset.basis = m if isinstance(m, Tensor) else Tensor(np.asarray(m))
    return gset, delta_f


def animate(avatar, psi, code_src, code_drv):
    """Animate a frozen avatar; cost is linear in the primitive count and
    independent of the triplane and of any image resolution."""
    ln = Tensor(avatar.ln_bases)
    gset, _ = animate_features(
        avatar.phi, psi, avatar.features, avatar.bases, avatar.anchors,
        code_src, code_drv, ln_m=ln,
    )
    return gset


def animate_spatial(avatar, psi_spatial, code_src, code_drv):
    """Ablation: the decoder is bypassed and the residual directly perturbs
    position (added), scale (log-multiplied) and rotation (composed)."""
    if psi_spatial.out_dim != 10:
        raise ValueError("spatial-deformation decoder must output 10 channels")
    ln = Tensor(avatar.ln_bases)
    m_tilde = modulate(psi_spatial, avatar.bases, code_src, code_drv, ln_m=ln)
    d = residual(psi_spatial, m_tilde)
    base = avatar.decode_static()
    mu = base.mu + d[:, 0:3]
    s = base.s * ad.exp(d[:, 3:6])
    dq_raw = d[:, 6:10] + Tensor(np.array([1.0, 0.0, 0.0, 0.0], dtype=d.dtype))
    q_comp = Tensor(quat_mul(dq_raw.data, base.q.data)) if not (
        d._tracked or base.q._tracked
    ) else _quat_mul_tensor(dq_raw, base.q)
    q_norm = ad.sqrt((q_comp * q_comp).sum(axis=1, keepdims=True))
    q = q_comp / q_norm
    gset = GaussianSet(mu, s, q, base.o, base.c,
                       anchor=base.anchor, basis=Tensor(avatar.bases))
    return gset


def _quat_mul_tensor(a, b):
    aw, ax, ay, az = a[:, 0:1], a[:, 1:2], a[:, 2:3], a[:, 3:4]
    bw, bx, by, bz = b[:, 0:1], b[:, 1:2], b[:, 2:3], b[:, 3:4]
    return ad.concat([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)


def basis_similarity_values(avatar, probe_index):
    """Cosine similarity between one probe basis and every basis."""
    if not 0 <= probe_index < avatar.count:
        raise IndexError(f"probe index {probe_index} out of range [0, {avatar.count})")
    m = avatar.bases.astype(np.float64)
    probe = m[probe_index]
    num = m @ probe
    den = np.linalg.norm(m, axis=1) * np.linalg.norm(probe) + 1e-12
    return (num / den).astype(np.float32)


def similarity_colormap(v):
    """[-1, 1] -> diverging blue (negative) / white (zero) / red (positive)."""
    v = np.clip(np.asarray(v, dtype=np.float32), -1.0, 1.0)
    t = np.abs(v)
    white = np.ones(v.shape + (3,), dtype=np.float32)
    red = np.array([0.85, 0.12, 0.12], dtype=np.float32)
    blue = np.array([0.12, 0.25, 0.85], dtype=np.float32)
    target = np.where(v[..., None] >= 0, red, blue)
    return white * (1.0 - t[..., None]) + target * t[..., None]


def basis_similarity(avatar, probe_index, camera, resolution=256):
    """Render the per-primitive cosine-similarity map by splatting the static
    geometry with similarity colors."""
    from .rasterizer import rasterize

    vals = basis_similarity_values(avatar, probe_index)
    base = avatar.decode_static()
    with ad.no_grad():
        gset = GaussianSet(base.mu.data, base.s.data, base.q.data, base.o.data,
                           similarity_colormap(vals))
    return rasterize(gset, camera, resolution, background=0.0)
