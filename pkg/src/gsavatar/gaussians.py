"""3D Gaussian primitives and the feature-to-attribute decoder.

The decoder is a single-hidden-layer MLP (softplus) mapping a sampled feature
vector to 13 raw attributes, squashed so that any finite parameters yield a
valid primitive: position as a tanh-bounded offset from the sampling anchor,
sigmoid-bounded scales in (0, s_max), an identity-biased normalized
quaternion, and sigmoid opacity/color.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# defaults are fractions of the field bbox extent (2.0 for the unit cube)
OFFSET_RADIUS_FRAC = 2.0 / 64.0
SCALE_MAX_FRAC = 0.05


class GaussianPrimitive:
    """One renderable primitive: a row view into a GaussianSet."""

    __slots__ = ("mu", "s", "q", "o", "c", "anchor", "basis")

    def __init__(self, mu, s, q, o, c, anchor=None, basis=None):
        self.mu = mu
        self.s = s
        self.q = q
        self.o = o
        self.c = c
        self.anchor = anchor
        self.basis = basis


class GaussianSet:
    """Struct-of-arrays batch of primitives. Fields may be Tensors (tracked)
    or plain arrays; `count` is shared by every field."""

    __slots__ = ("mu", "s", "q", "o", "c", "anchor", "basis")

    def __init__(self, mu, s, q, o, c, anchor=None, basis=None):
        self.mu = mu
        self.s = s
        self.q = q
        self.o = o
        self.c = c
        self.anchor = anchor
        self.basis = basis
        counts = {self._len(f) for f in (mu, s, q, o, c) if f is not None}
        if anchor is not None:
            counts.add(self._len(anchor))
        if basis is not None:
            counts.add(self._len(basis))
        if len(counts) != 1:
            raise ValueError(f"field row counts disagree: {sorted(counts)}")

    @staticmethod
    def _len(f):
        return (f.data if isinstance(f, Tensor) else f).shape[0]

    @property
    def count(self):
        return self._len(self.mu)

    def primitive(self, i):
        """Row view of one primitive (plain array values)."""
        if not 0 <= i < self.count:
            raise IndexError(f"primitive {i} out of range [0, {self.count})")
        mu, s, q, o, c = self.arrays()

        def aux(f):
            if f is None:
                return None
            return (f.data if isinstance(f, Tensor) else f)[i]

        return GaussianPrimitive(mu[i], s[i], q[i], float(o[i]), c[i],
                                 anchor=aux(self.anchor), basis=aux(self.basis))

    def arrays(self):
        """Plain ndarray views of the renderable attributes."""
        def v(f):
            return f.data if isinstance(f, Tensor) else f
        return v(self.mu), v(self.s), v(self.q), v(self.o), v(self.c)

    def detached(self):
        def d(f):
            if f is None:
                return None
            return f.data if isinstance(f, Tensor) else f
        return GaussianSet(*(d(getattr(self, k)) for k in self.__slots__))

    def validate(self, atol=1e-5):
        mu, s, q, o, c = self.arrays()
        qn = np.linalg.norm(q, axis=1)
        if not np.allclose(qn, 1.0, atol=atol):
            raise ValueError("quaternions are not unit length")
        if not np.all(s > 0):
            raise ValueError("scales must be strictly positive")
        if np.any(o < 0) or np.any(o > 1):
            raise ValueError("opacity out of [0, 1]")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("color out of [0, 1]")


def concat_sets(a, b):
    def cat(x, y):
        if x is None or y is None:
            return None
        if isinstance(x, Tensor) or isinstance(y, Tensor):
            x = x if isinstance(x, Tensor) else Tensor(x)
            y = y if isinstance(y, Tensor) else Tensor(y)
            return ad.concat([x, y], axis=0)
        return np.concatenate([x, y], axis=0)
    return GaussianSet(*(cat(getattr(a, k), getattr(b, k)) for k in GaussianSet.__slots__))


class DecoderPhi:
    """MLP: feature (in_dim) -> hidden (softplus) -> 13 raw attributes."""

    RAW_DIM = 13  # 3 mu offset + 3 scale + 3 quat xyz + 1 opacity + 3 color

    def __init__(self, in_dim=48, hidden=96, bbox_extent=2.0, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = int(in_dim)
        self.hidden = int(hidden)
        self.offset_radius = OFFSET_RADIUS_FRAC * bbox_extent
        self.scale_max = SCALE_MAX_FRAC * bbox_extent
        # initial scale ~ half the offset radius
        frac = 0.5 * self.offset_radius / self.scale_max
        self.scale_bias = float(np.log(frac / (1.0 - frac)))
        k1 = np.sqrt(1.0 / self.in_dim)
        k2 = np.sqrt(1.0 / self.hidden)
        self.w1 = Tensor((k1 * rng.standard_normal((self.in_dim, self.hidden))).astype(dtype),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(self.hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor((k2 * rng.standard_normal((self.hidden, self.RAW_DIM))).astype(dtype),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(self.RAW_DIM, dtype=dtype), requires_grad=True)

    @property
    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def zero_output_layer(self):
        self.w2.data[:] = 0
        self.b2.data[:] = 0

    def param_count(self):
        return sum(p.data.size for p in self.parameters)

    def raw(self, f):
        h = ad.softplus(ad.linear(f, self.w1, self.b1))
        return ad.linear(h, self.w2, self.b2)


def decode(phi, f, anchors):
    """Decode features (N, in_dim) sampled at `anchors` (N, 3) into a GaussianSet."""
    f = f if isinstance(f, Tensor) else Tensor(f)
    if f.shape[1] != phi.in_dim:
        raise ad.ShapeError(f"decoder expects {phi.in_dim} channels, got {f.shape[1]}")
    for p in phi.parameters:
        if not np.all(np.isfinite(p.data)):
            raise ArithmeticError("decoder parameters are non-finite")
    anchors_t = anchors if isinstance(anchors, Tensor) else Tensor(anchors)
    raw = phi.raw(f)
    mu = anchors_t + ad.tanh(raw[:, 0:3]) * phi.offset_radius
    # clip keeps the float32 sigmoid away from exact 0, preserving s > 0
    s = ad.sigmoid(ad.clip(raw[:, 3:6] + phi.scale_bias, -60.0, 60.0)) * phi.scale_max
    # raw quaternion is the (x, y, z) part; the identity bias supplies w = 1
    ones = Tensor(np.ones((raw.shape[0], 1), dtype=raw.dtype))
    q_raw = ad.concat([ones, raw[:, 6:9]], axis=1)
    q_norm = ad.sqrt((q_raw * q_raw).sum(axis=1, keepdims=True))
    q = q_raw / q_norm
    o = ad.sigmoid(raw[:, 9])
    c = ad.sigmoid(raw[:, 10:13])
    return GaussianSet(mu, s, q, o, c, anchor=anchors_t, basis=None)


def covariance(s, q):
    """Covariance(s) R diag(s)^2 R^T from scales (...,3) and unit quaternions (...,4)."""
    s = np.asarray(s)
    q = np.asarray(q)
    single = q.ndim == 1
    if single:
        s, q = s[None], q[None]
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm < 1e-12):
        raise ValueError("zero quaternion")
    from .cameras import quat_to_rotmat

    R = quat_to_rotmat(q / norm[:, None])
    M = R * s[:, None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return cov[0] if single else cov
