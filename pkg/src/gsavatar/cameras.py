"""Pinhole camera: intrinsics at a base resolution plus a rigid world-to-camera pose.

Intrinsics are stored in pixels at `base_size` (square images). Rendering or
ray shooting at any other resolution rescales focal length and principal
point proportionally.
"""

import numpy as np


def quat_to_rotmat(q):
    """Unit quaternion(s) (w, x, y, z) to rotation matrix. q: (4,) or (N, 4)."""
    q = np.asarray(q)
    single = q.ndim == 1
    if single:
        q = q[None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty(q.shape[:1] + (3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotmat_to_quat(R):
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax([R[0, 0], R[1, 1], R[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_mul(a, b):
    """Hamilton product, (w, x, y, z) convention. Supports (N,4) batches."""
    a = np.asarray(a)
    b = np.asarray(b)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


class Camera:
    """Pinhole intrinsics + world-to-camera rigid pose, with depth bounds."""

    def __init__(self, focal, principal, rotation, translation, near, far, base_size=256):
        self.focal = float(focal)
        self.principal = np.asarray(principal, dtype=np.float64)
        self.R = np.asarray(rotation, dtype=np.float64)
        self.t = np.asarray(translation, dtype=np.float64)
        self.near = float(near)
        self.far = float(far)
        self.base_size = int(base_size)
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-5):
            raise ValueError("rotation is not orthonormal")

    def scaled_intrinsics(self, size):
        """(focal, cx, cy) in pixels for a size x size image."""
        s = size / self.base_size
        return self.focal * s, self.principal[0] * s, self.principal[1] * s

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam(self, pts):
        return pts @ self.R.T + self.t

    def copy(self):
        return Camera(self.focal, self.principal.copy(), self.R.copy(),
                      self.t.copy(), self.near, self.far, self.base_size)

    def to_dict(self):
        return {
            "focal": self.focal,
            "principal": self.principal.tolist(),
            "quat": rotmat_to_quat(self.R).tolist(),
            "translation": self.t.tolist(),
            "near": self.near,
            "far": self.far,
            "base_size": self.base_size,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["focal"], d["principal"], quat_to_rotmat(np.asarray(d["quat"])),
            d["translation"], d["near"], d["far"], d.get("base_size", 256),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera rotation/translation for a camera at `eye` looking at `target`.

    Camera convention: +z forward (into the scene), +x right, +y down on the
    image so that pixel rows grow downward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    n = np.linalg.norm(right)
    if n < 1e-9:
        upv = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, upv)
        n = np.linalg.norm(right)
    right /= n
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    return R, t


def orbit_camera(yaw, pitch, distance, focal=None, base_size=256, near=None, far=None,
                 target=(0.0, 0.0, 0.0)):
    """Camera orbiting `target`; yaw/pitch in radians, zero pose on the -z axis."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    eye = np.asarray(target) + distance * np.array([sy * cp, sp, -cy * cp])
    R, t = look_at(eye, target)
    if focal is None:
        focal = 1.2 * base_size
    if near is None:
        near = max(0.05, distance - 1.5)
    if far is None:
        far = distance + 1.5
    return Camera(focal, (base_size / 2, base_size / 2), R, t, near, far, base_size)
