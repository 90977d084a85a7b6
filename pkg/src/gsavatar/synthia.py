"""Procedural deformable-scene generator used for self-reenactment training.

Each identity is a ground-truth Gaussian scene: an ellipsoidal shell, two eye
clusters and a mouth cluster with distinct colors, plus an identity-specific
linear blendshape map from an expression vector to per-primitive deltas on
position, log-scale and color. The scenes are themselves splattable, so the
reference renderer provides exact ground-truth images and region masks, and a
perfect-fit solution exists for the trainer.
"""

import hashlib
import json
import os
import numpy as np

from .cameras import Camera, orbit_camera
from .gaussians import GaussianSet
from .motion import MotionCode
from .rasterizer import ImageBuffer, rasterize_reference

LABEL_SHELL, LABEL_EYE_L, LABEL_EYE_R, LABEL_MOUTH = 0, 1, 2, 3

POS_LIMIT = 0.8          # scene must stay inside this bbox fraction, deformed
POS_DELTA_CAP = 0.15     # max total |position delta| per coordinate
LOGS_DELTA_CAP = 0.5     # max total |log-scale delta|
COLOR_DELTA_CAP = 0.14   # max total |color delta|
COLOR_MARGIN = 0.15      # base colors stay inside [margin, 1 - margin]

YAW_RANGE = np.deg2rad(35.0)
PITCH_RANGE = np.deg2rad(20.0)
CAMERA_DISTANCE = 2.7


def _rng_for(*key):
    """Deterministic per-sample generator from a structured key."""
    h = hashlib.sha256("/".join(str(k) for k in key).encode()).digest()
    return np.random.default_rng(np.frombuffer(h[:16], dtype=np.uint64))


class ProceduralIdentity:
    def __init__(self, seed, base, labels, blend_mu, blend_logs, blend_color,
                 cluster_centers):
        self.seed = seed
        self.base = base
        self.labels = labels
        self.blend_mu = blend_mu        # (k, N, 3)
        self.blend_logs = blend_logs    # (k, N, 3)
        self.blend_color = blend_color  # (k, N, 3)
        self.cluster_centers = cluster_centers

    @property
    def expr_dim(self):
        return self.blend_mu.shape[0]

    @property
    def count(self):
        return self.base.count

    def label_mask(self, label):
        return self.labels == label


def sample_identity(seed, expr_dim=8):
    """Deterministic head-like scene with bounded blendshapes."""
    rng = _rng_for(seed, "identity")
    n_shell = int(rng.integers(180, 520))
    n_eye = int(rng.integers(24, 60))
    n_mouth = int(rng.integers(36, 90))
    n = n_shell + 2 * n_eye + n_mouth

    ax = rng.uniform(0.42, 0.55)
    ay = rng.uniform(0.55, 0.68)
    az = rng.uniform(0.40, 0.52)

    # shell: jittered points on the ellipsoid surface, face toward -z
    dirs = rng.standard_normal((n_shell, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radial = rng.uniform(0.92, 1.02, (n_shell, 1))
    shell = dirs * radial * np.array([ax, ay, az])

    def cluster(center, spread, count):
        return center + spread * rng.standard_normal((count, 3))

    eye_y = rng.uniform(0.12, 0.22)
    eye_x = rng.uniform(0.16, 0.26)
    eye_z = -az * rng.uniform(0.78, 0.92)
    mouth_y = -rng.uniform(0.22, 0.34)
    mouth_z = -az * rng.uniform(0.80, 0.95)
    eye_l = cluster(np.array([-eye_x, eye_y, eye_z]), 0.035, n_eye)
    eye_r = cluster(np.array([eye_x, eye_y, eye_z]), 0.035, n_eye)
    mouth = cluster(np.array([0.0, mouth_y, mouth_z]), 0.05, n_mouth)

    mu = np.concatenate([shell, eye_l, eye_r, mouth]).astype(np.float64)
    mu = np.clip(mu, -(POS_LIMIT - POS_DELTA_CAP - 0.01), POS_LIMIT - POS_DELTA_CAP - 0.01)
    labels = np.concatenate([
        np.full(n_shell, LABEL_SHELL), np.full(n_eye, LABEL_EYE_L),
        np.full(n_eye, LABEL_EYE_R), np.full(n_mouth, LABEL_MOUTH),
    ]).astype(np.int32)

    s = np.empty((n, 3))
    s[:n_shell] = rng.uniform(0.05, 0.11, (n_shell, 3))
    s[n_shell:] = rng.uniform(0.025, 0.05, (n - n_shell, 3))

    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)

    o = np.empty(n)
    o[:n_shell] = rng.uniform(0.55, 0.9, n_shell)
    o[n_shell:] = rng.uniform(0.8, 0.97, n - n_shell)

    lo, hi = COLOR_MARGIN, 1.0 - COLOR_MARGIN
    skin = np.clip(np.array([0.62, 0.45, 0.35]) + rng.uniform(-0.18, 0.18, 3), lo, hi)
    eye_c = np.clip(np.array([0.2, 0.25, 0.5]) + rng.uniform(-0.05, 0.2, 3), lo, hi)
    mouth_c = np.clip(np.array([0.62, 0.2, 0.22]) + rng.uniform(-0.06, 0.1, 3), lo, hi)
    c = np.empty((n, 3))
    c[:n_shell] = np.clip(skin + 0.05 * rng.standard_normal((n_shell, 3)), lo, hi)
    c[n_shell:n_shell + 2 * n_eye] = np.clip(
        eye_c + 0.04 * rng.standard_normal((2 * n_eye, 3)), lo, hi)
    c[n_shell + 2 * n_eye:] = np.clip(
        mouth_c + 0.04 * rng.standard_normal((n_mouth, 3)), lo, hi)

    base = GaussianSet(mu.astype(np.float32), s.astype(np.float32),
                       q.astype(np.float32), o.astype(np.float32),
                       c.astype(np.float32))

    # blendshape columns: dims 0-1 mouth, 2-3 eyes, 4-5 shell shape, 6-7 shading
    region_of_dim = [LABEL_MOUTH, LABEL_MOUTH, "eyes", "eyes", LABEL_SHELL,
                     LABEL_SHELL, "shade", "shade"]
    blend_mu = np.zeros((expr_dim, n, 3))
    blend_logs = np.zeros((expr_dim, n, 3))
    blend_color = np.zeros((expr_dim, n, 3))
    for k in range(expr_dim):
        region = region_of_dim[k % len(region_of_dim)]
        if region == "eyes":
            mask = (labels == LABEL_EYE_L) | (labels == LABEL_EYE_R)
        elif region == "shade":
            mask = (labels == LABEL_SHELL) | (labels == LABEL_MOUTH)
        else:
            mask = labels == region
        mask_f = mask[:, None].astype(np.float64)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        per = 0.6 + 0.4 * rng.random((n, 1))
        if region == "shade":
            blend_color[k] = mask_f * per * rng.uniform(-1, 1, 3) * 0.06
            blend_logs[k] = mask_f * per * rng.uniform(-1, 1, 3) * 0.06
        else:
            blend_mu[k] = mask_f * per * direction * rng.uniform(0.03, 0.055)
            blend_logs[k] = mask_f * per * rng.uniform(-1, 1, 3) * 0.12
            blend_color[k] = mask_f * per * rng.uniform(-1, 1, 3) * 0.03

    def rescale(blend, cap):
        total = np.abs(blend).sum(axis=0)  # (N, 3) worst case over the e-cube
        worst = total.max()
        if worst > cap:
            blend *= cap / worst
        return blend

    blend_mu = rescale(blend_mu, POS_DELTA_CAP)
    blend_logs = rescale(blend_logs, LOGS_DELTA_CAP)
    blend_color = rescale(blend_color, COLOR_DELTA_CAP)

    centers = {
        "eyes": 0.5 * (eye_l.mean(axis=0) + eye_r.mean(axis=0)),
        "eye_l": eye_l.mean(axis=0),
        "eye_r": eye_r.mean(axis=0),
        "mouth": mouth.mean(axis=0),
    }
    return ProceduralIdentity(seed, base, labels, blend_mu, blend_logs,
                              blend_color, centers)


def deform(identity, e):
    """Apply the linear blendshape map; positions add, log-scales add,
    colors add (bounded by construction, never clamped)."""
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    if e.shape[0] != identity.expr_dim:
        raise ValueError(f"expression dim {e.shape[0]} != {identity.expr_dim}")
    if np.max(np.abs(e)) > 1.0 + 1e-9:
        raise ValueError("expression components must lie in [-1, 1]")
    base = identity.base
    mu = base.mu + np.einsum("k,knd->nd", e, identity.blend_mu)
    s = base.s * np.exp(np.einsum("k,knd->nd", e, identity.blend_logs))
    c = base.c + np.einsum("k,knd->nd", e, identity.blend_color)
    return GaussianSet(mu.astype(np.float32), s.astype(np.float32),
                       base.q, base.o, c.astype(np.float32))


class Sample:
    def __init__(self, image, camera, e, masks, identity_id, code):
        self.image = image
        self.camera = camera
        self.e = np.asarray(e, dtype=np.float32)
        self.masks = masks  # {"eyes": HxW bool, "mouth": HxW bool}
        self.identity_id = identity_id
        self.code = code

    @property
    def resolution(self):
        return self.image.color.shape[0]


def sample_camera(rng, base_size=256):
    yaw = rng.uniform(-YAW_RANGE, YAW_RANGE)
    pitch = rng.uniform(-PITCH_RANGE, PITCH_RANGE)
    return orbit_camera(yaw, pitch, CAMERA_DISTANCE, base_size=base_size,
                        near=CAMERA_DISTANCE - 1.2, far=CAMERA_DISTANCE + 1.2)


def render_sample(identity, e, camera, resolution=128, code_dim=16,
                  background=0.0):
    """Ground-truth image via the reference renderer plus binary region masks
    from splatting each cluster's coverage."""
    gset = deform(identity, e)
    image = rasterize_reference(gset, camera, resolution, background=background)

    masks = {}
    for name, sel in (("eyes", (identity.labels == LABEL_EYE_L)
                       | (identity.labels == LABEL_EYE_R)),
                      ("mouth", identity.labels == LABEL_MOUTH)):
        part = GaussianSet(gset.mu[sel], gset.s[sel], gset.q[sel],
                           gset.o[sel], gset.c[sel])
        cov = rasterize_reference(part, camera, resolution, background=0.0)
        masks[name] = cov.alpha > 0.5
    code = MotionCode.from_expression(e, code_dim)
    return Sample(image, camera, np.asarray(e, np.float32), masks,
                  identity.seed, code)


def expression_for(seed, identity_index, expr_index, expr_dim=8):
    """Expression 0 is always neutral; the rest are bounded random vectors."""
    if expr_index == 0:
        return np.zeros(expr_dim, dtype=np.float64)
    rng = _rng_for(seed, "expr", identity_index, expr_index)
    return rng.uniform(-0.9, 0.9, expr_dim)


def build_dataset(out_dir, n_id, n_expr, n_views, seed, resolution=128,
                  expr_dim=8, code_dim=16):
    """n_id x n_expr x n_views samples with a JSON manifest; fully
    deterministic in (seed, counts) including parallel-friendly per-sample
    seeding."""
    if min(n_id, n_expr, n_views) < 1:
        raise ValueError("all dataset counts must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "masks", "codes"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    samples = []
    for i in range(n_id):
        identity = sample_identity(_identity_seed(seed, i), expr_dim=expr_dim)
        for j in range(n_expr):
            e = expression_for(seed, i, j, expr_dim)
            for v in range(n_views):
                cam = sample_camera(_rng_for(seed, "view", i, j, v))
                smp = render_sample(identity, e, cam, resolution=resolution,
                                    code_dim=code_dim)
                stem = f"id{i:03d}_e{j:02d}_v{v:02d}"
                img_png = os.path.join("images", stem + ".png")
                img_raw = os.path.join("images", stem + ".f32")
                smp.image.save_png(os.path.join(out_dir, img_png))
                smp.image.save_raw(os.path.join(out_dir, img_raw))
                mask_files = {}
                for mname, m in smp.masks.items():
                    rel = os.path.join("masks", f"{stem}_{mname}.png")
                    _save_mask(os.path.join(out_dir, rel), m)
                    mask_files[mname] = rel
                code_rel = os.path.join("codes", stem + ".f32")
                smp.code.values.astype("<f4").tofile(os.path.join(out_dir, code_rel))
                samples.append({
                    "id": i, "expr_index": j, "view_index": v,
                    "e": [float(x) for x in e],
                    "camera": cam.to_dict(),
                    "image": img_png, "raw": img_raw,
                    "masks": mask_files, "code": code_rel,
                })
    manifest = {
        "seed": seed, "n_id": n_id, "n_expr": n_expr, "n_views": n_views,
        "resolution": resolution, "expr_dim": expr_dim, "code_dim": code_dim,
        "samples": samples,
    }
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)
    return manifest


def _identity_seed(seed, index):
    return f"{seed}:{index}"


def _save_mask(path, mask):
    from PIL import Image

    Image.fromarray((mask.astype(np.uint8)) * 255, mode="L").save(path)


def load_manifest(dataset_dir):
    with open(os.path.join(dataset_dir, "manifest.json")) as fh:
        return json.load(fh)


def load_sample(dataset_dir, entry, resolution):
    """Rebuild a Sample from manifest entry files (raw floats + mask PNGs)."""
    from PIL import Image

    image = ImageBuffer.load_raw(os.path.join(dataset_dir, entry["raw"]),
                                 resolution, resolution)
    masks = {}
    for name, rel in entry["masks"].items():
        with Image.open(os.path.join(dataset_dir, rel)) as im:
            masks[name] = np.asarray(im) > 127
    code = np.fromfile(os.path.join(dataset_dir, entry["code"]), dtype="<f4")
    cam = Camera.from_dict(entry["camera"])
    return Sample(image, cam, np.asarray(entry["e"], np.float32),
                  masks, entry["id"], MotionCode(code))
