"""Binary persistence: single-file avatars (SAV1) and training checkpoints (SCK1).

Both formats are little-endian with a fixed layout and a trailing CRC32 of all
preceding bytes; writes are atomic (temp file + rename). An avatar embeds the
decoder parameter blocks so `animate`/`serve` need exactly one input file.
"""

import io
import os
import struct
import zlib

import numpy as np

from .cameras import Camera, quat_to_rotmat, rotmat_to_quat
from .config import RunConfig
from .gaussians import DecoderPhi
from .motion import AvatarState, MotionDecoderPsi

AVATAR_MAGIC = b"SAV1"
CKPT_MAGIC = b"SCK1"
AVATAR_VERSION = 1
CKPT_VERSION = 1


class FileFormatError(ValueError):
    pass


def _pack_camera(cam):
    q = rotmat_to_quat(cam.R)
    return struct.pack(
        "<12dI", cam.focal, cam.principal[0], cam.principal[1],
        q[0], q[1], q[2], q[3], cam.t[0], cam.t[1], cam.t[2],
        cam.near, cam.far, cam.base_size,
    )


def _unpack_camera(buf):
    vals = struct.unpack("<12dI", buf)
    focal, px, py = vals[0], vals[1], vals[2]
    q = np.array(vals[3:7])
    t = np.array(vals[7:10])
    near, far, base = vals[10], vals[11], vals[12]
    return Camera(focal, (px, py), quat_to_rotmat(q), t, near, far, base)


CAMERA_BYTES = 12 * 8 + 4
HEADER_BYTES = 4 + 4 + 8 + 5 * 4 + CAMERA_BYTES + 3 * 8


def avatar_file_size(n, f_dim, m_dim, code_dim, hidden_phi, hidden_psi,
                     psi_out=None):
    """Exact byte size of an avatar file with the given dimensions."""
    psi_out = f_dim if psi_out is None else psi_out
    arrays = n * (3 + f_dim + m_dim) * 4
    phi = (f_dim * hidden_phi + hidden_phi + hidden_phi * 13 + 13) * 4
    psi = (2 * (2 * code_dim * m_dim + m_dim)
           + m_dim * hidden_psi + hidden_psi
           + hidden_psi * psi_out + psi_out) * 4 + 2 * 4  # hidden/out dims
    return HEADER_BYTES + arrays + phi + psi + 4


def _write_f32(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(fh, shape):
    count = int(np.prod(shape))
    data = fh.read(count * 4)
    if len(data) != count * 4:
        raise FileFormatError("truncated array block")
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def save_avatar(path, avatar, psi):
    """Byte-exact round-trippable single file: header, arrays, decoder blocks,
    CRC32."""
    n = avatar.count
    f_dim = avatar.features.shape[1]
    m_dim = avatar.bases.shape[1]
    phi = avatar.phi
    buf = io.BytesIO()
    buf.write(AVATAR_MAGIC)
    buf.write(struct.pack("<IQ", AVATAR_VERSION, n))
    buf.write(struct.pack("<5I", psi.code_dim, f_dim, m_dim, phi.hidden, psi.hidden))
    buf.write(_pack_camera(avatar.camera))
    buf.write(struct.pack("<3d", phi.offset_radius, phi.scale_max, phi.scale_bias))
    _write_f32(buf, avatar.anchors)
    _write_f32(buf, avatar.features)
    _write_f32(buf, avatar.bases)
    for p in (phi.w1, phi.b1, phi.w2, phi.b2):
        _write_f32(buf, p.data)
    buf.write(struct.pack("<II", psi.hidden, psi.out_dim))
    for p in psi.parameters:
        _write_f32(buf, p.data)
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    _atomic_write(path, payload + struct.pack("<I", crc))


def load_avatar(path):
    """Returns (AvatarState, MotionDecoderPsi); rejects wrong magic, version,
    or checksum (reporting the corrupt offset region)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_BYTES + 4:
        raise FileFormatError("file too short to be an avatar")
    payload, stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != stored:
        raise FileFormatError(
            f"checksum mismatch over bytes [0, {len(payload)}): "
            f"stored {stored:#010x}, computed {actual:#010x}")
    fh = io.BytesIO(payload)
    if fh.read(4) != AVATAR_MAGIC:
        raise FileFormatError("bad magic, not an avatar file")
    version, n = struct.unpack("<IQ", fh.read(12))
    if version != AVATAR_VERSION:
        raise FileFormatError(f"unsupported avatar version {version}")
    code_dim, f_dim, m_dim, hidden_phi, hidden_psi_hdr = struct.unpack(
        "<5I", fh.read(20))
    camera = _unpack_camera(fh.read(CAMERA_BYTES))
    offset_radius, scale_max, scale_bias = struct.unpack("<3d", fh.read(24))
    anchors = _read_f32(fh, (n, 3))
    features = _read_f32(fh, (n, f_dim))
    bases = _read_f32(fh, (n, m_dim))
    phi = DecoderPhi(in_dim=f_dim, hidden=hidden_phi)
    phi.offset_radius = offset_radius
    phi.scale_max = scale_max
    phi.scale_bias = scale_bias
    phi.w1.data = _read_f32(fh, (f_dim, hidden_phi))
    phi.b1.data = _read_f32(fh, (hidden_phi,))
    phi.w2.data = _read_f32(fh, (hidden_phi, 13))
    phi.b2.data = _read_f32(fh, (13,))
    hidden_psi, psi_out = struct.unpack("<II", fh.read(8))
    if hidden_psi != hidden_psi_hdr:
        raise FileFormatError("psi block disagrees with header")
    psi = MotionDecoderPsi(code_dim=code_dim, channels=m_dim, hidden=hidden_psi,
                           out_dim=psi_out)
    shapes = [(2 * code_dim, m_dim), (m_dim,), (2 * code_dim, m_dim), (m_dim,),
              (m_dim, hidden_psi), (hidden_psi,), (hidden_psi, psi_out), (psi_out,)]
    for p, shape in zip(psi.parameters, shapes):
        p.data = _read_f32(fh, shape)
    if fh.read(1):
        raise FileFormatError("trailing bytes after decoder blocks")
    avatar = AvatarState(anchors, features, bases, phi, camera)
    return avatar, psi


def export_point_list(path, gset):
    """Flat binary export: per primitive mu(3) s(3) q(4) o(1) c(3) float32."""
    mu, s, q, o, c = gset.arrays()
    flat = np.concatenate([mu, s, q, o[:, None], c], axis=1)
    _atomic_write(path, np.ascontiguousarray(flat, dtype="<f4").tobytes())


# -- checkpoints -----------------------------------------------------------------

def _write_array(buf, arr):
    arr = np.asarray(arr)
    code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}[arr.dtype]
    buf.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(arr.astype("<f4" if code == 0 else "<f8").tobytes())


def _read_array(fh):
    code, ndim = struct.unpack("<BB", fh.read(2))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    dt = "<f4" if code == 0 else "<f8"
    count = int(np.prod(shape)) if shape else 1
    data = fh.read(count * (4 if code == 0 else 8))
    return np.frombuffer(data, dtype=dt).reshape(shape).copy()


def save_checkpoint(path, model, optimizer, step):
    cfg_text = model.cfg.to_text().encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, step))
    buf.write(struct.pack("<I", model.n_identities))
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    digest = model.cfg.digest().encode()
    buf.write(struct.pack("<I", len(digest)))
    buf.write(digest)
    params = model.all_params()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        _write_array(buf, p.data)
    state, t = optimizer.state_arrays()
    buf.write(struct.pack("<QI", t, len(state)))
    for arr in state:
        _write_array(buf, arr)
    payload = buf.getvalue()
    _atomic_write(path, payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path, dtype=np.float32):
    """Rebuilds (model, optimizer, step, cfg) exactly as saved."""
    from .trainer import AvatarModel

    with open(path, "rb") as fh:
        blob = fh.read()
    payload, stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise FileFormatError("checkpoint checksum mismatch")
    fh = io.BytesIO(payload)
    if fh.read(4) != CKPT_MAGIC:
        raise FileFormatError("bad magic, not a checkpoint")
    version, step = struct.unpack("<IQ", fh.read(12))
    if version != CKPT_VERSION:
        raise FileFormatError(f"unsupported checkpoint version {version}")
    n_id = struct.unpack("<I", fh.read(4))[0]
    cfg_len = struct.unpack("<I", fh.read(4))[0]
    cfg = RunConfig.from_text(fh.read(cfg_len).decode())
    dig_len = struct.unpack("<I", fh.read(4))[0]
    digest = fh.read(dig_len).decode()
    if digest != cfg.digest():
        raise FileFormatError("config hash does not match embedded config")
    model = AvatarModel(n_id, cfg, dtype=dtype)
    n_params = struct.unpack("<I", fh.read(4))[0]
    params = model.all_params()
    if n_params != len(params):
        raise FileFormatError(
            f"checkpoint has {n_params} parameters, model expects {len(params)}")
    for p in params:
        arr = _read_array(fh)
        if arr.shape != p.data.shape:
            raise FileFormatError(
                f"parameter shape {arr.shape} does not match {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    t, n_state = struct.unpack("<QI", fh.read(12))
    state = [_read_array(fh) for _ in range(n_state)]
    optimizer = model.make_optimizer()
    optimizer.load_state_arrays(state, t)
    return model, optimizer, step, cfg


def _atomic_write(path, data):
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
