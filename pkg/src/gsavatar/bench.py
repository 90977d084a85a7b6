"""Speed measurements for the decoupled-animation contract.

The bench separates the once-per-identity instantiate cost from the per-frame
animate and rasterize costs, and measures animate across triplane resolutions
to demonstrate its independence from the field size.
"""

import time

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .gaussians import DecoderPhi
from .motion import AvatarState, MotionCode, MotionDecoderPsi, animate
from .rasterizer import rasterize
from .sampler import SamplingConfig, canonical_frontal_camera, instantiate
from .triplane import Triplane


def _best_ms(fn, repeats, warmup=2):
    """Best-of-N wall time: the least-noise estimate of intrinsic cost."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.min(times))


def synthetic_model(cfg=None, seed=0, triplane_resolution=None):
    cfg = cfg or RunConfig()
    rng = np.random.default_rng(seed)
    res = triplane_resolution or cfg.triplane_resolution
    tp = Triplane.create(res, cfg.triplane_channels, cfg.feature_split,
                         init="gaussian", sigma=0.05, rng=rng)
    phi = DecoderPhi(in_dim=cfg.feature_split, hidden=cfg.mlp_hidden, rng=rng)
    basis = cfg.triplane_channels - cfg.feature_split
    psi = MotionDecoderPsi(code_dim=cfg.code_dim, channels=basis,
                           hidden=cfg.mlp_hidden, rng=rng)
    psi.w2.data = 0.05 * rng.standard_normal(psi.w2.data.shape).astype(np.float32)
    return tp, phi, psi


def build_avatar(tp, phi, scfg=None):
    scfg = scfg or SamplingConfig.desk()
    cam = canonical_frontal_camera()
    with ad.no_grad():
        gset, parts = instantiate(tp, phi, cam, scfg, return_parts=True)
        avatar = AvatarState(gset.anchor.data, parts["features"].data,
                             gset.basis.data, phi, cam)
    avatar.ln_bases  # warm the cached normalization
    return avatar


def run_bench(cfg=None, avatar=None, psi=None, resolution=128, repeats=10,
              seed=0):
    """Returns timing columns in milliseconds plus derived figures.

    instantiate_ms: rays -> coarse decode -> resample -> fine decode -> avatar
    animate_ms:     motion decode + attribute decode for one new code
    rasterize_ms:   one frame at `resolution` from the animated set
    fps:            1000 / (animate_ms + rasterize_ms), the per-frame path
    """
    cfg = cfg or RunConfig()
    if avatar is not None and psi is not None:
        # dimensions follow the loaded avatar, not the run configuration
        cfg = RunConfig(
            triplane_resolution=cfg.triplane_resolution,
            triplane_channels=avatar.features.shape[1] + avatar.bases.shape[1],
            feature_split=avatar.features.shape[1], code_dim=psi.code_dim,
            mlp_hidden=psi.hidden, sample_grid=cfg.sample_grid,
            samples_coarse=cfg.samples_coarse, samples_fine=cfg.samples_fine)
        tp, phi = None, avatar.phi
    else:
        tp, phi, psi = synthetic_model(cfg, seed=seed)
    scfg = SamplingConfig(cfg.sample_grid, cfg.samples_coarse, cfg.samples_fine)
    cam = canonical_frontal_camera()
    rng = np.random.default_rng(seed + 1)

    result = {"resolution": resolution, "grid": scfg.grid,
              "per_ray": scfg.per_ray}

    if tp is not None:
        def do_instantiate():
            with ad.no_grad():
                gset, parts = instantiate(tp, phi, cam, scfg, return_parts=True)
                return AvatarState(gset.anchor.data, parts["features"].data,
                                   gset.basis.data, phi, cam).ln_bases

        result["instantiate_ms"] = _best_ms(do_instantiate, repeats)
        avatar = build_avatar(tp, phi, scfg)
    else:
        result["instantiate_ms"] = float("nan")

    result["count"] = avatar.count
    zero = MotionCode.zeros(psi.code_dim)

    def fresh_code():
        return MotionCode(rng.uniform(-1, 1, psi.code_dim).astype(np.float32))

    state = {}

    def do_animate():
        with ad.no_grad():
            state["gset"] = animate(avatar, psi, zero, fresh_code()).detached()

    result["animate_ms"] = _best_ms(do_animate, repeats)

    def do_rasterize():
        with ad.no_grad():
            rasterize(state["gset"], cam, resolution, background=0.0)

    result["rasterize_ms"] = _best_ms(do_rasterize, repeats)
    result["frame_ms"] = result["animate_ms"] + result["rasterize_ms"]
    result["fps"] = 1000.0 / result["frame_ms"]

    # animate wall time across triplane resolutions: same N, same decoders,
    # interleaved best-of so machine noise hits both fields equally
    resolutions = (cfg.triplane_resolution, 4 * cfg.triplane_resolution)
    avatars = {}
    for tp_res in resolutions:
        tp2, phi2, _ = synthetic_model(cfg, seed=seed, triplane_resolution=tp_res)
        avatars[tp_res] = build_avatar(tp2, phi2, scfg)
    best = {tp_res: float("inf") for tp_res in resolutions}
    code = fresh_code()
    for tp_res in resolutions:
        with ad.no_grad():
            animate(avatars[tp_res], psi, zero, code)
    for _ in range(max(repeats, 5)):
        for tp_res in resolutions:
            t0 = time.perf_counter()
            with ad.no_grad():
                animate(avatars[tp_res], psi, zero, code)
            best[tp_res] = min(best[tp_res], (time.perf_counter() - t0) * 1e3)
    result["animate_ms_by_triplane"] = best
    return result


def format_table(result):
    lines = [
        f"{'config':>22s}: grid {result['grid']}x{result['grid']}, "
        f"{result['per_ray']}/ray, {result['count']} primitives, "
        f"frame {result['resolution']}x{result['resolution']}",
        f"{'instantiate-ms':>22s}: {result['instantiate_ms']:.2f}",
        f"{'animate-ms':>22s}: {result['animate_ms']:.2f}",
        f"{'rasterize-ms':>22s}: {result['rasterize_ms']:.2f}",
        f"{'effective FPS':>22s}: {result['fps']:.1f}",
    ]
    for res, ms in result["animate_ms_by_triplane"].items():
        lines.append(f"{'animate-ms @R=' + str(res):>22s}: {ms:.2f}")
    return "\n".join(lines)
