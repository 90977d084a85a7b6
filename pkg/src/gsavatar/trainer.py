"""Self-reenactment training at desk scale.

Per identity a triplane holds the neutral (expression-zero) state; the shared
decoder and motion decoder are trained across identities. Each training pair
reconstructs a neutral source view and animates toward a driving view of the
same identity, instantiating the Gaussians from the respective rendering
viewpoint. Loss: L1 + masked eye/mouth detail L1 + residual-norm sparsity +
a blur-pyramid multi-scale L1 standing in for a perceptual term.
"""

import csv
import os
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .gaussians import DecoderPhi
from .motion import MotionCode, MotionDecoderPsi, animate_features
from .optim import Adam
from .rasterizer import render_image
from .sampler import SamplingConfig, canonical_frontal_camera, instantiate
from .synthia import load_manifest, load_sample
from .triplane import Triplane


def step_rng(seed, step, tag=0):
    return np.random.default_rng([np.uint64(seed), np.uint64(step), np.uint64(tag)])


def psnr(a, b):
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse <= 0:
        return float("inf")
    return -10.0 * np.log10(mse)


def area_downsample(img, factor):
    """Box-filter downsample of an (H, W, C) array by an integer factor."""
    if factor == 1:
        return img
    h, w = img.shape[0] // factor, img.shape[1] // factor
    return img.reshape(h, factor, w, factor, -1).mean(axis=(1, 3)).reshape(
        h, w, *img.shape[2:])


def _pool2_tensor(x):
    h, w = x.shape[0] // 2, x.shape[1] // 2
    return ad.reduce_mean(x.reshape(h, 2, w, 2, 3), axis=(1, 3))


def resolution_schedule(step, cfg):
    """Piecewise-constant doubling from res_start to res_end over the run."""
    stages = []
    r = cfg.res_start
    while r < cfg.res_end:
        stages.append(r)
        r *= 2
    stages.append(cfg.res_end)
    span = max(1, cfg.steps // len(stages))
    idx = min(step // span, len(stages) - 1)
    return stages[idx]


def safe_row_norm(x, eps=1e-12):
    """Per-row L2 norm with a smoothing epsilon so the gradient at 0 is 0."""
    return ad.sqrt((x * x).sum(axis=1) + eps)


def loss(rendered, target, delta_f, cfg, mask_weights=None):
    """Per-term loss and breakdown.

    rendered: (H, W, 3) Tensor. target: (H, W, 3) array at the same resolution.
    mask_weights: (H, W) array of detail-region weights (area-averaged mask).
    delta_f: (N, k) residual Tensor or None for the reconstruction branch.
    """
    if rendered.shape[0] != target.shape[0] or rendered.shape[1] != target.shape[1]:
        raise ValueError(
            f"resolution mismatch: rendered {rendered.shape[:2]} vs target {target.shape[:2]}")
    tgt = Tensor(np.asarray(target, rendered.data.dtype))
    diff = rendered - tgt
    adiff = ad.absolute(diff)
    l1 = adiff.mean()

    if mask_weights is not None and float(mask_weights.sum()) > 0:
        w = Tensor(np.asarray(mask_weights, rendered.data.dtype)[:, :, None])
        detail = (adiff * w).sum() / (3.0 * float(mask_weights.sum()))
    else:
        detail = Tensor(np.zeros((), rendered.data.dtype))

    if delta_f is not None:
        norm_term = safe_row_norm(delta_f).mean()
    else:
        norm_term = Tensor(np.zeros((), rendered.data.dtype))

    # blur pyramid: box-downsampled L1 at 1/2, 1/4 and 1/8 scale
    if cfg.lambda_perc > 0:
        perc_terms = []
        level = diff
        for _ in range(3):
            level = _pool2_tensor(level)
            perc_terms.append(ad.absolute(level).mean())
        perc = (perc_terms[0] + perc_terms[1] + perc_terms[2]) * (1.0 / 3.0)
    else:
        perc = Tensor(np.zeros((), rendered.data.dtype))

    total = (cfg.lambda_l1 * l1 + cfg.lambda_detail * detail
             + cfg.lambda_norm * norm_term + cfg.lambda_perc * perc)
    parts = {
        "l1": float(l1.data), "detail": float(detail.data),
        "norm": float(norm_term.data), "perc": float(perc.data),
    }
    return total, parts


class AvatarModel:
    """Per-identity triplanes plus the shared decoders (and optional encoder)."""

    def __init__(self, n_identities, cfg, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.dtype = dtype
        self.triplanes = [
            Triplane.create(cfg.triplane_resolution, cfg.triplane_channels,
                            cfg.feature_split, init="gaussian", sigma=0.05,
                            rng=rng, dtype=dtype)
            for _ in range(n_identities)
        ]
        basis_channels = cfg.triplane_channels - cfg.feature_split
        self.phi = DecoderPhi(in_dim=cfg.feature_split, hidden=cfg.mlp_hidden,
                              rng=rng, dtype=dtype)
        out_dim = cfg.feature_split if cfg.variant == "feature_space" else 10
        self.psi = MotionDecoderPsi(code_dim=cfg.code_dim, channels=basis_channels,
                                    hidden=cfg.mlp_hidden, out_dim=out_dim,
                                    rng=rng, dtype=dtype)
        self.encoder = (TinyEncoder(cfg.code_dim, cfg.encoder_resolution,
                                    rng=rng, dtype=dtype)
                        if cfg.code_source == "learned_encoder" else None)

    @property
    def n_identities(self):
        return len(self.triplanes)

    def triplane_params(self):
        out = []
        for tp in self.triplanes:
            out.extend(tp.parameters)
        return out

    def mlp_params(self):
        out = list(self.phi.parameters) + list(self.psi.parameters)
        if self.encoder is not None:
            out.extend(self.encoder.parameters)
        return out

    def all_params(self):
        return self.triplane_params() + self.mlp_params()

    def make_optimizer(self):
        return Adam([(self.triplane_params(), self.cfg.lr_triplane),
                     (self.mlp_params(), self.cfg.lr_mlp)])

    def sampling_config(self, jitter=False):
        return SamplingConfig(self.cfg.sample_grid, self.cfg.samples_coarse,
                              self.cfg.samples_fine, jitter=jitter)


class TinyEncoder:
    """Small strided conv stack regressing motion codes from images."""

    def __init__(self, code_dim, resolution=32, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.code_dim = code_dim
        self.resolution = resolution
        def conv(kh, cin, cout):
            k = np.sqrt(2.0 / (kh * kh * cin))
            return Tensor((k * rng.standard_normal((kh, kh, cin, cout))).astype(dtype),
                          requires_grad=True)
        self.k1 = conv(3, 3, 8)
        self.k2 = conv(3, 8, 16)
        self.k3 = conv(3, 16, 16)
        flat = 16 * 9  # 32 -> 15 -> 7 -> 3 spatial
        self.w = Tensor(np.zeros((flat, code_dim), dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(code_dim, dtype=dtype), requires_grad=True)

    @property
    def parameters(self):
        return [self.k1, self.k2, self.k3, self.w, self.b]

    def forward(self, image):
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.shape[0] != self.resolution or x.shape[1] != self.resolution:
            raise ValueError(
                f"encoder expects {self.resolution}x{self.resolution} input, "
                f"got {x.shape[0]}x{x.shape[1]}")
        x = x.reshape(1, *x.shape)
        x = ad.softplus(ad.conv2d(x, self.k1, stride=2))
        x = ad.softplus(ad.conv2d(x, self.k2, stride=2))
        x = ad.softplus(ad.conv2d(x, self.k3, stride=2))
        # normalized features keep the zero-initialized head well conditioned
        flat = ad.layer_normalize(x.reshape(1, self.w.shape[0]))
        return ad.linear(flat, self.w, self.b)


def encode_image(encoder, image):
    """Motion code from an image; zero-initialized head yields the zero code."""
    out = encoder.forward(image)
    return out.reshape(encoder.code_dim)


class PairedDataset:
    """Manifest plus preloaded images/masks, indexed by (id, expr, view)."""

    def __init__(self, dataset_dir, manifest=None):
        self.dir = dataset_dir
        self.manifest = manifest if manifest is not None else load_manifest(dataset_dir)
        self.resolution = self.manifest["resolution"]
        self.n_id = self.manifest["n_id"]
        self.n_expr = self.manifest["n_expr"]
        self.n_views = self.manifest["n_views"]
        self.code_dim = self.manifest["code_dim"]
        self.samples = {}
        for entry in self.manifest["samples"]:
            key = (entry["id"], entry["expr_index"], entry["view_index"])
            self.samples[key] = load_sample(dataset_dir, entry, self.resolution)

    def get(self, identity, expr, view):
        return self.samples[(identity, expr, view)]

    def train_views(self, cfg):
        if cfg.holdout_view == -2 or self.n_views == 1:
            return list(range(self.n_views))
        hv = cfg.holdout_view if cfg.holdout_view >= 0 else self.n_views - 1
        return [v for v in range(self.n_views) if v != hv]

    def holdout_views(self, cfg):
        return [v for v in range(self.n_views) if v not in self.train_views(cfg)]


def _target_at(sample, res):
    factor = sample.resolution // res
    img = area_downsample(sample.image.color.astype(np.float64), factor)
    union = (sample.masks["eyes"] | sample.masks["mouth"]).astype(np.float64)
    mask = area_downsample(union[:, :, None], factor)[:, :, 0]
    return img, mask


def _codes_for(model, sample, cfg):
    if cfg.code_source == "learned_encoder" and model.encoder is not None:
        small = area_downsample(sample.image.color,
                                sample.resolution // cfg.encoder_resolution)
        return encode_image(model.encoder, small.astype(model.dtype))
    return MotionCode.from_expression(sample.e, cfg.code_dim)


def _animate_branch(model, f, m, anchors, code_src, code_drv):
    cfg = model.cfg
    if cfg.variant == "feature_space":
        gset, delta = animate_features(model.phi, model.psi, f, m, anchors,
                                       code_src, code_drv)
        return gset, delta
    from .motion import modulate, residual
    from .gaussians import decode

    m_tilde = modulate(model.psi, m, code_src, code_drv)
    d = residual(model.psi, m_tilde)
    base = decode(model.phi, f, anchors)
    mu = base.mu + d[:, 0:3]
    s = base.s * ad.exp(ad.clip(d[:, 3:6], -8.0, 8.0))
    from .motion import _quat_mul_tensor

    dq = ad.concat([d[:, 6:7] + 1.0, d[:, 7:10]], axis=1)
    qc = _quat_mul_tensor(dq, base.q)
    q = qc / ad.sqrt((qc * qc).sum(axis=1, keepdims=True))
    from .gaussians import GaussianSet

    return GaussianSet(mu, s, q, base.o, base.c, anchor=base.anchor), d


def train_step(model, optimizer, dataset, pairs, cfg, step):
    """One optimizer step over a batch of (source, driving) same-identity pairs."""
    t0 = time.perf_counter()
    res = resolution_schedule(step, cfg)
    scfg = model.sampling_config(jitter=not cfg.deterministic)
    rng = step_rng(cfg.seed, step, tag=1) if not cfg.deterministic else None
    optimizer.zero_grad()
    agg = {"l1": 0.0, "detail": 0.0, "norm": 0.0, "perc": 0.0, "same_code": 0.0}
    with Tape() as tape:
        total = None
        for src, drv in pairs:
            tp = model.triplanes[src.identity_id]
            # reconstruction branch, instantiated from the source viewpoint
            gset_s, parts_s = instantiate(tp, model.phi, src.camera, scfg,
                                          rng=rng, return_parts=True)
            img_s = render_image(gset_s, src.camera, res, background=cfg.background)
            tgt_s, mask_s = _target_at(src, res)
            loss_s, breakdown_s = loss(img_s, tgt_s, None, cfg, mask_s)

            # animation branch, instantiated from the driving viewpoint
            gset_d, parts_d = instantiate(tp, model.phi, drv.camera, scfg,
                                          rng=rng, return_parts=True)
            code_src = _codes_for(model, src, cfg)
            code_drv = _codes_for(model, drv, cfg)
            anim, delta = _animate_branch(model, parts_d["features"], gset_d.basis,
                                          gset_d.anchor, code_src, code_drv)
            img_d = render_image(anim, drv.camera, res, background=cfg.background)
            tgt_d, mask_d = _target_at(drv, res)
            loss_d, breakdown_d = loss(img_d, tgt_d, delta, cfg, mask_d)

            pair_loss = loss_s + loss_d
            if cfg.lambda_same_code > 0 and cfg.variant == "feature_space":
                # equal-code residuals are pushed to zero for arbitrary codes,
                # not only the codes the pair sampler happens to draw; bases
                # and features are detached so only psi absorbs this term
                crng = step_rng(cfg.seed, step, tag=2)
                c = MotionCode(crng.uniform(-1, 1, cfg.code_dim).astype(np.float32))
                from .motion import modulate, residual

                rows = gset_d.basis.data
                sub = rows[crng.integers(0, rows.shape[0], 1024)]
                m_t = modulate(model.psi, Tensor(sub), c, c)
                same = safe_row_norm(residual(model.psi, m_t)).mean()
                pair_loss = pair_loss + cfg.lambda_same_code * same
                agg["same_code"] += float(same.data)
            if cfg.code_source == "learned_encoder":
                for smp, code in ((src, code_src), (drv, code_drv)):
                    ref = Tensor(MotionCode.from_expression(smp.e, cfg.code_dim).values)
                    reg = ((code - ref) * (code - ref)).mean()
                    pair_loss = pair_loss + reg

            total = pair_loss if total is None else total + pair_loss
            for k in ("l1", "detail", "perc"):
                agg[k] += breakdown_s[k] + breakdown_d[k]
            agg["norm"] += breakdown_d["norm"]
        total = total * (1.0 / len(pairs))
        if not np.isfinite(total.data):
            raise ArithmeticError(f"non-finite loss at step {step}: {agg}")
        tape.backward(total)
    optimizer.step()
    n = len(pairs)
    metrics = {"step": step, "resolution": res,
               "loss": float(total.data),
               "l1": agg["l1"] / (2 * n), "detail": agg["detail"] / (2 * n),
               "norm": agg["norm"] / n, "perc": agg["perc"] / (2 * n),
               "same_code": agg["same_code"] / n,
               "wall": time.perf_counter() - t0}
    return metrics


def sample_pairs(dataset, cfg, step):
    """Deterministic batch of same-identity (neutral source, any driving) pairs."""
    rng = step_rng(cfg.seed, step, tag=0)
    views = dataset.train_views(cfg)
    pairs = []
    for _ in range(cfg.batch_size):
        i = int(rng.integers(dataset.n_id))
        sv = views[int(rng.integers(len(views)))]
        de = int(rng.integers(dataset.n_expr))
        dv = views[int(rng.integers(len(views)))]
        pairs.append((dataset.get(i, 0, sv), dataset.get(i, de, dv)))
    return pairs


def evaluate_psnr(model, dataset, cfg, views, max_samples=32):
    """Render held-out or training views from fixed-frontal avatars and
    compare against ground truth at the native dataset resolution."""
    from .motion import AvatarState, animate

    res = dataset.resolution
    scfg = model.sampling_config(jitter=False)
    cam0 = canonical_frontal_camera()
    values = []
    with ad.no_grad():
        per_id = {}
        for i in range(dataset.n_id):
            gset, parts = instantiate(model.triplanes[i], model.phi, cam0, scfg,
                                      return_parts=True)
            per_id[i] = AvatarState(gset.anchor.data, parts["features"].data,
                                    gset.basis.data, model.phi, cam0)
        keys = [(i, e, v) for i in range(dataset.n_id)
                for e in range(dataset.n_expr) for v in views]
        if len(keys) > max_samples:
            sel = np.linspace(0, len(keys) - 1, max_samples).astype(int)
            keys = [keys[k] for k in sel]
        for (i, e, v) in keys:
            smp = dataset.get(i, e, v)
            avatar = per_id[i]
            if cfg.variant == "feature_space":
                zero = MotionCode.zeros(cfg.code_dim)
                code = MotionCode.from_expression(smp.e, cfg.code_dim)
                gset = animate(avatar, model.psi, zero, code)
            else:
                from .motion import animate_spatial

                zero = MotionCode.zeros(cfg.code_dim)
                code = MotionCode.from_expression(smp.e, cfg.code_dim)
                gset = animate_spatial(avatar, model.psi, zero, code)
            img = render_image(gset.detached(), smp.camera, res,
                               background=cfg.background)
            values.append(psnr(img.data, smp.image.color))
    return float(np.mean(values))


def fit(model, dataset, cfg, out_dir=None, log_cb=None):
    """Full training loop with CSV metrics and periodic checkpoints."""
    from . import avatar_io

    optimizer = model.make_optimizer()
    return fit_with_optimizer(model, optimizer, dataset, cfg, start_step=0,
                              out_dir=out_dir, log_cb=log_cb)


def fit_with_optimizer(model, optimizer, dataset, cfg, start_step=0,
                       out_dir=None, log_cb=None):
    from . import avatar_io

    csv_file = None
    writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "metrics.csv")
        new = not (start_step and os.path.exists(csv_path))
        csv_file = open(csv_path, "w" if new else "a", newline="")
        writer = csv.writer(csv_file)
        if new:
            writer.writerow(["step", "resolution", "loss", "l1", "detail",
                             "norm", "perc", "same_code", "psnr_holdout", "wall"])
    history = []
    t_start = time.perf_counter()
    try:
        for step in range(start_step, cfg.steps):
            pairs = sample_pairs(dataset, cfg, step)
            metrics = train_step(model, optimizer, dataset, pairs, cfg, step)
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                hv = dataset.holdout_views(cfg)
                metrics["psnr_holdout"] = (
                    evaluate_psnr(model, dataset, cfg, hv) if hv else float("nan"))
            history.append(metrics)
            if writer:
                writer.writerow([metrics.get(k, "") for k in
                                 ["step", "resolution", "loss", "l1", "detail",
                                  "norm", "perc", "same_code", "psnr_holdout",
                                  "wall"]])
                csv_file.flush()
            if log_cb:
                log_cb(metrics)
            if out_dir and cfg.checkpoint_every and \
                    (step + 1) % cfg.checkpoint_every == 0:
                avatar_io.save_checkpoint(
                    os.path.join(out_dir, f"ckpt_{step + 1:06d}.sck"),
                    model, optimizer, step + 1)
    finally:
        if csv_file:
            csv_file.close()

    report = {"steps": cfg.steps, "wall_time": time.perf_counter() - t_start}
    train_v = dataset.train_views(cfg)
    hold_v = dataset.holdout_views(cfg)
    report["psnr_train"] = evaluate_psnr(model, dataset, cfg, train_v)
    report["psnr_holdout"] = (evaluate_psnr(model, dataset, cfg, hold_v)
                              if hold_v else float("nan"))
    if out_dir:
        avatar_io.save_checkpoint(os.path.join(out_dir, "ckpt_final.sck"),
                                  model, optimizer, cfg.steps)
    return report


def train_encoder(model, dataset, cfg, steps=300, lr=1e-3, holdout_keys=()):
    """Standalone regression of ground-truth codes from images."""
    if model.encoder is None:
        model.encoder = TinyEncoder(cfg.code_dim, cfg.encoder_resolution,
                                    rng=np.random.default_rng(cfg.seed + 7),
                                    dtype=model.dtype)
    enc = model.encoder
    opt = Adam(list(enc.parameters), lr=lr)
    keys = [k for k in dataset.samples.keys() if k not in set(holdout_keys)]
    for step in range(steps):
        rng = step_rng(cfg.seed, step, tag=3)
        k = keys[int(rng.integers(len(keys)))]
        smp = dataset.samples[k]
        small = area_downsample(smp.image.color,
                                smp.resolution // cfg.encoder_resolution)
        ref = Tensor(MotionCode.from_expression(smp.e, cfg.code_dim).values)
        opt.zero_grad()
        with Tape() as tape:
            code = encode_image(enc, small.astype(model.dtype))
            err = ((code - ref) * (code - ref)).mean()
        tape.backward(err)
        opt.step()
    return enc
