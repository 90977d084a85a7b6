import os

import numpy as np
import pytest

from gsavatar import autodiff as ad
from gsavatar.autodiff import Tape, Tensor
from gsavatar.config import RunConfig
from gsavatar.gradcheck import finite_diff_check
from gsavatar.synthia import build_dataset
from gsavatar.trainer import (AvatarModel, PairedDataset, TinyEncoder,
                              area_downsample, encode_image, evaluate_psnr,
                              fit, loss, psnr, resolution_schedule,
                              sample_pairs, train_encoder, train_step)

MICRO = dict(triplane_resolution=16, triplane_channels=6, feature_split=3,
             code_dim=8, mlp_hidden=8, sample_grid=8, samples_coarse=3,
             samples_fine=3, batch_size=1, res_start=16, res_end=16,
             eval_every=0, checkpoint_every=0)


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("ds"))
    build_dataset(d, n_id=2, n_expr=3, n_views=2, seed=21, resolution=32)
    return PairedDataset(d)


def cfg_micro(**kw):
    base = dict(MICRO)
    base.update(kw)
    return RunConfig(**base)


# -- loss ---------------------------------------------------------------------

def test_loss_zero_at_perfect_reconstruction():
    cfg = cfg_micro()
    img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3)).astype(np.float32)
    delta = Tensor(np.zeros((5, 3), np.float32))
    total, parts = loss(Tensor(img.copy()), img, delta, cfg,
                        np.zeros((16, 16)))
    assert float(total.data) < 1e-6
    assert all(v < 2e-6 for v in parts.values())


def test_loss_uniform_diff_closed_form():
    cfg = cfg_micro(lambda_perc=0.0)
    target = np.zeros((16, 16, 3))
    rendered = Tensor(np.full((16, 16, 3), 0.25, np.float32))
    total, parts = loss(rendered, target, None, cfg, np.zeros((16, 16)))
    assert abs(float(total.data) - cfg.lambda_l1 * 0.25) < 1e-7
    assert parts["detail"] == 0.0


def test_loss_hand_computed_masked_case():
    # 4x4 зimage is not divisible by 8, so pyramid off; one masked pixel
    cfg = cfg_micro(lambda_perc=0.0, lambda_l1=1.0, lambda_detail=0.1,
                    lambda_norm=0.001)
    rendered = np.zeros((4, 4, 3), np.float32)
    rendered[1, 2] = (0.5, 0.25, 0.0)
    target = np.zeros((4, 4, 3))
    mask = np.zeros((4, 4))
    mask[1, 2] = 1.0
    delta = Tensor(np.array([[3.0, 4.0]], np.float32))  # row norm 5
    total, parts = loss(Tensor(rendered), target, delta, cfg, mask)
    l1 = 0.75 / 48.0
    detail = 0.75 / 3.0
    expect = 1.0 * l1 + 0.1 * detail + 0.001 * 5.0
    assert abs(float(total.data) - expect) < 1e-6


def test_loss_resolution_mismatch():
    cfg = cfg_micro()
    with pytest.raises(ValueError, match="mismatch"):
        loss(Tensor(np.zeros((8, 8, 3), np.float32)), np.zeros((16, 16, 3)),
             None, cfg, None)


def test_loss_nonnegative_weights_validated():
    with pytest.raises(ValueError):
        cfg_micro(lambda_norm=-0.1)


# -- schedule -------------------------------------------------------------------

def test_resolution_schedule_endpoints_and_monotone():
    cfg = cfg_micro(res_start=32, res_end=128, steps=900)
    rs = [resolution_schedule(s, cfg) for s in range(900)]
    assert rs[0] == 32
    assert rs[-1] == 128
    assert all(b >= a for a, b in zip(rs, rs[1:]))
    assert set(rs) == {32, 64, 128}


def test_resolution_schedule_flat():
    cfg = cfg_micro(res_start=64, res_end=64, steps=10)
    assert resolution_schedule(0, cfg) == 64
    assert resolution_schedule(9, cfg) == 64


# -- pairs ---------------------------------------------------------------------

def test_sample_pairs_structure(micro_dataset):
    cfg = cfg_micro(batch_size=16, holdout_view=-1)
    pairs = sample_pairs(micro_dataset, cfg, step=3)
    assert len(pairs) == 16
    for src, drv in pairs:
        assert src.identity_id == drv.identity_id
        assert np.all(src.e == 0)  # source is always the neutral expression
        # held-out view (last) never drawn
        assert src.camera is not None


def test_sample_pairs_deterministic(micro_dataset):
    cfg = cfg_micro()
    a = sample_pairs(micro_dataset, cfg, step=5)
    b = sample_pairs(micro_dataset, cfg, step=5)
    for (s1, d1), (s2, d2) in zip(a, b):
        assert s1 is s2 and d1 is d2


def test_same_expression_ratio(micro_dataset):
    cfg = cfg_micro(batch_size=4)
    same = total = 0
    for step in range(200):
        for src, drv in sample_pairs(micro_dataset, cfg, step):
            total += 1
            same += int(np.array_equal(src.e, drv.e))
    # driving expression uniform over n_expr=3: same-expression ratio ~ 1/3
    assert abs(same / total - 1 / 3) < 0.06


# -- train step -----------------------------------------------------------------

def test_identity_at_init_branches_agree(micro_dataset):
    # zero-initialized psi + same-expression pair at the same camera: the
    # animation branch renders exactly the reconstruction image
    from gsavatar.motion import animate_features
    from gsavatar.rasterizer import render_image
    from gsavatar.sampler import instantiate

    cfg = cfg_micro()
    model = AvatarModel(micro_dataset.n_id, cfg)
    smp = micro_dataset.get(0, 0, 0)
    scfg = model.sampling_config()
    gset, parts = instantiate(model.triplanes[0], model.phi, smp.camera, scfg,
                              return_parts=True)
    recon = render_image(gset, smp.camera, 16)
    anim_set, delta = animate_features(model.phi, model.psi, parts["features"],
                                       gset.basis, gset.anchor,
                                       np.zeros(8, np.float32),
                                       np.zeros(8, np.float32))
    anim = render_image(anim_set, smp.camera, 16)
    assert np.array_equal(delta.data, np.zeros_like(delta.data))
    assert recon.data.tobytes() == anim.data.tobytes()


def test_train_step_metrics_contract(micro_dataset):
    cfg = cfg_micro()
    model = AvatarModel(micro_dataset.n_id, cfg)
    opt = model.make_optimizer()
    met = train_step(model, opt, micro_dataset, sample_pairs(micro_dataset, cfg, 0),
                     cfg, 0)
    for key in ("l1", "detail", "norm", "perc", "loss", "wall", "resolution"):
        assert key in met
    assert np.isfinite(met["loss"])


def test_single_pair_overfit_l1_decreases(micro_dataset):
    cfg = cfg_micro(steps=160, lr_triplane=1e-2, lr_mlp=1e-3,
                    lambda_same_code=0.0)
    model = AvatarModel(micro_dataset.n_id, cfg)
    opt = model.make_optimizer()
    pair = [(micro_dataset.get(0, 0, 0), micro_dataset.get(0, 1, 0))]
    l1s = []
    for step in range(cfg.steps):
        met = train_step(model, opt, micro_dataset, pair, cfg, step)
        l1s.append(met["l1"])
    w = 40
    means = [np.mean(l1s[i:i + w]) for i in range(0, cfg.steps, w)]
    assert all(b < a for a, b in zip(means, means[1:])), means
    assert means[-1] < 0.5 * means[0]


def test_nonfinite_loss_aborts(micro_dataset):
    cfg = cfg_micro()
    model = AvatarModel(micro_dataset.n_id, cfg)
    model.phi.w1.data[0, 0] = np.inf
    opt = model.make_optimizer()
    with pytest.raises(ArithmeticError):
        train_step(model, opt, micro_dataset,
                   sample_pairs(micro_dataset, cfg, 0), cfg, 0)


def test_spatial_variant_runs_end_to_end(micro_dataset):
    cfg = cfg_micro(variant="spatial_deformation", steps=2)
    model = AvatarModel(micro_dataset.n_id, cfg)
    opt = model.make_optimizer()
    met = train_step(model, opt, micro_dataset,
                     sample_pairs(micro_dataset, cfg, 0), cfg, 0)
    assert np.isfinite(met["loss"])


def test_full_objective_gradient_matches_fd(micro_dataset):
    # micro configuration in float64: triplane + phi + psi through both
    # branches, probed at strided coordinates. The fine pass is off because
    # resampled depths are detached by design (finite differences would see
    # them); the scene is 12 broad mid-opacity splats so no compositing
    # cutoff boundary sits within a probe step.
    cfg = cfg_micro(lambda_same_code=0.0, sample_grid=2, samples_coarse=3,
                    samples_fine=0)
    model = AvatarModel(micro_dataset.n_id, cfg, dtype=np.float64)
    model.phi.scale_bias = 2.0
    model.phi.scale_max = 1.2
    src = micro_dataset.get(0, 0, 0)
    drv = micro_dataset.get(0, 1, 1)
    from gsavatar.motion import animate_features
    from gsavatar.rasterizer import render_image
    from gsavatar.sampler import instantiate
    from gsavatar.trainer import _target_at

    scfg = model.sampling_config()

    def objective():
        tp = model.triplanes[0]
        gset_s, _ = instantiate(tp, model.phi, src.camera, scfg,
                                return_parts=True)
        img_s = render_image(gset_s, src.camera, 16)
        tgt_s, mask_s = _target_at(src, 16)
        ls, _ = loss(img_s, tgt_s, None, cfg, mask_s)
        gset_d, parts = instantiate(tp, model.phi, drv.camera, scfg,
                                    return_parts=True)
        anim, delta = animate_features(model.phi, model.psi,
                                       parts["features"], gset_d.basis,
                                       gset_d.anchor, np.zeros(8), np.ones(8))
        img_d = render_image(anim, drv.camera, 16)
        tgt_d, mask_d = _target_at(drv, 16)
        ld, _ = loss(img_d, tgt_d, delta, cfg, mask_d)
        return ls + ld

    # exercise a live motion head
    model.psi.w2.data = 0.1 * np.random.default_rng(3).standard_normal(
        model.psi.w2.data.shape)
    params = (model.triplanes[0].parameters + model.phi.parameters
              + model.psi.parameters)
    res = finite_diff_check(objective, params, eps=1e-5, max_coords=24)
    assert res.max_rel_err < 1e-4, res


# -- determinism / fit ------------------------------------------------------------

def test_fit_deterministic_same_seed(micro_dataset, tmp_path):
    reports = []
    finals = []
    for run in range(2):
        cfg = cfg_micro(steps=6, deterministic=True, seed=13, eval_every=0)
        model = AvatarModel(micro_dataset.n_id, cfg)
        opt = model.make_optimizer()
        last = None
        for step in range(cfg.steps):
            last = train_step(model, opt, micro_dataset,
                              sample_pairs(micro_dataset, cfg, step), cfg, step)
        finals.append(last["loss"])
    assert abs(finals[0] - finals[1]) < 1e-6


def test_fit_writes_metrics_and_checkpoints(micro_dataset, tmp_path):
    out = str(tmp_path / "run")
    cfg = cfg_micro(steps=4, checkpoint_every=2, eval_every=2)
    model = AvatarModel(micro_dataset.n_id, cfg)
    report = fit(model, micro_dataset, cfg, out_dir=out)
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    assert os.path.exists(os.path.join(out, "ckpt_000002.sck"))
    assert os.path.exists(os.path.join(out, "ckpt_final.sck"))
    header = open(os.path.join(out, "metrics.csv")).readline()
    for col in ("l1", "detail", "norm", "perc", "psnr_holdout", "wall"):
        assert col in header
    assert "psnr_train" in report and np.isfinite(report["psnr_train"])


# -- encoder ---------------------------------------------------------------------

def test_encoder_zero_init_gives_zero_code():
    enc = TinyEncoder(4, resolution=32, rng=np.random.default_rng(0))
    img = np.random.default_rng(1).uniform(0, 1, (32, 32, 3)).astype(np.float32)
    code = encode_image(enc, img)
    np.testing.assert_array_equal(code.data, 0.0)


def test_encoder_wrong_resolution():
    enc = TinyEncoder(4, resolution=32)
    with pytest.raises(ValueError, match="32"):
        encode_image(enc, np.zeros((16, 16, 3), np.float32))


def test_encoder_deterministic():
    enc = TinyEncoder(4, resolution=32, rng=np.random.default_rng(2))
    enc.w.data[:] = np.random.default_rng(3).standard_normal(enc.w.data.shape)
    img = np.random.default_rng(4).uniform(0, 1, (32, 32, 3)).astype(np.float32)
    a = encode_image(enc, img).data
    b = encode_image(enc, img).data
    assert np.array_equal(a, b)


def test_encoder_regression_learns(micro_dataset):
    # the strict held-out bound (0.05 var) needs the full desk dataset's pose
    # coverage and lives in the acceptance module; this checks learning works
    from gsavatar.motion import MotionCode

    cfg = cfg_micro(code_dim=8, encoder_resolution=32)
    model = AvatarModel(micro_dataset.n_id, cfg)
    hold = [(0, 1, 1), (1, 2, 1)]
    enc = train_encoder(model, micro_dataset, cfg, steps=2000, lr=3e-3,
                        holdout_keys=hold)
    errs = []
    refs = []
    for key, smp in micro_dataset.samples.items():
        if key in hold:
            continue
        code = encode_image(enc, smp.image.color.astype(np.float32)).data
        ref = MotionCode.from_expression(smp.e, 8).values
        errs.append(np.mean((code - ref) ** 2))
        refs.append(ref)
    evar = np.var(np.stack(refs))
    assert np.mean(errs) < 0.05 * max(evar, 1e-3)


def test_psnr_and_downsample_helpers():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.1)
    assert abs(psnr(a, b) - 20.0) < 1e-9
    img = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    down = area_downsample(img, 2)
    assert down.shape == (2, 2, 1)
    assert down[0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
