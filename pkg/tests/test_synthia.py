import json
import os

import numpy as np
import pytest

from gsavatar.synthia import (LABEL_EYE_L, LABEL_EYE_R, LABEL_MOUTH,
                              LABEL_SHELL, POS_LIMIT, build_dataset, deform,
                              expression_for, load_manifest, load_sample,
                              render_sample, sample_camera, sample_identity)


def test_same_seed_same_identity():
    a = sample_identity("s1")
    b = sample_identity("s1")
    np.testing.assert_array_equal(a.base.mu, b.base.mu)
    np.testing.assert_array_equal(a.blend_mu, b.blend_mu)


def test_different_seeds_differ():
    a = sample_identity("s1")
    b = sample_identity("s2")
    assert a.base.count != b.base.count or not np.array_equal(a.base.mu, b.base.mu)


def test_identity_structure():
    ident = sample_identity("s3")
    assert 200 <= ident.count <= 800
    labels = set(np.unique(ident.labels))
    assert labels == {LABEL_SHELL, LABEL_EYE_L, LABEL_EYE_R, LABEL_MOUTH}
    ident.base.validate()


def test_range_invariants_on_hypercube_corners():
    # linear blend: per-coordinate extremes over the corner set e in {-1,1}^k
    # equal base +- sum_k |delta_k|, so the interval check is the exhaustive
    # corner check
    for i in range(400):
        ident = sample_identity(f"corner{i}")
        worst_mu = np.abs(ident.base.mu) + np.abs(ident.blend_mu).sum(axis=0)
        assert worst_mu.max() <= POS_LIMIT + 1e-6
        worst_c_hi = ident.base.c + np.abs(ident.blend_color).sum(axis=0)
        worst_c_lo = ident.base.c - np.abs(ident.blend_color).sum(axis=0)
        assert worst_c_hi.max() <= 1.0 + 1e-6
        assert worst_c_lo.min() >= -1e-6
        total_logs = np.abs(ident.blend_logs).sum(axis=0)
        assert np.all(np.isfinite(total_logs))


def test_deform_zero_is_base():
    ident = sample_identity("s4")
    out = deform(ident, np.zeros(ident.expr_dim))
    np.testing.assert_array_equal(out.mu, ident.base.mu)
    np.testing.assert_array_equal(out.s, ident.base.s)
    np.testing.assert_array_equal(out.c, ident.base.c)


def test_deform_linearity_in_position():
    ident = sample_identity("s5")
    e = np.zeros(ident.expr_dim)
    e[2] = 0.5
    a = deform(ident, e)
    e2 = np.zeros(ident.expr_dim)
    e2[2] = 1.0
    b = deform(ident, e2)
    np.testing.assert_allclose(b.mu - ident.base.mu,
                               2.0 * (a.mu - ident.base.mu), atol=1e-5)


def test_deform_unit_vector_matches_column():
    ident = sample_identity("s6")
    j = 1
    e = np.zeros(ident.expr_dim)
    e[j] = 1.0
    out = deform(ident, e)
    np.testing.assert_allclose(out.mu, ident.base.mu + ident.blend_mu[j],
                               atol=1e-5)
    np.testing.assert_allclose(out.c, ident.base.c + ident.blend_color[j],
                               atol=1e-5)
    np.testing.assert_allclose(out.s, ident.base.s * np.exp(ident.blend_logs[j]),
                               rtol=1e-5)


def test_deform_rejects_out_of_range():
    ident = sample_identity("s7")
    e = np.zeros(ident.expr_dim)
    e[0] = 1.5
    with pytest.raises(ValueError):
        deform(ident, e)


def test_render_sample_masks_and_code():
    ident = sample_identity("s8")
    rng = np.random.default_rng(0)
    cam = sample_camera(rng)
    e = expression_for(3, 0, 1)
    smp = render_sample(ident, e, cam, resolution=48, code_dim=16)
    assert smp.image.color.shape == (48, 48, 3)
    assert smp.masks["eyes"].sum() > 0
    assert smp.masks["mouth"].sum() > 0
    np.testing.assert_allclose(smp.code.values[:8], e, atol=1e-6)
    assert np.all(smp.code.values[8:] == 0)


def test_same_expression_same_gaussians_across_views():
    ident = sample_identity("s9")
    e = expression_for(5, 0, 2)
    rng = np.random.default_rng(1)
    a = render_sample(ident, e, sample_camera(rng), resolution=32)
    b = render_sample(ident, e, sample_camera(rng), resolution=32)
    np.testing.assert_array_equal(a.e, b.e)
    ga = deform(ident, a.e)
    gb = deform(ident, b.e)
    np.testing.assert_array_equal(ga.mu, gb.mu)


def test_build_dataset_counts_and_roundtrip(tmp_path):
    out = str(tmp_path / "ds")
    manifest = build_dataset(out, n_id=2, n_expr=3, n_views=2, seed=5,
                             resolution=32)
    assert len(manifest["samples"]) == 2 * 3 * 2
    # expression 0 is always neutral
    for entry in manifest["samples"]:
        if entry["expr_index"] == 0:
            assert all(v == 0.0 for v in entry["e"])
    # manifest round-trips
    loaded = load_manifest(out)
    assert loaded == json.loads(json.dumps(manifest))
    smp = load_sample(out, loaded["samples"][3], 32)
    assert smp.image.color.shape == (32, 32, 3)
    assert smp.code.dim == loaded["code_dim"]


def test_build_dataset_deterministic(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    ma = build_dataset(a, n_id=1, n_expr=2, n_views=2, seed=9, resolution=24)
    mb = build_dataset(b, n_id=1, n_expr=2, n_views=2, seed=9, resolution=24)
    assert json.dumps(ma, sort_keys=True) == json.dumps(mb, sort_keys=True)
    for entry in ma["samples"]:
        pa = open(os.path.join(a, entry["raw"]), "rb").read()
        pb = open(os.path.join(b, entry["raw"]), "rb").read()
        assert pa == pb
        ia = open(os.path.join(a, entry["image"]), "rb").read()
        ib = open(os.path.join(b, entry["image"]), "rb").read()
        assert ia == ib


def test_build_dataset_rejects_bad_counts(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(str(tmp_path / "x"), n_id=0, n_expr=1, n_views=1, seed=1)


def test_camera_distribution_within_ranges():
    rng = np.random.default_rng(2)
    for _ in range(50):
        cam = sample_camera(rng)
        pos = cam.position
        # distance preserved
        assert abs(np.linalg.norm(pos) - 2.7) < 1e-9
