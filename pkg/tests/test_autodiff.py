import numpy as np
import pytest

from gsavatar import autodiff as ad
from gsavatar.autodiff import Tape, Tensor
from gsavatar.gradcheck import finite_diff_check
from gsavatar.optim import Adam, adam_step


def t64(x, rg=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


def rand64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# -- forward values ----------------------------------------------------------

def test_matmul_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 3)))
    eye = Tensor(np.eye(3))
    np.testing.assert_allclose((eye @ x).data, x.data, rtol=1e-6)


def test_matmul_hand():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    np.testing.assert_allclose((a @ b).data, [[3.0], [7.0]])


def test_matmul_shape_error_names_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ad.ShapeError, match=r"2, 3.*4, 5"):
        a @ b


def test_activation_values():
    z = Tensor([0.0])
    assert abs(ad.softplus(z).item() - np.log(2.0)) < 1e-6
    assert abs(ad.sigmoid(z).item() - 0.5) < 1e-7
    assert abs(ad.tanh(z).item()) < 1e-7
    # softplus saturates without overflow at both tails
    big = Tensor([500.0, -500.0])
    out = ad.softplus(big).data
    assert np.isfinite(out).all()
    assert abs(out[0] - 500.0) < 1e-5 and out[1] >= 0.0


def test_activation_unknown_kind():
    with pytest.raises(ValueError, match="relu6"):
        ad.activation(Tensor([0.0]), "relu6")


def test_softplus_derivative_at_zero():
    x = t64([0.0])
    with Tape() as tape:
        y = ad.softplus(x).sum()
    tape.backward(y)
    assert abs(x.grad[0] - 0.5) < 1e-12


# -- backward basics ---------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t64(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, np.ones((2, 3)))


def test_backward_half_square_gives_x():
    rng = np.random.default_rng(1)
    x = rand64(rng, 4, 3)
    with Tape() as tape:
        loss = (x * x).sum() * 0.5
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-12)


def test_backward_rejects_nonscalar():
    x = t64(np.ones((2, 2)))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.ShapeError):
        tape.backward(y)


def test_backward_accumulates_across_calls():
    x = t64([1.0, 2.0])
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    g1 = x.grad.copy()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * g1)


def test_backward_linearity_of_sum_of_losses():
    rng = np.random.default_rng(2)
    x = rand64(rng, 5)
    with Tape() as tape:
        la = (x * x).sum()
        lb = ad.softplus(x).sum()
        tot = la + lb
    tape.backward(tot)
    g_joint = x.grad.copy()

    x.grad = None
    with Tape() as tape:
        la = (x * x).sum()
    tape.backward(la)
    ga = x.grad.copy()
    x.grad = None
    with Tape() as tape:
        lb = ad.softplus(x).sum()
    tape.backward(lb)
    gb = x.grad.copy()
    np.testing.assert_allclose(g_joint, ga + gb, rtol=1e-12)


def test_no_grad_suppresses_recording():
    x = t64([1.0, 2.0])
    with Tape() as tape:
        with ad.no_grad():
            y = x * 3.0
        assert not y._tracked
        loss = (x * x).sum()
    tape.backward(loss)
    assert x.grad is not None


# -- finite-difference oracle over every primitive ---------------------------

def test_fd_linear_is_machine_exact():
    rng = np.random.default_rng(3)
    w = Tensor(rng.standard_normal(7))
    x = rand64(rng, 7)
    res = finite_diff_check(lambda: (x * Tensor(w.data)).sum(), [x], eps=1e-5)
    assert res.max_rel_err < 1e-8, res


def test_fd_matmul():
    rng = np.random.default_rng(4)
    a = rand64(rng, 4, 5)
    b = rand64(rng, 5, 3)
    res = finite_diff_check(lambda: (a @ b).sum(), [a, b], eps=1e-5)
    assert res.max_rel_err < 1e-6, res


@pytest.mark.parametrize("kind", ["softplus", "sigmoid", "tanh", "exp"])
def test_fd_activations(kind):
    # exp needs a moderate range: e^20 swamps the finite-difference probes
    xs = [-3.0, -1.3, 0.0, 0.7, 3.0] if kind == "exp" else [-20.0, -1.3, 0.0, 0.7, 20.0]
    x = t64(xs)
    w = Tensor(np.array([0.3, -1.1, 0.7, 0.2, 0.5]))
    res = finite_diff_check(
        lambda: (ad.activation(x, kind) * w).sum(), [x], eps=1e-6
    )
    assert res.max_rel_err < 1e-6, res


def test_fd_softplus_chain():
    rng = np.random.default_rng(5)
    x = rand64(rng, 6)
    w = rand64(rng, 6)
    res = finite_diff_check(
        lambda: (ad.softplus(x * w) * x).sum(), [x, w], eps=1e-6
    )
    assert res.max_rel_err < 1e-6, res


def test_fd_reduce_concat_reshape():
    rng = np.random.default_rng(6)
    a = rand64(rng, 3, 4)
    b = rand64(rng, 2, 4)

    def f():
        c = ad.concat([a, b], axis=0)
        m = c.mean(axis=0)
        return (m * m).sum() + c.reshape(20).sum()

    res = finite_diff_check(f, [a, b], eps=1e-5)
    assert res.max_rel_err < 1e-6, res


def test_fd_div_pow_sqrt_abs_log():
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(0.5, 2.0, 8), requires_grad=True)
    y = Tensor(rng.uniform(0.5, 2.0, 8), requires_grad=True)

    def f():
        return (x / y + x ** 3.0 + ad.sqrt(x) + ad.absolute(y) + ad.log(x)).sum()

    res = finite_diff_check(f, [x, y], eps=1e-5)
    assert res.max_rel_err < 1e-6, res


def test_fd_broadcast_add_mul():
    rng = np.random.default_rng(8)
    a = rand64(rng, 4, 3)
    bias = rand64(rng, 3)

    def f():
        return ((a + bias) * bias).sum()

    res = finite_diff_check(f, [a, bias], eps=1e-5)
    assert res.max_rel_err < 1e-6, res


def test_layer_normalize_constant_rows_are_zero():
    x = Tensor(np.full((5, 8), 3.7))
    out = ad.layer_normalize(x)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-5)


def test_fd_layer_normalize():
    rng = np.random.default_rng(9)
    x = rand64(rng, 4, 6)
    w = Tensor(rng.standard_normal((4, 6)))
    res = finite_diff_check(
        lambda: (ad.layer_normalize(x) * w).sum(), [x], eps=1e-6
    )
    assert res.max_rel_err < 1e-6, res


def test_fd_take_slicing():
    rng = np.random.default_rng(10)
    x = rand64(rng, 5, 6)
    res = finite_diff_check(
        lambda: (x[:, :3] * x[:, 3:]).sum() + x[0].sum(), [x], eps=1e-6
    )
    assert res.max_rel_err < 1e-6, res


# -- bilinear sampling -------------------------------------------------------

def bilinear_scalar_oracle(grid, u, v):
    """Straightforward scalar bilinear lookup used as an independent oracle."""
    H, W, C = grid.shape
    fx = min(max((u + 1.0) * 0.5 * (W - 1), 0.0), W - 1)
    fy = min(max((v + 1.0) * 0.5 * (H - 1), 0.0), H - 1)
    x0 = min(int(np.floor(fx)), W - 2)
    y0 = min(int(np.floor(fy)), H - 2)
    tx, ty = fx - x0, fy - y0
    out = np.zeros(C)
    for c in range(C):
        a = grid[y0, x0, c] * (1 - tx) + grid[y0, x0 + 1, c] * tx
        b = grid[y0 + 1, x0, c] * (1 - tx) + grid[y0 + 1, x0 + 1, c] * tx
        out[c] = a * (1 - ty) + b * ty
    return out


def test_bilinear_texel_center():
    rng = np.random.default_rng(11)
    g = Tensor(rng.standard_normal((4, 5, 3)))
    # texel (row 2, col 3) center in normalized coords
    u = 2.0 * 3 / (5 - 1) - 1.0
    v = 2.0 * 2 / (4 - 1) - 1.0
    out = ad.bilinear_sample_2d(g, Tensor([[u, v]]))
    np.testing.assert_allclose(out.data[0], g.data[2, 3], rtol=1e-6)


def test_bilinear_midpoint_symmetry():
    g = np.zeros((2, 2, 1))
    g[1, 0, 0] = 1.0
    g[1, 1, 0] = 1.0
    out = ad.bilinear_sample_2d(Tensor(g), Tensor([[0.0, 0.0]]))
    assert abs(out.data[0, 0] - 0.5) < 1e-7


def test_bilinear_border_clamp():
    rng = np.random.default_rng(12)
    g = Tensor(rng.standard_normal((4, 4, 2)))
    out = ad.bilinear_sample_2d(Tensor(g.data), Tensor([[-5.0, -5.0], [5.0, 5.0]]))
    np.testing.assert_allclose(out.data[0], g.data[0, 0], rtol=1e-6)
    np.testing.assert_allclose(out.data[1], g.data[-1, -1], rtol=1e-6)


def test_bilinear_rejects_nonfinite():
    g = Tensor(np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        ad.bilinear_sample_2d(g, Tensor([[np.nan, 0.0]]))


def test_bilinear_vs_scalar_oracle():
    rng = np.random.default_rng(13)
    g = rng.standard_normal((7, 9, 4))
    uv = rng.uniform(-1.2, 1.2, (50, 2))
    out = ad.bilinear_sample_2d(Tensor(g), Tensor(uv)).data
    for i in range(uv.shape[0]):
        ref = bilinear_scalar_oracle(g, uv[i, 0], uv[i, 1])
        assert np.max(np.abs(out[i] - ref)) < 1e-6


def test_fd_bilinear_grid_and_uv():
    rng = np.random.default_rng(14)
    g = rand64(rng, 5, 6, 3)
    # keep probes interior so the clamp boundary is not crossed by fd steps
    uv = Tensor(rng.uniform(-0.8, 0.8, (7, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((7, 3)))
    res = finite_diff_check(
        lambda: (ad.bilinear_sample_2d(g, uv) * w).sum(), [g, uv], eps=1e-6
    )
    assert res.max_rel_err < 1e-6, res


# -- conv2d ------------------------------------------------------------------

def test_conv2d_1x1_is_per_pixel_linear():
    rng = np.random.default_rng(15)
    x = Tensor(rng.standard_normal((2, 4, 4, 3)))
    k = Tensor(rng.standard_normal((1, 1, 3, 5)))
    out = ad.conv2d(x, k).data
    ref = x.data @ k.data[0, 0]
    np.testing.assert_allclose(out, ref, rtol=1e-6)


def test_conv2d_allones_3x3_constant_input():
    x = Tensor(np.full((1, 5, 5, 1), 2.0))
    k = Tensor(np.ones((3, 3, 1, 1)))
    out = ad.conv2d(x, k).data
    np.testing.assert_allclose(out, 18.0, rtol=1e-6)


def test_fd_conv2d_stride2():
    rng = np.random.default_rng(16)
    x = rand64(rng, 1, 6, 6, 2)
    k = rand64(rng, 3, 3, 2, 4)
    w = Tensor(rng.standard_normal((1, 2, 2, 4)))
    res = finite_diff_check(
        lambda: (ad.conv2d(x, k, stride=2) * w).sum(), [x, k], eps=1e-6
    )
    assert res.max_rel_err < 1e-6, res


# -- composite pipeline, 32-bit ----------------------------------------------

def test_fd_composite_pipeline_float32():
    rng = np.random.default_rng(17)
    g = Tensor(rng.standard_normal((6, 6, 4)).astype(np.float32), requires_grad=True)
    uv = Tensor(rng.uniform(-0.7, 0.7, (5, 2)).astype(np.float32))
    w1 = Tensor((0.3 * rng.standard_normal((4, 8))).astype(np.float32), requires_grad=True)

    def f():
        feat = ad.bilinear_sample_2d(g, uv)
        h = ad.softplus(feat @ w1)
        return (h * h).mean()

    res = finite_diff_check(f, [g, w1], eps=1e-2)
    assert res.max_rel_err < 1e-3, res


# -- determinism --------------------------------------------------------------

def test_ops_deterministic():
    rng = np.random.default_rng(18)
    x = Tensor(rng.standard_normal((16, 16)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((16, 16)).astype(np.float32), requires_grad=True)

    def run():
        x.grad = None
        w.grad = None
        with Tape() as tape:
            loss = ad.softplus(x @ w).mean()
        tape.backward(loss)
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


# -- adam ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    out, state = adam_step([p], [np.zeros(2)], None, lr=0.1)
    np.testing.assert_allclose(out[0], p)


def test_adam_first_step_magnitude_is_lr():
    p = np.zeros(3)
    g = np.array([0.3, -1.7, 42.0])
    out, _ = adam_step([p], [g], None, lr=0.01)
    # bias-corrected first step moves every coordinate by ~lr against the sign
    np.testing.assert_allclose(np.abs(out[0]), 0.01, rtol=1e-6)
    assert np.all(np.sign(out[0]) == -np.sign(g))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(3)], [np.zeros(4)], None, lr=0.1)


def test_adam_descends_quadratic_bowl():
    x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = Adam([x], lr=0.01)
    norms = []
    for _ in range(50):
        opt.zero_grad()
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
        opt.step()
        norms.append(float(np.linalg.norm(x.data)))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_adam_class_matches_functional():
    rng = np.random.default_rng(19)
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(4)]

    t = Tensor(p0.copy(), requires_grad=True)
    opt = Adam([t], lr=0.05)
    arrs = [p0.copy()]
    state = None
    for g in grads:
        t.grad = g.copy()
        opt.step()
        arrs, state = adam_step(arrs, [g], state, lr=0.05)
    np.testing.assert_allclose(t.data, arrs[0], rtol=1e-12)
