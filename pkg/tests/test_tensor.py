"""Tensor/tape contract tests.

Derived expectations are checked against independent oracles computed here:
a 9-tap brute-force loop for the stencil, scalar arithmetic for the pointwise
matmul, triple loops for the Gram matrix, and central finite differences for
every differentiable primitive.
"""

import numpy as np
import pytest

from texa import tensor as T

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
IDENTITY = np.zeros((3, 3), dtype=np.float32)
IDENTITY[1, 1] = 1.0


def k3(*mats):
    return T.Tensor(np.stack(mats, axis=-1))


# -- finite-difference harness --------------------------------------------


def fd_ratio(build, x0, h=1e-3, tol=1e-3):
    """Fraction of coordinates where analytic and central FD grads agree.

    The scalar loss is a fixed random projection of the op output; the FD
    side accumulates it in f64 to keep cancellation noise below tol.
    """
    rs = np.random.RandomState(1234)
    probe = build(T.Tensor(x0))
    proj = rs.uniform(-1.0, 1.0, size=probe.shape).astype(np.float32)

    with T.Tape() as tape:
        xt = T.Tensor(x0.copy())
        tape.watch(xt)
        loss = T.tsum(T.mul(build(xt), T.Tensor(proj)))
    T.backward(tape, loss)
    ad = xt.grad.astype(np.float64)

    proj64 = proj.astype(np.float64)

    def loss_at(xd):
        out = build(T.Tensor(xd)).data.astype(np.float64)
        return float((out * proj64).sum())

    fd = np.zeros(x0.shape, dtype=np.float64)
    flat = fd.reshape(-1)
    base = x0.astype(np.float64)
    for i in range(flat.size):
        bump = np.zeros(flat.size, dtype=np.float64)
        bump[i] = h
        bump = bump.reshape(x0.shape)
        flat[i] = (loss_at((base + bump).astype(np.float32))
                   - loss_at((base - bump).astype(np.float32))) / (2 * h)

    # central FD cannot resolve gradients below ~ulp(L)/h; allow that floor
    noise = 4 * np.finfo(np.float32).eps * max(abs(loss_at(x0)), 1.0) / (2 * h)
    scale = np.maximum(np.abs(ad), np.abs(fd))
    ok = (np.abs(ad - fd) <= noise) | (np.abs(ad - fd) / np.maximum(scale, 1e-12) < tol)
    return ok.mean()


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.RandomState(seed).uniform(lo, hi, size=shape).astype(np.float32)


# -- conv2d_depthwise ------------------------------------------------------


def brute_conv_at(x, kern, y, xx, boundary):
    """Independent 9-tap oracle, f64 accumulation."""
    h, w = x.shape[:2]
    acc = 0.0
    for dy in range(3):
        for dx in range(3):
            yy, xc = y + dy - 1, xx + dx - 1
            if boundary == "torus":
                v = x[yy % h, xc % w, 0]
            elif boundary == "clamp":
                v = x[min(max(yy, 0), h - 1), min(max(xc, 0), w - 1), 0]
            else:
                v = x[yy, xc, 0] if (0 <= yy < h and 0 <= xc < w) else 0.0
            acc += float(kern[dy, dx]) * float(v)
    return acc


def test_conv_constant_input_zero_sum_kernel():
    x = T.Tensor(np.full((6, 7, 3), 2.5, dtype=np.float32))
    out = T.conv2d_depthwise(x, k3(SOBEL_X), boundary="torus")
    assert out.shape == (6, 7, 3)
    assert np.all(out.data == 0.0)


def test_conv_identity_kernel_is_identity():
    x = T.Tensor(rand((5, 5, 2), seed=3))
    out = T.conv2d_depthwise(x, k3(IDENTITY), boundary="torus")
    assert np.array_equal(out.data, x.data)


@pytest.mark.parametrize("boundary", ["torus", "clamp", "zero"])
def test_conv_matches_brute_force_oracle(boundary):
    x = rand((5, 5, 1), seed=7)
    out = T.conv2d_depthwise(T.Tensor(x), k3(SOBEL_X), boundary=boundary).data
    for y in range(5):
        for xx in range(5):
            want = brute_conv_at(x, SOBEL_X, y, xx, boundary)
            assert out[y, xx, 0] == pytest.approx(want, rel=1e-5, abs=1e-6)


def test_conv_wraparound_value_at_origin():
    # the (0,0) output must reach the opposite edges of the torus
    x = rand((5, 5, 1), seed=11)
    out = T.conv2d_depthwise(T.Tensor(x), k3(SOBEL_X), boundary="torus").data
    assert out[0, 0, 0] == pytest.approx(
        brute_conv_at(x, SOBEL_X, 0, 0, "torus"), rel=1e-5, abs=1e-6)


def test_conv_channel_ordering_interleaves_kernels():
    x = rand((4, 4, 2), seed=5)
    ky = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float32)
    both = T.conv2d_depthwise(T.Tensor(x), k3(SOBEL_X, ky)).data
    kx_only = T.conv2d_depthwise(T.Tensor(x), k3(SOBEL_X)).data
    ky_only = T.conv2d_depthwise(T.Tensor(x), k3(ky)).data
    # output channel c*K + k: kernel k applied to channel c
    assert np.array_equal(both[..., 0], kx_only[..., 0])
    assert np.array_equal(both[..., 1], ky_only[..., 0])
    assert np.array_equal(both[..., 2], kx_only[..., 1])
    assert np.array_equal(both[..., 3], ky_only[..., 1])


def test_conv_torus_commutes_with_cyclic_shift_bitwise():
    x = rand((8, 9, 3), seed=13)
    kern = k3(SOBEL_X)
    for shift in [(1, 0), (0, 1), (3, 5), (-2, 4)]:
        rolled = np.roll(x, shift, axis=(0, 1))
        a = T.conv2d_depthwise(T.Tensor(rolled), kern, boundary="torus").data
        b = np.roll(T.conv2d_depthwise(T.Tensor(x), kern, boundary="torus").data,
                    shift, axis=(0, 1))
        assert np.array_equal(a, b)


def test_conv_shape_errors_name_extent():
    with pytest.raises(T.ShapeMismatch, match="3x3"):
        T.conv2d_depthwise(T.Tensor(np.zeros((4, 4, 1))),
                           T.Tensor(np.zeros((2, 3, 1))))
    with pytest.raises(T.ShapeMismatch, match="H, W, C"):
        T.conv2d_depthwise(T.Tensor(np.zeros((4, 4))), k3(SOBEL_X))


def test_conv_batched_matches_per_sample():
    xb = rand((3, 5, 6, 2), seed=21)
    kern = k3(SOBEL_X, IDENTITY)
    out = T.conv2d_depthwise(T.Tensor(xb), kern).data
    for b in range(3):
        one = T.conv2d_depthwise(T.Tensor(xb[b]), kern).data
        assert np.array_equal(out[b], one)


# -- matmul_pointwise ------------------------------------------------------


def test_matmul_zero_weight_zero_bias():
    x = T.Tensor(rand((3, 3, 4)))
    out = T.matmul_pointwise(x, T.Tensor(np.zeros((4, 2))), T.Tensor(np.zeros(2)))
    assert np.all(out.data == 0.0)


def test_matmul_identity():
    x = T.Tensor(rand((3, 3, 4), seed=2))
    out = T.matmul_pointwise(x, T.Tensor(np.eye(4, dtype=np.float32)))
    assert np.array_equal(out.data, x.data)


def test_matmul_scalar_oracle():
    x = np.array([[[1.0, 2.0]]], dtype=np.float32)
    w = rand((2, 3), seed=4)
    b = rand((3,), seed=5)
    out = T.matmul_pointwise(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    for j in range(3):
        want = 1.0 * float(w[0, j]) + 2.0 * float(w[1, j]) + float(b[j])
        assert out[0, 0, j] == pytest.approx(want, rel=1e-6)


def test_matmul_shape_error():
    with pytest.raises(T.ShapeMismatch, match="channels 4"):
        T.matmul_pointwise(T.Tensor(np.zeros((2, 2, 4))), T.Tensor(np.zeros((5, 3))))
    with pytest.raises(T.ShapeMismatch, match="bias"):
        T.matmul_pointwise(T.Tensor(np.zeros((2, 2, 4))),
                           T.Tensor(np.zeros((4, 3))), T.Tensor(np.zeros(2)))


# -- relu / clamp ----------------------------------------------------------


def test_relu_values():
    out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, np.array([0.0, 0.0, 2.0], dtype=np.float32))


def test_relu_all_negative_zero_grad():
    with T.Tape() as tape:
        x = T.Tensor([-3.0, -0.5])
        tape.watch(x)
        loss = T.tsum(T.relu(x))
    T.backward(tape, loss)
    assert np.all(loss.data == 0.0)
    assert np.array_equal(x.grad, np.zeros(2, dtype=np.float32))


def test_relu_gradient_zero_at_exactly_zero():
    with T.Tape() as tape:
        x = T.Tensor([-1.0, 3.0, 0.0])
        tape.watch(x)
        loss = T.tsum(T.relu(x))
    T.backward(tape, loss)
    assert np.array_equal(x.grad, np.array([0.0, 1.0, 0.0], dtype=np.float32))


def test_clamp_values_and_straight_through_grad():
    with T.Tape() as tape:
        x = T.Tensor([-2.0, -0.5, 0.5, 2.0])
        tape.watch(x)
        loss = T.tsum(T.clamp(x, -1.0, 1.0))
    T.backward(tape, loss)
    assert np.array_equal(loss.data, np.float32(-1.0 - 0.5 + 0.5 + 1.0))
    assert np.array_equal(x.grad, np.array([0.0, 1.0, 1.0, 0.0], dtype=np.float32))


# -- gram ------------------------------------------------------------------


def test_gram_zero_features():
    g = T.gram(T.Tensor(np.zeros((4, 4, 3), dtype=np.float32)))
    assert np.all(g.data == 0.0)


def test_gram_single_pixel_analytic():
    a, b = 0.7, -1.3
    g = T.gram(T.Tensor(np.array([[[a, b]]], dtype=np.float32))).data
    want = np.array([[a * a, a * b], [a * b, b * b]], dtype=np.float32)
    assert np.allclose(g, want, rtol=1e-6)


def test_gram_triple_loop_oracle():
    f = rand((3, 3, 2), seed=9)
    g = T.gram(T.Tensor(f)).data
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for y in range(3):
                for x in range(3):
                    want[i, j] += float(f[y, x, i]) * float(f[y, x, j])
    want /= 9.0
    assert np.allclose(g, want, atol=1e-6)


def test_gram_bitwise_symmetric():
    g = T.gram(T.Tensor(rand((16, 16, 12), seed=10, lo=-3, hi=3))).data
    assert np.array_equal(g, g.T)


def test_gram_batched():
    f = rand((2, 4, 4, 3), seed=30)
    g = T.gram(T.Tensor(f)).data
    assert g.shape == (2, 3, 3)
    for b in range(2):
        one = T.gram(T.Tensor(f[b])).data
        assert np.array_equal(g[b], one)


# -- pooling ---------------------------------------------------------------


def test_maxpool_values_and_first_index_ties():
    x = np.zeros((2, 2, 1), dtype=np.float32)
    x[:] = 5.0  # four-way tie
    with T.Tape() as tape:
        xt = T.Tensor(x)
        tape.watch(xt)
        loss = T.tsum(T.maxpool2(xt))
    T.backward(tape, loss)
    assert loss.data == 5.0
    want = np.zeros((2, 2, 1), dtype=np.float32)
    want[0, 0, 0] = 1.0  # tie routes to window position (0,0)
    assert np.array_equal(xt.grad, want)


def test_maxpool_selects_window_max():
    x = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    out = T.maxpool2(T.Tensor(x)).data
    assert np.array_equal(out[..., 0], np.array([[5, 7], [13, 15]], dtype=np.float32))


def test_avgpool_values_and_grad():
    x = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    with T.Tape() as tape:
        xt = T.Tensor(x)
        tape.watch(xt)
        out = T.avgpool2(xt)
        loss = T.tsum(out)
    T.backward(tape, loss)
    assert np.array_equal(out.data[..., 0], np.array([[2.5, 4.5], [10.5, 12.5]],
                                                     dtype=np.float32))
    assert np.allclose(xt.grad, 0.25)


def test_pool_odd_extent_error():
    with pytest.raises(T.ShapeMismatch, match="even"):
        T.maxpool2(T.Tensor(np.zeros((3, 4, 1))))


# -- channel ops -----------------------------------------------------------


def test_concat_slice_roundtrip_and_grads():
    a = rand((3, 3, 2), seed=14)
    b = rand((3, 3, 3), seed=15)
    with T.Tape() as tape:
        at, bt = T.Tensor(a), T.Tensor(b)
        tape.watch(at)
        tape.watch(bt)
        cat = T.concat_channels([at, bt])
        back = T.slice_channels(cat, 2, 5)
        loss = T.tsum(back)
    T.backward(tape, loss)
    assert np.array_equal(cat.data[..., :2], a)
    assert np.array_equal(cat.data[..., 2:], b)
    assert np.array_equal(at.grad, np.zeros_like(a))
    assert np.array_equal(bt.grad, np.ones_like(b))


def test_concat_shape_error():
    with pytest.raises(T.ShapeMismatch, match="spatial"):
        T.concat_channels([T.Tensor(np.zeros((2, 2, 1))),
                           T.Tensor(np.zeros((3, 2, 1)))])


def test_slice_range_error():
    with pytest.raises(T.ShapeMismatch):
        T.slice_channels(T.Tensor(np.zeros((2, 2, 3))), 1, 5)


def test_subsample_values():
    x = np.arange(36, dtype=np.float32).reshape(6, 6, 1)
    out = T.subsample(T.Tensor(x), 2, 3).data
    assert np.array_equal(out[..., 0], x[::2, ::3, 0])


# -- extract_patches -------------------------------------------------------


def test_extract_patches_center_channel_is_input():
    x = rand((5, 6, 3), seed=16)
    p = T.extract_patches(T.Tensor(x), 3, 3, boundary="zero").data
    p = p.reshape(5, 6, 3, 9)
    assert np.array_equal(p[..., 4], x)  # offset (1,1) of a 3x3 window


def test_extract_patches_matches_conv():
    # correlating with kernel k == patch matmul with flattened taps
    x = rand((6, 6, 1), seed=17)
    conv = T.conv2d_depthwise(T.Tensor(x), k3(SOBEL_X), boundary="torus").data
    p = T.extract_patches(T.Tensor(x), 3, 3, boundary="torus").data
    via_patches = p.reshape(6, 6, 9) @ SOBEL_X.reshape(9)
    assert np.allclose(conv[..., 0], via_patches, atol=1e-5)


# -- backward mechanics ----------------------------------------------------


def test_backward_sum_gives_ones():
    with T.Tape() as tape:
        x = T.Tensor(rand((4, 5), seed=18))
        tape.watch(x)
        loss = T.tsum(x)
    T.backward(tape, loss)
    assert np.array_equal(x.grad, np.ones((4, 5), dtype=np.float32))


def test_backward_sum_of_squares():
    with T.Tape() as tape:
        x = T.Tensor([1.0, 2.0])
        tape.watch(x)
        loss = T.tsum(T.mul(x, x))
    T.backward(tape, loss)
    assert np.array_equal(x.grad, np.array([2.0, 4.0], dtype=np.float32))


def test_backward_requires_scalar_loss():
    with T.Tape() as tape:
        x = T.Tensor([1.0, 2.0])
        tape.watch(x)
        y = T.mul(x, x)
    with pytest.raises(T.ShapeMismatch, match="scalar"):
        T.backward(tape, y)


def test_backward_unreached_leaf_gets_zero():
    with T.Tape() as tape:
        x = T.Tensor([1.0, 2.0])
        y = T.Tensor([3.0])
        tape.watch(x)
        tape.watch(y)
        loss = T.tsum(x)
    T.backward(tape, loss)
    assert np.array_equal(y.grad, np.zeros(1, dtype=np.float32))


def test_backward_two_consumers_adds_gradients():
    x0 = rand((3, 4), seed=19)

    def one(consumer):
        with T.Tape() as tape:
            x = T.Tensor(x0.copy())
            tape.watch(x)
            if consumer == "both":
                loss = T.add(T.tsum(T.mul(x, x)), T.tsum(T.relu(x)))
            elif consumer == "sq":
                loss = T.tsum(T.mul(x, x))
            else:
                loss = T.tsum(T.relu(x))
        T.backward(tape, loss)
        return x.grad

    combined = one("both")
    assert np.allclose(combined, one("sq") + one("relu"), atol=1e-6)


def test_backward_accumulates_across_calls():
    with T.Tape() as tape:
        x = T.Tensor([1.0, 1.0])
        tape.watch(x)
        loss = T.tsum(x)
    T.backward(tape, loss)
    T.backward(tape, loss)
    assert np.array_equal(x.grad, np.full(2, 2.0, dtype=np.float32))


def test_three_op_chain_matches_finite_differences():
    w = rand((3, 2), seed=20)

    def build(x):
        return T.relu(T.matmul_pointwise(x, T.Tensor(w)))

    assert fd_ratio(build, rand((2, 2, 3), seed=21)) >= 0.95


def test_no_tape_means_no_recording():
    tape = T.Tape()
    with tape:
        x = T.Tensor([1.0])
        tape.watch(x)
        with T.no_tape():
            y = T.mul(x, x)
    assert tape.entries == []
    assert y.requires_grad is False


# -- finite differences across every primitive ----------------------------


FD_CASES = {
    "conv_torus": lambda x: T.conv2d_depthwise(x, k3(SOBEL_X, IDENTITY), "torus"),
    "conv_clamp": lambda x: T.conv2d_depthwise(x, k3(SOBEL_X), "clamp"),
    "conv_zero": lambda x: T.conv2d_depthwise(x, k3(SOBEL_X), "zero"),
    "matmul_x": lambda x: T.matmul_pointwise(
        x, T.Tensor(rand((3, 4), seed=40)), T.Tensor(rand((4,), seed=41))),
    "relu": T.relu,
    "clamp": lambda x: T.clamp(x, -0.75, 0.75),
    "gram": T.gram,
    "add_bcast": lambda x: T.add(x, T.Tensor(rand((3,), seed=42))),
    "sub": lambda x: T.sub(T.Tensor(rand((4, 6, 3), seed=43)), x),
    "mul_bcast": lambda x: T.mul(x, T.Tensor(rand((1, 6, 3), seed=44))),
    "scale": lambda x: T.scale(x, -1.7),
    "mean": T.tmean,
    "maxpool": lambda x: T.maxpool2(x),
    "avgpool": lambda x: T.avgpool2(x),
    "concat": lambda x: T.concat_channels([x, T.Tensor(rand((4, 6, 2), seed=45))]),
    "slice": lambda x: T.slice_channels(x, 1, 3),
    "subsample": lambda x: T.subsample(x, 2, 2),
    "patches": lambda x: T.extract_patches(x, 3, 3, "torus"),
}


@pytest.mark.parametrize("name", sorted(FD_CASES))
def test_fd_all_primitives(name):
    x0 = rand((4, 6, 3), seed=100 + sorted(FD_CASES).index(name))
    assert fd_ratio(FD_CASES[name], x0) >= 0.95


def test_fd_matmul_weight_and_bias():
    x = T.Tensor(rand((3, 3, 3), seed=50))

    def via_w(w):
        return T.matmul_pointwise(x, w, T.Tensor(rand((2,), seed=51)))

    def via_b(b):
        return T.matmul_pointwise(x, T.Tensor(rand((3, 2), seed=52)), b)

    assert fd_ratio(via_w, rand((3, 2), seed=53)) >= 0.95
    assert fd_ratio(via_b, rand((2,), seed=54)) >= 0.95


# -- checkpoint ------------------------------------------------------------


def test_checkpoint_matches_direct_gradient_bitwise():
    w0 = rand((3, 3), seed=60)

    def block(x, w):
        return T.relu(T.matmul_pointwise(x, w))

    x0 = rand((4, 4, 3), seed=61)

    def run(use_ckpt):
        with T.Tape() as tape:
            x = T.Tensor(x0.copy())
            w = T.Tensor(w0.copy())
            tape.watch(x)
            tape.watch(w)
            h1 = T.checkpoint(block, x, w) if use_ckpt else block(x, w)
            h2 = T.checkpoint(block, h1, w) if use_ckpt else block(h1, w)
            loss = T.tmean(T.mul(h2, h2))
        T.backward(tape, loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run(False)
    l2, gx2, gw2 = run(True)
    assert np.array_equal(l1, l2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_checkpoint_rejects_closure_over_watched_tensor():
    with T.Tape() as tape:
        x = T.Tensor(rand((2, 2, 3), seed=64))
        w = T.Tensor(rand((3, 3), seed=65))
        tape.watch(x)
        tape.watch(w)
        out = T.checkpoint(lambda a: T.matmul_pointwise(a, w), x)
        loss = T.tsum(out)
    with pytest.raises(RuntimeError, match="closed over"):
        T.backward(tape, loss)


def test_checkpoint_differentiates_all_inputs():
    def block(x, w):
        return T.relu(T.matmul_pointwise(x, w))

    with T.Tape() as tape:
        x = T.Tensor(rand((2, 2, 3), seed=62))
        w = T.Tensor(rand((3, 3), seed=63))
        tape.watch(x)
        tape.watch(w)
        loss = T.tsum(T.checkpoint(block, x, w))
    T.backward(tape, loss)
    assert x.grad is not None and np.any(x.grad != 0)
    assert w.grad is not None and np.any(w.grad != 0)
