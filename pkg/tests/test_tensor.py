import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import conv_loop, warp_loop
from vsrt import tensor as tt
from vsrt.gradcheck import check_function, check_ops, op_cases
from vsrt.serialize import FormatError, decode_tensor, encode_tensor
from vsrt.tensor import GraphError, NumericError, ShapeError, Tensor


# ---------------------------------------------------------------------------
# conv2d / matmul


def test_conv_all_ones_counts_overlap():
    y = tt.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data
    assert y[0, 1, 1] == 9.0
    assert y[0, 0, 0] == 4.0


def test_conv_identity_kernel(rng):
    x = rng.uniform(-1, 1, (2, 5, 6)).astype(np.float32)
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(tt.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


@pytest.mark.parametrize("stride,pad,ksize", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 2, 5), (1, 0, 1)])
def test_conv_matches_loop_oracle(rng, stride, pad, ksize):
    x = rng.uniform(-1, 1, (2, 4, 5))
    w = rng.uniform(-1, 1, (3, 2, ksize, ksize))
    b = rng.uniform(-1, 1, 3)
    got = tt.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad), atol=1e-5)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\[1, 2, 4, 4\].*\[1, 3, 3, 3\]"):
        tt.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), padding=1)


def test_matmul_examples(rng):
    b = rng.uniform(size=(3, 2))
    np.testing.assert_allclose(tt.matmul(Tensor(np.eye(3)), Tensor(b)).data, b.astype(np.float32))
    got = tt.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]])).data
    np.testing.assert_array_equal(got, [[17.0], [39.0]])
    with pytest.raises(ShapeError):
        tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_loop_oracle(rng):
    a, b = rng.uniform(-1, 1, (4, 6)), rng.uniform(-1, 1, (6, 3))
    ref = np.array([[sum(a[i, k] * b[k, j] for k in range(6)) for j in range(3)] for i in range(4)])
    np.testing.assert_allclose(tt.matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-6)


# ---------------------------------------------------------------------------
# softmax, layer norm, activations


def test_softmax_examples():
    np.testing.assert_allclose(tt.softmax_columns(Tensor(np.full((4, 1), 2.0))).data, 0.25)
    got = tt.softmax_columns(Tensor([[0.0], [math.log(3.0)]])).data
    np.testing.assert_allclose(got[:, 0], [0.25, 0.75], atol=1e-7)
    with pytest.raises(NumericError):
        tt.softmax_columns(Tensor([[np.nan], [1.0]]))


@given(st.integers(0, 2**32 - 1))
def test_softmax_columns_normalised(seed):
    x = np.random.default_rng(seed).normal(0, 5, (6, 5))
    s = tt.softmax_columns(Tensor(x)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=0), 1.0, atol=1e-6)


def test_layer_norm_examples(rng):
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(tt.layer_norm(Tensor([[1.0, -1.0]]), g, b, eps=0.0).data, [[1.0, -1.0]])
    shift = Tensor([0.3, -0.7, 0.1])
    const = tt.layer_norm(Tensor(np.full((2, 3), 5.0)), Tensor([2.0, 2.0, 2.0]), shift).data
    np.testing.assert_allclose(const, np.broadcast_to(shift.data, (2, 3)))
    gain = rng.uniform(0.5, 2.0, 5)
    sh = rng.uniform(-1, 1, 5)
    y = tt.layer_norm(Tensor(rng.normal(0, 3, (7, 5))), Tensor(gain), Tensor(sh)).data
    np.testing.assert_allclose(((y - sh) / gain).mean(axis=1), 0.0, atol=1e-5)
    with pytest.raises(NumericError):
        tt.layer_norm(Tensor(np.ones((3, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0.0)


def test_layer_norm_channel_axis(rng):
    x = rng.normal(size=(2, 6, 3, 3))
    y = tt.layer_norm(Tensor(x), Tensor(np.ones((6, 1, 1))), Tensor(np.zeros((6, 1, 1))), axis=1).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-3)


def test_relu_values_and_gradients():
    assert tt.relu(Tensor([-2.0])).item() == 0.0
    assert tt.relu(Tensor([3.0])).item() == 3.0
    assert tt.leaky_relu(Tensor([-2.0]), 0.01).item() == pytest.approx(-0.02)
    x = Tensor([-1.0, 1.0], requires_grad=True)
    with tt.Tape() as tape:
        loss = tt.sum_all(tt.leaky_relu(x, 0.01))
    tt.backward(tape, loss)
    np.testing.assert_allclose(x.grad, [0.01, 1.0])


# ---------------------------------------------------------------------------
# unfold / fold / pixel shuffle


def test_unfold_layout():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    p = tt.unfold(Tensor(x), (2, 2), 2).data
    assert p.shape == (4, 1, 2, 2)
    np.testing.assert_array_equal(p[0, 0], [[0, 1], [4, 5]])
    assert tt.unfold(Tensor(np.ones((2, 1, 4, 4))), (2, 2), 2).shape[0] == 2 * 16 // 4


def test_unfold_loop_oracle_nonsquare(rng):
    x = rng.uniform(size=(2, 3, 4, 6))
    p = tt.unfold(Tensor(x), (3, 2), 1).data  # Wp=3, Hp=2
    nh, nw = 3, 4
    k = 0
    for t in range(2):
        for i in range(nh):
            for j in range(nw):
                np.testing.assert_array_equal(p[k], x[t, :, i:i + 2, j:j + 3].astype(np.float32))
                k += 1


def test_unfold_errors():
    with pytest.raises(ShapeError):
        tt.unfold(Tensor(np.ones((1, 1, 2, 2))), (3, 3), 1)
    with pytest.raises(ShapeError):
        tt.unfold(Tensor(np.ones((1, 1, 5, 4))), (2, 2), 2)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_fold_unfold_bitwise(seed, p, gh, gw):
    x = np.random.default_rng(seed).normal(size=(2, 3, gh * p, gw * p)).astype(np.float32)
    y = tt.fold(tt.unfold(Tensor(x), (p, p), p), x.shape, p).data
    assert np.array_equal(y, x)


def test_fold_overlap_averages(rng):
    ones = tt.fold(Tensor(np.ones((9, 2, 2, 2))), (1, 2, 4, 4), 1).data
    np.testing.assert_array_equal(ones, 1.0)
    patches = rng.uniform(size=(9, 2, 2, 2))
    summed = np.zeros((2, 4, 4))
    cnt = np.zeros((4, 4))
    k = 0
    for i in range(3):
        for j in range(3):
            summed[:, i:i + 2, j:j + 2] += patches[k]
            cnt[i:i + 2, j:j + 2] += 1
            k += 1
    got = tt.fold(Tensor(patches), (1, 2, 4, 4), 1).data[0]
    np.testing.assert_allclose(got, summed / cnt, atol=1e-6)
    with pytest.raises(ShapeError):
        tt.fold(Tensor(np.ones((5, 2, 2, 2))), (1, 2, 4, 4), 2)


def test_pixel_shuffle_layout(rng):
    y = tt.pixel_shuffle(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)), 2).data
    np.testing.assert_array_equal(y, [[[1.0, 2.0], [3.0, 4.0]]])
    x = rng.uniform(size=(3, 2, 2)).astype(np.float32)
    np.testing.assert_array_equal(tt.pixel_shuffle(Tensor(x), 1).data, x)
    x = rng.uniform(size=(8, 3, 2))
    y = tt.pixel_shuffle(Tensor(x), 2).data
    for c in range(2):
        for i in range(2):
            for j in range(2):
                np.testing.assert_array_equal(y[c, i::2, j::2], x[c * 4 + i * 2 + j].astype(np.float32))
    with pytest.raises(ShapeError):
        tt.pixel_shuffle(Tensor(np.ones((6, 2, 2))), 2)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_pixel_shuffle_preserves_multiset(seed, r):
    x = np.random.default_rng(seed).normal(size=(2 * r * r, 3, 2)).astype(np.float32)
    y = tt.pixel_shuffle(Tensor(x), r).data
    assert np.array_equal(np.sort(y, axis=None), np.sort(x, axis=None))


# ---------------------------------------------------------------------------
# warp


@given(st.integers(0, 2**32 - 1))
def test_warp_zero_flow_identity(seed):
    x = np.random.default_rng(seed).normal(size=(3, 5, 7))
    y = tt.bilinear_warp(Tensor(x), Tensor(np.zeros((2, 5, 7)))).data
    np.testing.assert_allclose(y, x.astype(np.float32), atol=1e-6)


def test_warp_integer_shift_on_ramp():
    ramp = np.tile(np.arange(5, dtype=np.float32), (1, 4, 1))
    flow = np.zeros((2, 4, 5))
    flow[0] = 1.0
    y = tt.bilinear_warp(Tensor(ramp), Tensor(flow)).data
    np.testing.assert_array_equal(y[0, :, :4], ramp[0, :, 1:])
    np.testing.assert_array_equal(y[0, :, 4], 0.0)


def test_warp_fractional_matches_oracle(rng):
    x = rng.uniform(size=(2, 6, 6))
    flow = np.zeros((2, 6, 6))
    flow[0] = 0.5
    np.testing.assert_allclose(tt.bilinear_warp(Tensor(x), Tensor(flow)).data, warp_loop(x, flow), atol=1e-5)
    flow = rng.uniform(-2, 2, (2, 6, 6))
    np.testing.assert_allclose(tt.bilinear_warp(Tensor(x), Tensor(flow)).data, warp_loop(x, flow), atol=1e-5)


def test_warp_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        tt.bilinear_warp(Tensor(np.ones((1, 4, 4))), Tensor(np.zeros((2, 4, 3))))
    with pytest.raises(NumericError):
        tt.bilinear_warp(Tensor(np.ones((1, 2, 2))), Tensor(np.full((2, 2, 2), np.inf)))


# ---------------------------------------------------------------------------
# tape


def test_backward_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with tt.Tape() as tape:
        s = tt.sum_all(x)
    tt.backward(tape, s)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    x.zero_grad()
    with tt.Tape() as tape:
        s = tt.sum_all(tt.mul(x, x))
    tt.backward(tape, s)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_foreign_loss():
    x = Tensor([1.0], requires_grad=True)
    with tt.Tape():
        y = tt.scale(x, 2.0)
    with tt.Tape() as other:
        pass
    with pytest.raises(GraphError):
        tt.backward(other, y)
    with tt.Tape() as tape:
        z = tt.scale(Tensor(np.ones(3), requires_grad=True), 2.0)
    with pytest.raises(GraphError):
        tt.backward(tape, z)


def test_gradient_accumulates_over_reuse():
    x = Tensor([3.0], requires_grad=True)
    with tt.Tape() as tape:
        y = tt.add(tt.mul(x, x), x)
        loss = tt.sum_all(y)
    tt.backward(tape, loss)
    assert x.grad[0] == pytest.approx(7.0)


def test_broadcast_gradients_reduce(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    with tt.Tape() as tape:
        loss = tt.sum_all(tt.mul(a, b))
    tt.backward(tape, loss)
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0), rtol=1e-6)


def test_float32_storage_and_precision_switch():
    assert Tensor([1.0]).data.dtype == np.float32
    with tt.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_random_composite_f32_gradient(seed):
    # conv -> relu -> matmul -> softmax -> weighted sum in float32 storage. Entry-wise ratios
    # are dominated by rounding on tiny entries, so compare in max-norm relative to the gradient.
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
    m = Tensor(rng.uniform(-1, 1, (5, 3)), requires_grad=True)
    proj = Tensor(rng.uniform(-1, 1, (5, 16)))

    def fn():
        h = tt.relu(tt.conv2d(x, w, padding=1))
        z = tt.matmul(m, tt.reshape(h, (3, 16)))
        return tt.sum_all(tt.mul(tt.softmax_columns(z), proj))

    with tt.Tape() as tape:
        loss = fn()
    tt.backward(tape, loss)
    for t in (x, w, m):
        num = tt.numeric_grad(fn, t, range(t.size), h=1e-3)
        err = np.abs(t.grad.reshape(-1) - num).max() / np.abs(num).max()
        assert err < 1e-3


# ---------------------------------------------------------------------------
# registry and gradient checker


def test_every_op_has_exactly_one_check_case(rng):
    assert set(op_cases(rng)) == set(tt.DIFFERENTIABLE_OPS)


def test_op_gradients_pass():
    results = check_ops()
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad


def test_failed_check_reports_name_and_error():
    x = Tensor(np.array([0.5, 1.5]), requires_grad=True)
    with tt.precision(np.float64):
        x = Tensor(np.array([0.5, 1.5]), requires_grad=True)

        def wrong():
            # numeric path sees x^3 but the tape records only x^2
            y = tt.mul(x, x)
            return tt.add(tt.sum_all(y), Tensor(np.array((x.data ** 3).sum())))

        res = check_function("cubic", wrong, [x])
    assert not res.passed
    assert "cubic" in res.line() and "FAIL" in res.line()
    assert f"{res.max_rel_error:.3e}" in res.line()


def test_kink_replay_freezes_sign_pattern():
    x = Tensor([-0.5, 0.5])
    with tt.record_kinks() as log:
        tt.relu(x)
    with tt.replay_kinks(log):
        y = tt.relu(Tensor([0.5, -0.5])).data
    np.testing.assert_array_equal(y, [0.0, -0.5])


# ---------------------------------------------------------------------------
# tensor file format


def test_vsrt_roundtrip_and_layout(rng):
    a = rng.normal(size=(2, 3)).astype(np.float32)
    buf = encode_tensor(a)
    assert buf[:4] == b"VSRT"
    assert len(buf) == 4 + 4 + 1 + 2 * 8 + a.size * 4
    np.testing.assert_array_equal(decode_tensor(buf), a)
    with pytest.raises(FormatError):
        decode_tensor(b"NOPE" + buf[4:])
    with pytest.raises(FormatError):
        decode_tensor(buf[:-1])
