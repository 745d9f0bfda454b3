"""Unit tests for the tensor/autodiff engine."""

import numpy as np
import pytest

from dfvdepth.autodiff import (
    AdamState,
    RunningStats,
    Tensor,
    adam_step,
    avg_pool,
    backward,
    batch_norm,
    concat,
    conv2d,
    conv3d,
    no_grad,
    relu,
    slice_,
    smooth_l1,
    softmax,
    stack,
    sum_,
    upsample_linear,
)
from dfvdepth.errors import EmptyMaskError, NumericError, ShapeError

from oracles import conv2d_loop, conv3d_loop, max_rel_err, numeric_gradient


def test_scalar_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    y = x * x
    backward(y)
    assert x.grad == 6.0


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(3.0, requires_grad=True)
    y = x * x
    backward(y)
    backward(y)
    assert x.grad == 12.0


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * x)


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0, np.inf])
    with pytest.raises(NumericError):
        Tensor([np.nan])


def test_no_grad_suppresses_recording():
    x = Tensor(2.0, requires_grad=True)
    with no_grad():
        y = x * x
    assert y.node is None and not y.requires_grad


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(k), stride=1, padding=1)
        assert np.array_equal(out.data, x.data)

    def test_scalar_kernel_doubles(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = conv2d(x, Tensor([[[[2.0]]]]))
        assert np.array_equal(out.data, [[[[2.0, 4.0], [6.0, 8.0]]]])

    def test_matches_loop_oracle_bitwise(self):
        rng = np.random.default_rng(7)
        for stride, padding in [(1, 0), (1, 1), (2, 1)]:
            x = rng.standard_normal((2, 3, 6, 7))
            w = rng.standard_normal((4, 3, 3, 3))
            b = rng.standard_normal(4)
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
            want = conv2d_loop(x, w, b, stride, padding)
            assert np.array_equal(got, want)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3)) * 0.5
        b = rng.standard_normal(4)
        xt, wt, bt = Tensor(x, True), Tensor(w, True), Tensor(b, True)
        out = conv2d(xt, wt, bt, stride=1, padding=1)
        backward(sum_(out))
        num = numeric_gradient(
            lambda a, ww, bb: conv2d_loop(a, ww, bb, 1, 1).sum(), [x, w, b])
        assert max_rel_err(xt.grad, num[0]) < 1e-4
        assert max_rel_err(wt.grad, num[1]) < 1e-4
        assert max_rel_err(bt.grad, num[2]) < 1e-4

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
        with pytest.raises(ShapeError):  # even kernel
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


class TestConv3d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(8.0).reshape(1, 1, 2, 2, 2))
        out = conv3d(x, Tensor(np.ones((1, 1, 1, 1, 1))))
        assert np.array_equal(out.data, x.data)

    def test_all_ones_sums_to_27(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3, 3)))
        out = conv3d(x, w, padding=0)
        assert out.data.shape == (1, 1, 1, 1, 1)
        assert out.data.reshape(()) == 27.0

    def test_matches_loop_oracle_bitwise(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 2, 4, 5, 4))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        got = conv3d(Tensor(x), Tensor(w), stride=1, padding=1).data
        assert np.array_equal(got, conv3d_loop(x, w, None, 1, 1))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 3, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3, 3)) * 0.5
        xt, wt = Tensor(x, True), Tensor(w, True)
        backward(sum_(conv3d(xt, wt, stride=1, padding=1)))
        num = numeric_gradient(
            lambda a, ww: conv3d_loop(a, ww, None, 1, 1).sum(), [x, w])
        assert max_rel_err(xt.grad, num[0]) < 1e-4
        assert max_rel_err(wt.grad, num[1]) < 1e-4


class TestBatchNorm:
    def test_training_normalizes_per_channel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 2.0 + 1.0)
        out = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                         RunningStats(3), training=True, epsilon=1e-12)
        m = out.data.mean(axis=(0, 2, 3))
        v = out.data.var(axis=(0, 2, 3))
        assert np.all(np.abs(m) < 1e-6)
        assert np.all(np.abs(v - 1.0) < 1e-6)

    def test_zero_gamma_returns_beta(self):
        x = Tensor(np.random.default_rng(1).standard_normal((2, 2, 3, 3)))
        beta = np.array([0.5, -1.5])
        out = batch_norm(x, Tensor(np.zeros(2)), Tensor(beta), RunningStats(2),
                         training=True)
        assert np.allclose(out.data, beta[None, :, None, None])

    def test_zero_variance_channel_is_finite(self):
        x = Tensor(np.full((2, 1, 3, 3), 7.0))
        out = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                         RunningStats(1), training=True)
        assert np.all(np.isfinite(out.data))

    def test_running_stats_update_and_eval(self):
        rng = np.random.default_rng(2)
        stats = RunningStats(2)
        x = rng.standard_normal((8, 2, 4, 4)) + 3.0
        batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats,
                   training=True, momentum=0.1)
        mu = x.mean(axis=(0, 2, 3))
        assert np.allclose(stats.mean, 0.1 * mu)
        # eval mode uses the running buffers
        y = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats,
                       training=False)
        want = (x - stats.mean[None, :, None, None]) / \
            np.sqrt(stats.var[None, :, None, None] + 1e-5)
        assert np.allclose(y.data, want)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradient_matches_finite_differences(self, training):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 2, 4, 4))
        gamma = rng.uniform(0.5, 1.5, 2)
        beta = rng.standard_normal(2)
        coef = rng.standard_normal(x.shape)
        stats = RunningStats(2)
        stats.mean = rng.standard_normal(2)
        stats.var = rng.uniform(0.5, 2.0, 2)

        def run(a, g, b):
            mstats = RunningStats(2)
            mstats.mean = stats.mean.copy()
            mstats.var = stats.var.copy()
            out = batch_norm(Tensor(a), Tensor(g), Tensor(b), mstats,
                             training=training)
            return float((out.data * coef).sum())

        xt, gt, bt = Tensor(x, True), Tensor(gamma, True), Tensor(beta, True)
        live = stats if not training else RunningStats(2)
        out = batch_norm(xt, gt, bt, live, training=training)
        backward(sum_(out * Tensor(coef)))
        num = numeric_gradient(run, [x, gamma, beta])
        assert max_rel_err(xt.grad, num[0]) < 1e-4
        assert max_rel_err(gt.grad, num[1]) < 1e-4
        assert max_rel_err(bt.grad, num[2]) < 1e-4


class TestActivations:
    def test_relu_values(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_softmax_uniform_on_zeros(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_softmax_extreme_logits_stable(self):
        out = softmax(Tensor([1000.0, 0.0, -1000.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [1.0, 0.0, 0.0])

    def test_softmax_simplex_property(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.standard_normal((3, 7, 5)) * rng.uniform(0.1, 50)
            y = softmax(Tensor(x), axis=1).data
            assert np.all(y >= 0.0) and np.all(y <= 1.0)
            assert np.all(np.abs(y.sum(axis=1) - 1.0) < 1e-6)

    def test_softmax_gradient(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 5))
        coef = rng.standard_normal((2, 5))

        def run(a):
            z = a - a.max(axis=1, keepdims=True)
            e = np.exp(z)
            return float((e / e.sum(axis=1, keepdims=True) * coef).sum())

        xt = Tensor(x, True)
        backward(sum_(softmax(xt, axis=1) * Tensor(coef)))
        num = numeric_gradient(run, [x])
        assert max_rel_err(xt.grad, num[0]) < 1e-4


class TestPoolingAndUpsampling:
    def test_avg_pool_arithmetic_mean(self):
        x = Tensor([[[[1.0, 3.0], [5.0, 7.0]]]])
        out = avg_pool(x, (2, 2))
        assert out.data.reshape(()) == 4.0

    def test_avg_pool_rejects_zero_window(self):
        with pytest.raises(ShapeError):
            avg_pool(Tensor(np.zeros((1, 1, 4, 4))), (0, 2))

    def test_upsample_constant_preserved_exactly(self):
        x = Tensor(np.full((1, 2, 3, 3), 0.37))
        out = upsample_linear(x, (6, 6))
        assert np.all(out.data == 0.37)
        v = Tensor(np.full((1, 1, 2, 3, 3), -1.25))
        out3 = upsample_linear(v, (4, 6, 6))
        assert np.all(out3.data == -1.25)

    def test_upsample_identity_when_sizes_match(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 4, 5))
        out = upsample_linear(Tensor(x), (4, 5))
        assert np.array_equal(out.data, x)

    def test_upsample_rejects_bad_target(self):
        with pytest.raises(ShapeError):
            upsample_linear(Tensor(np.zeros((1, 1, 4, 4))), (0, 4))

    @pytest.mark.parametrize("shape,window", [((2, 3, 6, 7), (2, 3)),
                                              ((1, 2, 4, 6, 5), (2, 3, 2))])
    def test_avg_pool_gradient(self, shape, window):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(shape)
        xt = Tensor(x, True)
        out = avg_pool(xt, window)
        coef = rng.standard_normal(out.data.shape)
        backward(sum_(out * Tensor(coef)))

        def run(a):
            rank = len(window)
            outsp = tuple(e // w for e, w in zip(a.shape[-rank:], window))
            crop = a[(...,) + tuple(slice(0, o * w) for o, w in zip(outsp, window))]
            lead = a.shape[:-rank]
            blocks = []
            for o, w in zip(outsp, window):
                blocks.extend([o, w])
            rs = crop.reshape(lead + tuple(blocks))
            pooled = rs.mean(axis=tuple(range(len(lead) + 1, rs.ndim, 2)))
            return float((pooled * coef).sum())

        num = numeric_gradient(run, [x])
        assert max_rel_err(xt.grad, num[0]) < 1e-4

    @pytest.mark.parametrize("shape,size", [((2, 2, 3, 4), (5, 6)),
                                            ((1, 2, 3, 4, 4), (5, 6, 7)),
                                            ((1, 1, 6, 6), (3, 4))])
    def test_upsample_gradient(self, shape, size):
        rng = np.random.default_rng(12)
        x = rng.standard_normal(shape)
        xt = Tensor(x, True)
        out = upsample_linear(xt, size)
        coef = rng.standard_normal(out.data.shape)
        backward(sum_(out * Tensor(coef)))

        def run(a):
            return float((upsample_linear(Tensor(a), size).data * coef).sum())

        num = numeric_gradient(run, [x])
        assert max_rel_err(xt.grad, num[0]) < 1e-4


class TestSmoothL1:
    def test_zero_when_equal(self):
        out = smooth_l1(Tensor([1.0, -2.0]), Tensor([1.0, -2.0]))
        assert out.data == 0.0

    def test_quadratic_branch(self):
        assert smooth_l1(Tensor([0.5]), Tensor([0.0])).data == 0.125

    def test_linear_branch(self):
        assert smooth_l1(Tensor([2.0]), Tensor([0.0])).data == 1.5

    def test_masked_mean(self):
        pred = Tensor([1.0, 10.0])
        tgt = Tensor([1.5, 0.0])
        mask = Tensor([1.0, 0.0])
        assert smooth_l1(pred, tgt, mask).data == 0.125

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            smooth_l1(Tensor([1.0]), Tensor([0.0]), Tensor([0.0]))

    def test_gradient(self):
        rng = np.random.default_rng(13)
        p = rng.standard_normal(12) * 2.0
        t = rng.standard_normal(12) * 2.0
        m = (rng.random(12) > 0.3).astype(float)
        pt = Tensor(p, True)
        backward(smooth_l1(pt, Tensor(t), Tensor(m)))

        def run(a):
            d = a - t
            e = np.where(np.abs(d) < 1, 0.5 * d * d, np.abs(d) - 0.5)
            return float((e * m).sum() / m.sum())

        num = numeric_gradient(run, [p])
        assert max_rel_err(pt.grad, num[0]) < 1e-4


class TestAdam:
    def test_first_step_approaches_lr_times_sign(self):
        p = Tensor(0.0, requires_grad=True)
        p.grad = np.asarray(1.0)
        state = AdamState(lr=0.1)
        adam_step([p], state)
        assert state.step == 1
        assert abs(float(p.data) + 0.1) < 1e-6

    def test_moment_shapes_track_params(self):
        p = Tensor(np.zeros((2, 3)), requires_grad=True)
        p.grad = np.ones((2, 3))
        state = AdamState()
        adam_step([p], state)
        assert state.m[0].shape == (2, 3) and state.v[0].shape == (2, 3)

    def test_descends_quadratic(self):
        p = Tensor(5.0, requires_grad=True)
        state = AdamState(lr=0.2)
        for _ in range(200):
            p.zero_grad()
            loss = p * p
            backward(loss)
            adam_step([p], state)
        assert abs(float(p.data)) < 0.5


class TestStructuralOps:
    def test_slice_stack_roundtrip(self):
        rng = np.random.default_rng(14)
        parts = [Tensor(rng.standard_normal((2, 3))) for _ in range(4)]
        vol = stack(parts, axis=1)
        for i, p in enumerate(parts):
            assert np.array_equal(vol.data[:, i], p.data)

    def test_stack_shape_mismatch_names_offender(self):
        with pytest.raises(ShapeError, match="operand 1"):
            stack([Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3)))], axis=0)

    def test_concat_gradient_splits(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 3)), requires_grad=True)
        out = concat([a, b], axis=1)
        backward(sum_(out * Tensor(np.arange(10.0).reshape(2, 5))))
        assert np.array_equal(a.grad, [[0.0, 1.0], [5.0, 6.0]])
        assert np.array_equal(b.grad, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]])

    def test_slice_gradient_scatters(self):
        x = Tensor(np.zeros((3, 4)), requires_grad=True)
        backward(sum_(slice_(x, (slice(1, 3), slice(0, 2)))))
        want = np.zeros((3, 4))
        want[1:3, 0:2] = 1.0
        assert np.array_equal(x.grad, want)


def test_negation_and_operator_sugar():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = -x + 1.0
    backward(sum_(y * 3.0))
    assert np.array_equal(y.data, [0.0, 3.0])
    assert np.array_equal(x.grad, [-3.0, -3.0])


def test_chain_composition_gradient():
    # gradient through f(g(x)) on the tape equals finite differences of the
    # composite function
    rng = np.random.default_rng(21)
    x = rng.standard_normal((2, 2, 6, 6))
    w1 = rng.standard_normal((3, 2, 3, 3)) * 0.5
    w2 = rng.standard_normal((1, 3, 3, 3)) * 0.5

    def composite(a):
        h = conv2d_loop(a, w1, None, 1, 1)
        h = np.where(h > 0, h, 0.0)
        return conv2d_loop(h, w2, None, 1, 1).sum()

    xt = Tensor(x, True)
    h = relu(conv2d(xt, Tensor(w1), stride=1, padding=1))
    backward(sum_(conv2d(h, Tensor(w2), stride=1, padding=1)))
    num = numeric_gradient(composite, [x])
    assert max_rel_err(xt.grad, num[0]) < 1e-4


def test_forward_determinism():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    a = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    b = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    assert np.array_equal(a, b)
