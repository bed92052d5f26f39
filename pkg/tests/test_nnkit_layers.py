"""Layer semantics and gradient checks against finite differences."""

import numpy as np
import pytest

from helpers import assert_vjp_matches_fd, fd_gradient, max_rel_error

from voxelstereo.nnkit.adam import adam_step
from voxelstereo.nnkit.layers import (
    conv2d,
    conv2d_vjp,
    conv3d,
    conv3d_vjp,
    instance_norm,
    instance_norm_vjp,
    layer_norm_channels,
    layer_norm_channels_vjp,
    relu,
    sigmoid,
    softmax_channels,
    softmax_channels_vjp,
    upsample_nearest,
    upsample_nearest_vjp,
)
from voxelstereo.nnkit.losses import bce_loss, bce_loss_vjp, l1_depth_loss, l1_depth_loss_vjp


class TestConv:
    def test_1x1_identity_kernel(self):
        x = np.random.default_rng(0).random((5, 6, 3))
        kernel = np.eye(3).reshape(1, 1, 3, 3)
        np.testing.assert_allclose(conv2d(x, kernel), x, atol=1e-14)

    def test_3x3_average_on_constant_interior(self):
        x = np.full((6, 6, 1), 2.0)
        kernel = np.full((3, 3, 1, 1), 1.0 / 9.0)
        y = conv2d(x, kernel, padding="same")
        np.testing.assert_allclose(y[1:-1, 1:-1], 2.0)
        assert y[0, 0, 0] == pytest.approx(2.0 * 4 / 9)  # zero padding at the corner

    def test_bias_added(self):
        x = np.zeros((4, 4, 2))
        kernel = np.zeros((1, 1, 2, 3))
        y = conv2d(x, kernel, bias=np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(y, np.broadcast_to([1.0, 2.0, 3.0], (4, 4, 3)))

    def test_stride2_shape(self):
        y = conv2d(np.zeros((8, 8, 2)), np.zeros((3, 3, 2, 4)), stride=2)
        assert y.shape == (4, 4, 4)

    def test_valid_padding_shape(self):
        y = conv2d(np.zeros((8, 8, 2)), np.zeros((3, 3, 2, 4)), padding="valid")
        assert y.shape == (6, 6, 4)

    def test_hand_computed_entry(self):
        # valid conv of a 3x3 single-channel input with a 2x2 kernel is not
        # supported by "same" (even), so check one valid-mode output by hand
        x = np.arange(9.0).reshape(3, 3, 1)
        k = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1, 1)
        y = conv2d(x, k, padding="valid")
        # window [[0,1],[3,4]] . [[1,2],[3,4]] = 0 + 2 + 9 + 16 = 27
        assert y[0, 0, 0] == pytest.approx(27.0)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (1, "valid"), (2, "same")])
    def test_conv2d_gradcheck(self, stride, padding):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((6, 5, 2))
        kernel = rng.standard_normal((3, 3, 2, 3))
        bias = rng.standard_normal(3)
        up = rng.standard_normal(conv2d(x, kernel, bias, stride, padding).shape)

        assert_vjp_matches_fd(
            lambda xx: conv2d(xx, kernel, bias, stride, padding),
            lambda xx, u: conv2d_vjp(xx, kernel, stride, padding, u)[0], x, up)
        assert_vjp_matches_fd(
            lambda kk: conv2d(x, kk, bias, stride, padding),
            lambda kk, u: conv2d_vjp(x, kk, stride, padding, u)[1], kernel, up)
        assert_vjp_matches_fd(
            lambda bb: conv2d(x, kernel, bb, stride, padding),
            lambda bb, u: conv2d_vjp(x, kernel, stride, padding, u)[2], bias, up)

    def test_conv3d_gradcheck(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 4, 4, 2))
        kernel = rng.standard_normal((3, 3, 3, 2, 2))
        up = rng.standard_normal((4, 4, 4, 2))
        assert_vjp_matches_fd(
            lambda xx: conv3d(xx, kernel),
            lambda xx, u: conv3d_vjp(xx, kernel, 1, "same", u)[0], x, up)
        assert_vjp_matches_fd(
            lambda kk: conv3d(x, kk),
            lambda kk, u: conv3d_vjp(x, kk, 1, "same", u)[1], kernel, up)


class TestInstanceNorm:
    def test_constant_channel_maps_to_shift(self):
        x = np.full((4, 4, 2), 7.0)
        y = instance_norm(x, gain=np.ones(2), shift=np.array([0.5, -0.5]))
        np.testing.assert_allclose(y[..., 0], 0.5)
        np.testing.assert_allclose(y[..., 1], -0.5)

    def test_normalizes_mean_and_variance(self):
        # eps = 1e-5 biases the variance by eps/sigma^2; use large-variance
        # data so the claim holds to 1e-6
        rng = np.random.default_rng(3)
        x = rng.standard_normal((16, 16, 3)) * 100.0
        y = instance_norm(x, np.ones(3), np.zeros(3))
        np.testing.assert_allclose(y.mean(axis=(0, 1)), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=(0, 1)), 1.0, atol=1e-6)

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 5, 2))
        gain = rng.standard_normal(2)
        shift = rng.standard_normal(2)
        up = rng.standard_normal((4, 5, 2))
        assert_vjp_matches_fd(
            lambda xx: instance_norm(xx, gain, shift),
            lambda xx, u: instance_norm_vjp(xx, gain, shift, u)[0], x, up)
        assert_vjp_matches_fd(
            lambda gg: instance_norm(x, gg, shift),
            lambda gg, u: instance_norm_vjp(x, gg, shift, u)[1], gain, up)
        assert_vjp_matches_fd(
            lambda ss: instance_norm(x, gain, ss),
            lambda ss, u: instance_norm_vjp(x, gain, ss, u)[2], shift, up)

    def test_layer_norm_gradcheck(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 3, 3, 4))
        gain = rng.standard_normal(4)
        shift = rng.standard_normal(4)
        up = rng.standard_normal(x.shape)
        assert_vjp_matches_fd(
            lambda xx: layer_norm_channels(xx, gain, shift),
            lambda xx, u: layer_norm_channels_vjp(xx, gain, shift, u)[0], x, up)


class TestPointwise:
    def test_relu(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_sigmoid_extremes_stable(self):
        y = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(y, [0.0, 0.5, 1.0], atol=1e-12)

    def test_softmax_equal_logits(self):
        p = softmax_channels(np.zeros((2, 2, 2)))
        np.testing.assert_allclose(p, 0.5)

    def test_softmax_monotone_in_logit_gap(self):
        gaps = np.array([0.0, 1.0, 5.0, 20.0])
        probs = [softmax_channels(np.array([0.0, g]))[1] for g in gaps]
        assert all(b > a for a, b in zip(probs, probs[1:]))
        assert probs[-1] > 0.999999

    def test_softmax_gradcheck(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 4, 2))
        up = rng.standard_normal((3, 4, 2))
        assert_vjp_matches_fd(
            softmax_channels,
            lambda xx, u: softmax_channels_vjp(softmax_channels(xx), u), x, up)

    def test_upsample_round_trip_vjp(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4, 2))
        up = rng.standard_normal((6, 8, 2))
        assert_vjp_matches_fd(
            lambda xx: upsample_nearest(xx, 2),
            lambda xx, u: upsample_nearest_vjp(xx.shape, 2, u), x, up)


class TestLosses:
    def test_bce_at_half_is_ln2(self):
        p = np.full((4, 4, 4), 0.5)
        y = np.random.default_rng(0).integers(0, 2, (4, 4, 4))
        assert bce_loss(p, y) == pytest.approx(np.log(2.0), abs=1e-9)

    def test_bce_perfect_prediction_small(self):
        y = np.array([0.0, 1.0, 1.0, 0.0])
        assert bce_loss(y, y) <= 1e-6

    def test_bce_gradcheck_away_from_clamp(self):
        rng = np.random.default_rng(8)
        p = rng.uniform(0.05, 0.95, (3, 3))
        y = rng.integers(0, 2, (3, 3)).astype(float)
        fd = fd_gradient(lambda pp: bce_loss(pp, y), p, step=1e-5)
        assert max_rel_error(bce_loss_vjp(p, y), fd) < 1e-4

    def test_l1_exact_and_offset(self):
        gt = np.array([[1.0, 2.0], [3.0, 4.0]])
        mask = np.ones_like(gt, dtype=bool)
        assert l1_depth_loss(gt, gt, mask) == 0.0
        assert l1_depth_loss(gt + 0.1, gt, mask) == pytest.approx(0.1)

    def test_l1_respects_mask(self):
        gt = np.array([1.0, 1.0])
        pred = np.array([2.0, 1.0])
        assert l1_depth_loss(pred, gt, np.array([True, False])) == pytest.approx(1.0)

    def test_l1_empty_mask_raises(self):
        with pytest.raises(ValueError, match="empty"):
            l1_depth_loss(np.ones(3), np.ones(3), np.zeros(3, dtype=bool))

    def test_l1_gradcheck_off_ties(self):
        rng = np.random.default_rng(9)
        gt = rng.standard_normal((4, 4))
        pred = gt + rng.choice([-1.0, 1.0], (4, 4)) * rng.uniform(0.5, 1.0, (4, 4))
        mask = rng.random((4, 4)) > 0.3
        fd = fd_gradient(lambda pp: l1_depth_loss(pp, gt, mask), pred)
        assert max_rel_error(l1_depth_loss_vjp(pred, gt, mask), fd) < 1e-4

    def test_l1_tie_subgradient_zero(self):
        gt = np.array([1.0, 2.0])
        grad = l1_depth_loss_vjp(gt.copy(), gt, np.ones(2, dtype=bool))
        np.testing.assert_array_equal(grad, 0.0)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        value = np.array([1.0, -2.0])
        new, m, v = adam_step(value, np.zeros(2), np.zeros(2), np.zeros(2), t=1, lr=0.1)
        np.testing.assert_array_equal(new, value)

    def test_first_step_magnitude_is_lr(self):
        value = np.zeros(3)
        grad = np.array([1.0, -2.0, 0.5])
        new, _, _ = adam_step(value, grad, np.zeros(3), np.zeros(3), t=1, lr=1e-3)
        np.testing.assert_allclose(np.abs(new), 1e-3, rtol=1e-6)
        np.testing.assert_allclose(np.sign(new), -np.sign(grad))

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        value = rng.standard_normal(5)
        grad = rng.standard_normal(5)
        a = adam_step(value.copy(), grad, np.zeros(5), np.zeros(5), t=3, lr=0.01)
        b = adam_step(value.copy(), grad, np.zeros(5), np.zeros(5), t=3, lr=0.01)
        assert a[0].tobytes() == b[0].tobytes()

    def test_step_index_validated(self):
        with pytest.raises(ValueError):
            adam_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), t=0, lr=0.1)
