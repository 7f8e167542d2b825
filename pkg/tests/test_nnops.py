import math

import numpy as np
import numpy.testing as npt
import pytest

from diffumamba import tensor as T
from diffumamba.gradcheck import finite_difference_check
from diffumamba.nnops import (ConvParams, ConvTransposeParams, adaptive_avg_pool3d,
                              conv3d, conv_output_shape, conv_transpose3d,
                              dice_ce_loss, init_conv, init_conv_transpose,
                              instance_norm, leaky_relu, relu, silu, softmax)
from diffumamba.tensor import NumericError, Rng, ShapeError, Tensor


def _conv(weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    return ConvParams(weight=Tensor(weight, requires_grad=True),
                      bias=None if bias is None else Tensor(bias, requires_grad=True),
                      stride=stride, padding=padding)


class TestConv3d:
    def test_identity_kernel(self, rng):
        c = 3
        w = np.zeros((c, c, 1, 1, 1), dtype=np.float32)
        for i in range(c):
            w[i, i, 0, 0, 0] = 1.0
        x = Tensor(rng.normal((2, c, 4, 4, 4)))
        out = conv3d(x, _conv(w, np.zeros(c)))
        npt.assert_array_equal(out.data, x.data)

    def test_all_ones_kernel_interior_sum(self):
        c_in = 2
        x = Tensor(np.ones((1, c_in, 5, 5, 5), dtype=np.float32))
        w = np.ones((1, c_in, 3, 3, 3), dtype=np.float32)
        out = conv3d(x, _conv(w, padding=(1, 1, 1)))
        # interior voxel sees the full 3^3 window over every channel
        assert out.data[0, 0, 2, 2, 2] == 27.0 * c_in
        # corner voxel (zero padding) sees only 2^3
        assert out.data[0, 0, 0, 0, 0] == 8.0 * c_in

    def test_direct_sum_oracle(self, rng):
        x = rng.normal((1, 2, 4, 4, 4), dtype=np.float64)
        w = rng.normal((3, 2, 3, 3, 3), dtype=np.float64)
        out = conv3d(Tensor(x, dtype=np.float64),
                     ConvParams(Tensor(w, dtype=np.float64), None,
                                stride=(1, 1, 1), padding=(1, 1, 1)))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        expect = np.zeros((1, 3, 4, 4, 4))
        for o in range(3):
            for d in range(4):
                for h in range(4):
                    for wi in range(4):
                        expect[0, o, d, h, wi] = (
                            xp[0, :, d:d + 3, h:h + 3, wi:wi + 3] * w[o]).sum()
        npt.assert_allclose(out.data, expect, rtol=1e-10)

    def test_output_shape_formula_and_stride(self):
        assert conv_output_shape((8, 9, 10), (3, 3, 3), (2, 2, 2), (1, 1, 1)) == (4, 5, 5)

    def test_degenerate_extent_raises(self):
        with pytest.raises(ShapeError, match="degenerate"):
            conv_output_shape((2, 2, 2), (5, 5, 5), (1, 1, 1), (0, 0, 0))

    def test_channel_mismatch(self, rng):
        p = _conv(rng.normal((2, 3, 1, 1, 1)))
        with pytest.raises(ShapeError, match="channel mismatch"):
            conv3d(Tensor(rng.normal((1, 4, 2, 2, 2))), p)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_same_padding_preserves_shape(self, rng, k):
        p = init_conv(rng, 2, 2, (k, k, k))
        out = conv3d(Tensor(rng.normal((1, 2, 6, 6, 6))), p)
        assert out.shape == (1, 2, 6, 6, 6)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradients_f32(self, seed):
        r = Rng(seed, "conv")
        x = Tensor(r.normal((1, 2, 4, 4, 4)), requires_grad=True)
        p = init_conv(r, 2, 3, (3, 3, 3), stride=(2, 2, 2))
        rel, _ = finite_difference_check(lambda: conv3d(x, p),
                                         [x, p.weight, p.bias], rel_tol=1e-3, seed=seed)
        assert rel < 1e-3

    def test_gradients_f64(self, f64_mode):
        r = Rng(3, "conv64")
        x = Tensor(r.normal((1, 2, 4, 4, 4)), requires_grad=True)
        p = init_conv(r, 2, 2, (3, 3, 3))
        rel, _ = finite_difference_check(lambda: conv3d(x, p),
                                         [x, p.weight, p.bias], rel_tol=1e-6, seed=1)
        assert rel < 1e-6


class TestConvTranspose3d:
    def test_shape_doubles(self, rng):
        p = init_conv_transpose(rng, 4, 2, (2, 2, 2))
        out = conv_transpose3d(Tensor(rng.normal((1, 4, 3, 3, 3))), p)
        assert out.shape == (1, 2, 6, 6, 6)

    def test_block_expansion_oracle(self, rng):
        # kernel == stride: each input voxel paints a disjoint 2^3 block
        x = rng.normal((1, 2, 2, 2, 2), dtype=np.float64)
        w = rng.normal((2, 3, 2, 2, 2), dtype=np.float64)
        p = ConvTransposeParams(Tensor(w, dtype=np.float64), None, stride=(2, 2, 2))
        out = conv_transpose3d(Tensor(x, dtype=np.float64), p)
        for o in range(3):
            for d in range(2):
                for h in range(2):
                    for wi in range(2):
                        block = np.einsum("c,cijk->ijk", x[0, :, d, h, wi], w[:, o])
                        npt.assert_allclose(
                            out.data[0, o, 2 * d:2 * d + 2, 2 * h:2 * h + 2,
                                     2 * wi:2 * wi + 2], block, rtol=1e-12)

    def test_kernel_must_equal_stride(self, rng):
        p = ConvTransposeParams(Tensor(rng.normal((2, 2, 3, 3, 3))), None, stride=(2, 2, 2))
        with pytest.raises(ShapeError, match="kernel == stride"):
            conv_transpose3d(Tensor(rng.normal((1, 2, 2, 2, 2))), p)

    def test_gradients(self, f64_mode):
        r = Rng(9, "up")
        x = Tensor(r.normal((1, 3, 2, 2, 2)), requires_grad=True)
        p = init_conv_transpose(r, 3, 2, (2, 2, 2))
        rel, _ = finite_difference_check(lambda: conv_transpose3d(x, p),
                                         [x, p.weight, p.bias], rel_tol=1e-6, seed=2)
        assert rel < 1e-6


class TestInstanceNorm:
    def _affine(self, c):
        return Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True)

    def test_constant_slice_becomes_zero(self):
        g, b = self._affine(2)
        x = Tensor(np.full((1, 2, 3, 3, 3), 7.0, dtype=np.float32))
        out = instance_norm(x, g, b)
        npt.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_already_normalized_fixed_point(self):
        g, b = self._affine(1)
        x = np.zeros((1, 1, 1, 1, 2), dtype=np.float64)
        x[..., 0], x[..., 1] = -1.0, 1.0
        out = instance_norm(Tensor(x, dtype=np.float64), g, b, eps=1e-12)
        npt.assert_allclose(out.data, x, atol=1e-6)

    def test_moments_oracle(self, rng):
        g, b = self._affine(3)
        x = Tensor(rng.normal((2, 3, 4, 4, 4)) * 5 + 2)
        out = instance_norm(x, g, b).data
        for bi in range(2):
            for ci in range(3):
                sl = out[bi, ci]
                assert abs(sl.mean()) < 1e-5
                assert abs(sl.var() - 1.0) < 1e-3

    def test_spatial_size_one_passthrough(self):
        g, b = self._affine(2)
        x = Tensor(np.full((1, 2, 1, 1, 1), 3.0, dtype=np.float32))
        out = instance_norm(x, g, b)
        npt.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_gradients(self, f64_mode):
        r = Rng(5, "in")
        x = Tensor(r.normal((1, 2, 3, 3, 3)), requires_grad=True)
        g = Tensor(np.ones(2) * 1.3, requires_grad=True)
        b = Tensor(np.full(2, 0.2), requires_grad=True)
        rel, _ = finite_difference_check(lambda: instance_norm(x, g, b),
                                         [x, g, b], rel_tol=1e-6, seed=4)
        assert rel < 1e-6


class TestActivations:
    def test_leaky_relu_formula(self):
        out = leaky_relu(Tensor([-1.0, 0.0, 2.0]), alpha=0.01)
        npt.assert_allclose(out.data, [-0.01, 0.0, 2.0], rtol=1e-6)

    def test_silu_zero(self):
        assert silu(Tensor([0.0])).data[0] == 0.0

    def test_silu_formula(self, rng):
        x = rng.normal((10,), dtype=np.float64)
        out = silu(Tensor(x, dtype=np.float64))
        npt.assert_allclose(out.data, x / (1 + np.exp(-x)), rtol=1e-10)

    def test_softmax_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]), axis=0)
        npt.assert_allclose(out.data, [0.5, 0.5], rtol=1e-6)

    def test_softmax_rows_sum_to_one(self, rng):
        out = softmax(Tensor(rng.normal((4, 7)) * 10), axis=1)
        npt.assert_allclose(out.data.sum(axis=1), 1.0, rtol=1e-5)

    def test_softmax_rejects_non_finite(self):
        x = Tensor([0.0, 1.0])
        x.data[0] = np.inf
        with pytest.raises(NumericError, match="finite"):
            softmax(x, axis=0)

    def test_relu_clamps(self, rng):
        x = rng.normal((20,))
        out = relu(Tensor(x))
        npt.assert_array_equal(out.data, np.maximum(x, 0))


class TestAdaptivePool:
    def test_constant_input(self):
        x = Tensor(np.full((1, 2, 4, 4, 4), 3.5, dtype=np.float32))
        out = adaptive_avg_pool3d(x, (2, 2, 2))
        npt.assert_allclose(out.data, 3.5, rtol=1e-6)

    def test_1d_window_mean_oracle(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(1, 1, 1, 1, 4))
        out = adaptive_avg_pool3d(x, (1, 1, 2))
        npt.assert_allclose(out.data.ravel(), [1.5, 3.5], rtol=1e-6)

    def test_identity_when_target_equals_source(self, rng):
        x = Tensor(rng.normal((1, 2, 3, 4, 5)))
        out = adaptive_avg_pool3d(x, (3, 4, 5))
        npt.assert_array_equal(out.data, x.data)

    def test_target_exceeding_source_raises(self, rng):
        with pytest.raises(ShapeError, match="target"):
            adaptive_avg_pool3d(Tensor(rng.normal((1, 1, 2, 2, 2))), (3, 2, 2))

    def test_uneven_partition_window_rule(self):
        # size 5 -> 2: windows [0,3) and [2,5) per floor/ceil rule
        vals = np.arange(5.0, dtype=np.float64)
        x = Tensor(vals.reshape(1, 1, 1, 1, 5), dtype=np.float64)
        out = adaptive_avg_pool3d(x, (1, 1, 2))
        npt.assert_allclose(out.data.ravel(),
                            [vals[0:3].mean(), vals[2:5].mean()], rtol=1e-12)

    @pytest.mark.parametrize("target", [(2, 2, 2), (3, 2, 4)])
    def test_gradients(self, f64_mode, target):
        r = Rng(6, "pool")
        x = Tensor(r.normal((1, 2, 6, 4, 4)), requires_grad=True)
        rel, _ = finite_difference_check(lambda: adaptive_avg_pool3d(x, target),
                                         [x], rel_tol=1e-6, seed=3)
        assert rel < 1e-6


class TestDiceCeLoss:
    def test_saturated_prediction_drives_loss_to_zero(self):
        labels = np.zeros((1, 2, 2, 2), dtype=np.int64)
        labels[0, 0] = 1
        logits = np.zeros((1, 2, 2, 2, 2), dtype=np.float32)
        # margin 20 toward the true class everywhere
        logits[0, 1][labels[0] == 1] = 20.0
        logits[0, 0][labels[0] == 0] = 20.0
        lv = dice_ce_loss(Tensor(logits), labels)
        assert lv.total.item() < 1e-3

    def test_uniform_logits_ce_is_ln2(self):
        labels = np.zeros((1, 2, 2, 2), dtype=np.int64)
        labels[0, 0, 0, 0] = 1
        lv = dice_ce_loss(T.zeros((1, 2, 2, 2, 2)), labels)
        assert abs(lv.ce_part.item() - math.log(2.0)) < 1e-6

    def test_total_is_exact_sum(self, rng):
        labels = (rng.random((2, 4, 4, 4)) > 0.7).astype(np.int64)
        lv = dice_ce_loss(Tensor(rng.normal((2, 2, 4, 4, 4))), labels)
        assert lv.total.item() == lv.dice_part.item() + lv.ce_part.item()

    def test_one_hot_prediction_dice_near_one(self):
        labels = np.zeros((1, 3, 3, 3), dtype=np.int64)
        labels[0, :2] = 1
        logits = np.full((1, 2, 3, 3, 3), -30.0, dtype=np.float32)
        logits[0, 1][labels[0] == 1] = 30.0
        logits[0, 0][labels[0] == 0] = 30.0
        lv = dice_ce_loss(Tensor(logits), labels)
        assert lv.dice_part.item() < 1e-4   # dice of perfect match is 1 - O(eps)

    def test_out_of_range_label_raises(self, rng):
        labels = np.full((1, 2, 2, 2), 5, dtype=np.int64)
        with pytest.raises(ValueError, match="label"):
            dice_ce_loss(Tensor(rng.normal((1, 2, 2, 2, 2))), labels)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradients_f32(self, seed):
        r = Rng(seed, "loss")
        labels = (r.random((1, 3, 3, 3)) > 0.6).astype(np.int64)
        x = Tensor(r.normal((1, 2, 3, 3, 3)), requires_grad=True)
        rel, _ = finite_difference_check(lambda: dice_ce_loss(x, labels).total,
                                         [x], rel_tol=1e-3, seed=seed)
        assert rel < 1e-3

    def test_gradients_f64(self, f64_mode):
        r = Rng(11, "loss64")
        labels = (r.random((1, 3, 3, 3)) > 0.6).astype(np.int64)
        x = Tensor(r.normal((1, 3, 3, 3, 3)), requires_grad=True)
        rel, _ = finite_difference_check(lambda: dice_ce_loss(x, labels).total,
                                         [x], rel_tol=1e-6, seed=8)
        assert rel < 1e-6

    def test_needs_two_classes(self, rng):
        with pytest.raises(ShapeError, match="classes"):
            dice_ce_loss(Tensor(rng.normal((1, 1, 2, 2, 2))),
                         np.zeros((1, 2, 2, 2), dtype=np.int64))
