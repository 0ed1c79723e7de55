import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal
from scipy.signal import correlate2d

from CENetApp import autograd as ag
from CENetApp.autograd import Tape
from CENetApp.exceptions import ConfigurationError, ContractError
from CENetApp.nn_ops import (
    ConvSpec,
    PoolSpec,
    RunningStats,
    batch_norm2d,
    bilinear_upsample,
    conv2d,
    conv_output_size,
    influence_extent,
    max_pool2d,
    receptive_field,
    receptive_field_table,
    softmax_channels,
    transposed_conv2d,
    transposed_output_size,
)


def naive_conv(x, w, b, stride, padding, rate):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = conv_output_size(h, kh, stride, padding, rate)
    ow = conv_output_size(wd, kw, stride, padding, rate)
    out = np.zeros((n, cout, oh, ow))
    for b_ in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[b_, ci, i * stride + ky * rate, j * stride + kx * rate] * w[co, ci, ky, kx]
                    out[b_, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def naive_transposed(x, w, stride):
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    out = np.zeros((n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for i in range(h):
        for j in range(wd):
            for ci in range(cin):
                out[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += (
                    x[:, ci, i, j][:, None, None, None] * w[ci][None]
                )
    return out


class Conv2dTests(SimpleTestCase):
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 5, 5))
        assert_array_equal(conv2d(x, np.ones((1, 1, 1, 1)), None).value, x)

    def test_all_ones_with_padding(self):
        out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), None, ConvSpec.square(1, 1, 3, 1, 1)).value
        assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_rate_three_samples_corners_edges_and_centre(self):
        x = np.arange(49.0).reshape(1, 1, 7, 7)
        w = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        out = conv2d(x, w, None, ConvSpec.square(1, 1, 3, 1, 0, 3)).value
        self.assertEqual(out.shape, (1, 1, 1, 1))
        taps = x[0, 0, ::3, ::3]
        self.assertEqual(out.item(), float((taps * w[0, 0]).sum()))

    def test_matches_nested_loops_on_random_geometries(self):
        rng = np.random.default_rng(42)
        checked = 0
        while checked < 200:
            n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
            h, wd = rng.integers(1, 10, size=2)
            k, s, p, r = rng.integers(1, 4), rng.integers(1, 4), rng.integers(0, 3), rng.integers(1, 6)
            if conv_output_size(h, k, s, p, r) < 1 or conv_output_size(wd, k, s, p, r) < 1:
                continue
            # integer-valued data keeps every partial sum exact in 64-bit
            x = rng.integers(-4, 5, size=(n, cin, h, wd)).astype(np.float64)
            w = rng.integers(-3, 4, size=(cout, cin, k, k)).astype(np.float64)
            b = rng.integers(-2, 3, size=(cout,)).astype(np.float64) if rng.uniform() < 0.5 else None
            spec = ConvSpec.square(cin, cout, k, s, p, r)
            assert_array_equal(conv2d(x, w, b, spec).value, naive_conv(x, w, b, s, p, r),
                               err_msg=f"{spec} on {x.shape}")
            checked += 1

    def test_rate_one_is_standard_correlation(self):
        rng = np.random.default_rng(1)
        x = rng.integers(-5, 6, size=(1, 1, 8, 6)).astype(np.float64)
        w = rng.integers(-3, 4, size=(1, 1, 3, 3)).astype(np.float64)
        out = conv2d(x, w, None, ConvSpec.square(1, 1, 3)).value[0, 0]
        assert_array_equal(out, correlate2d(x[0, 0], w[0, 0], mode="valid"))

    def test_output_below_one_pixel(self):
        with self.assertRaises(ConfigurationError):
            conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), None, ConvSpec.square(1, 1, 3, 1, 0, 3))


class TransposedConvTests(SimpleTestCase):
    def test_single_tap_spreads_to_block(self):
        out = transposed_conv2d(np.full((1, 1, 1, 1), 2.5), np.ones((1, 1, 2, 2)), None, stride=2).value
        assert_array_equal(out, np.full((1, 1, 2, 2), 2.5))

    def test_overlapping_taps_accumulate(self):
        rng = np.random.default_rng(2)
        x = rng.integers(-3, 4, size=(1, 2, 2, 2)).astype(np.float64)
        w = rng.integers(-3, 4, size=(2, 3, 3, 3)).astype(np.float64)
        out = transposed_conv2d(x, w, None, stride=2).value
        self.assertEqual(out.shape, (1, 3, 5, 5))
        assert_array_equal(out, naive_transposed(x, w, 2))

    def test_output_size_formula(self):
        self.assertEqual(transposed_output_size(8, 3, 2, 1, 1), 16)
        out = transposed_conv2d(np.ones((1, 4, 8, 8)), np.ones((4, 2, 3, 3)), None, 2, 1, 1)
        self.assertEqual(out.shape, (1, 2, 16, 16))

    def test_is_the_adjoint_of_conv2d(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        y = rng.normal(size=(2, 4, 4, 4))
        lhs = np.sum(conv2d(x, w, None, ConvSpec.square(3, 4, 3, 2, 1)).value * y)
        rhs = np.sum(x * transposed_conv2d(y, w, None, 2, 1, 1).value)
        self.assertAlmostEqual(lhs, rhs, places=9)

    def test_invalid_output_padding(self):
        with self.assertRaises(ConfigurationError):
            transposed_conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), None, stride=1, output_padding=1)


class MaxPoolTests(SimpleTestCase):
    def test_two_by_two(self):
        out = max_pool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), PoolSpec.square(2))
        assert_array_equal(out.value, [[[[4.0]]]])

    def test_constant_input_routes_gradient_to_first_tap(self):
        tape = Tape()
        x = tape.variable(np.full((1, 1, 6, 6), 3.0), requires_grad=True)
        out = max_pool2d(x, PoolSpec.square(3))
        assert_array_equal(out.value, np.full((1, 1, 2, 2), 3.0))
        tape.backward(ag.sum_all(out))
        expected = np.zeros((6, 6))
        expected[::3, ::3] = 1.0
        assert_array_equal(x.grad[0, 0], expected)
        assert_array_equal(out.aux["argmax"], np.zeros((1, 1, 2, 2)))

    def test_floor_division_of_size(self):
        self.assertEqual(max_pool2d(np.ones((1, 1, 14, 14)), PoolSpec.square(6)).shape, (1, 1, 2, 2))

    def test_padding_reads_minus_infinity(self):
        x = -np.ones((1, 1, 2, 2))
        out = max_pool2d(x, PoolSpec.square(3, 2, 1)).value
        assert_array_equal(out, [[[[-1.0]]]])

    def test_kernel_larger_than_input(self):
        with self.assertRaises(ConfigurationError):
            max_pool2d(np.ones((1, 1, 2, 2)), PoolSpec.square(3))


class BilinearTests(SimpleTestCase):
    def test_same_size_is_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 2, 5, 4))
        assert_allclose(bilinear_upsample(x, (5, 4)).value, x, atol=1e-12)

    def test_single_pixel_extends_constant(self):
        assert_allclose(bilinear_upsample(np.full((1, 1, 1, 1), 7.0), (5, 3)).value, np.full((1, 1, 5, 3), 7.0))

    def test_two_to_four_hand_evaluation(self):
        x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
        # half-pixel sources -0.25 (clamped), 0.25, 0.75, 1.25 (clamped tap)
        a = np.array([[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]])
        assert_allclose(bilinear_upsample(x, (4, 4)).value[0, 0], a @ x[0, 0] @ a.T, atol=1e-12)


class BatchNormTests(SimpleTestCase):
    def _stats(self, c):
        return RunningStats(np.zeros(c), np.ones(c))

    def test_constant_channel_normalizes_to_zero(self):
        out = batch_norm2d(np.full((2, 1, 3, 3), 4.0), np.ones(1), np.zeros(1), self._stats(1), mode="train")
        self.assertLessEqual(np.abs(out.value).max(), 1e-6)

    def test_zero_gamma_gives_beta(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        beta = np.array([0.5, -1.0, 2.0])
        out = batch_norm2d(x, np.zeros(3), beta, self._stats(3), mode="train")
        assert_allclose(out.value, np.broadcast_to(beta[None, :, None, None], x.shape))

    def test_train_mode_statistics_and_running_update(self):
        x = np.random.default_rng(1).normal(2.0, 3.0, size=(4, 2, 5, 5))
        stats = self._stats(2)
        out = batch_norm2d(x, np.ones(2), np.zeros(2), stats, mode="train").value
        assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        m = 4 * 5 * 5
        assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
        assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))

    def test_eval_mode_uses_running_statistics(self):
        x = np.random.default_rng(2).normal(size=(1, 2, 3, 3))
        stats = RunningStats(np.array([1.0, -1.0]), np.array([4.0, 0.25]))
        out = batch_norm2d(x, np.ones(2), np.zeros(2), stats, mode="eval").value
        expected = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
        assert_allclose(out, expected)

    def test_single_value_batch(self):
        with self.assertRaises(ContractError):
            batch_norm2d(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), self._stats(2), mode="train")

    def test_update_callback(self):
        seen = []
        stats = RunningStats(np.zeros(1), np.ones(1), on_update=lambda m, v: seen.append((m, v)))
        batch_norm2d(np.arange(4.0).reshape(1, 1, 2, 2), np.ones(1), np.zeros(1), stats, mode="train")
        self.assertEqual(len(seen), 1)


class SoftmaxTests(SimpleTestCase):
    def test_equal_logits(self):
        assert_allclose(softmax_channels(np.zeros((1, 2, 2, 2))).value, np.full((1, 2, 2, 2), 0.5))

    def test_closed_form(self):
        logits = np.array([0.0, np.log(3.0)]).reshape(1, 2, 1, 1)
        assert_allclose(softmax_channels(logits).value.ravel(), [0.25, 0.75])

    def test_single_channel_is_rejected(self):
        with self.assertRaises(ContractError):
            softmax_channels(np.zeros((1, 1, 2, 2)))


class ReceptiveFieldTests(SimpleTestCase):
    def test_single_conv(self):
        self.assertEqual(receptive_field([ConvSpec.square(1, 1, 3)])["rf"], 3)

    def test_cascade_of_rates(self):
        chain = [ConvSpec.square(1, 1, 3, 1, 1, 1), ConvSpec.square(1, 1, 3, 1, 3, 3),
                 ConvSpec.square(1, 1, 3, 1, 5, 5), ConvSpec.square(1, 1, 1)]
        self.assertEqual(receptive_field(chain)["rf"], 19)
        self.assertEqual([r["rf"] for r in receptive_field_table(chain)], [3, 9, 19, 19])
        self.assertEqual(influence_extent(chain), 19)

    def test_stem_conv_and_pool(self):
        chain = [ConvSpec.square(1, 1, 7, 2, 3), PoolSpec.square(3, 2, 1)]
        self.assertEqual(receptive_field(chain), {"rf": 11, "jump": 4})
        self.assertEqual(influence_extent(chain), 11)

    def test_empty_chain(self):
        with self.assertRaises(ContractError):
            receptive_field([])
