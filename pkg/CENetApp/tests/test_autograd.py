import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from CENetApp import autograd as ag
from CENetApp.autograd import Tape, backward, grad_check
from CENetApp.exceptions import BoundsError, ContractError, DimensionError, IntegrityError, LifecycleError
from CENetApp.gradient_suite import build_cases, run_gradient_suite
from CENetApp.losses import dice_loss
from CENetApp.tensor import default_dtype, load_tensors, precision, save_tensors


class ElementwiseTests(SimpleTestCase):
    def test_add(self):
        assert_array_equal(ag.add(np.array([1.0, 2.0]), np.array([3.0, 4.0])).value, [4.0, 6.0])

    def test_relu(self):
        assert_array_equal(ag.relu(np.array([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        self.assertAlmostEqual(ag.sigmoid(np.array([0.0])).item(), 0.5)

    def test_broadcast_gradient_is_summed_back(self):
        tape = Tape()
        row = tape.variable(np.array([1.0, 2.0, 3.0]))
        out = ag.sum_all(ag.mul(np.ones((4, 3)), row))
        tape.backward(out)
        assert_array_equal(row.grad, [4.0, 4.0, 4.0])

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as cm:
            ag.add(np.ones((2, 3)), np.ones((4, 3)))
        self.assertIn("[2, 3]", str(cm.exception))
        self.assertIn("[4, 3]", str(cm.exception))

    def test_log_clamps_small_inputs(self):
        self.assertTrue(np.isfinite(ag.log(np.array([0.0])).value).all())


class ReduceTests(SimpleTestCase):
    def test_sum_all(self):
        self.assertEqual(ag.reduce("sum", np.array([[1.0, 2.0], [3.0, 4.0]])).item(), 10.0)

    def test_mean_over_axis(self):
        assert_allclose(ag.reduce("mean", np.array([[1.0, 2.0], [3.0, 4.0]]), [1]).value, [1.5, 3.5])

    def test_max_exposes_argmax(self):
        out = ag.reduce("max", np.array([1.0, 5.0, 3.0]), [0])
        self.assertEqual(out.item(), 5.0)
        self.assertEqual(int(out.aux["argmax"]), 1)

    def test_max_gradient_goes_to_first_tie(self):
        tape = Tape()
        x = tape.variable(np.array([2.0, 7.0, 7.0, 1.0]))
        tape.backward(ag.reduce("max", x))
        assert_array_equal(x.grad, [0.0, 1.0, 0.0, 0.0])

    def test_invalid_axis(self):
        with self.assertRaises(DimensionError):
            ag.reduce("sum", np.ones((2, 2)), [2])


class MatmulAndShapeTests(SimpleTestCase):
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert_array_equal(ag.matmul(np.eye(2), m).value, m)

    def test_hand_product(self):
        assert_array_equal(ag.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).value, [[11.0]])

    def test_inner_dimension_mismatch(self):
        with self.assertRaises(DimensionError):
            ag.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_reshape_keeps_row_major_order(self):
        x = np.arange(6.0).reshape(2, 3)
        assert_array_equal(ag.reshape(x, (3, 2)).value.ravel(), x.ravel())

    def test_concat_channels(self):
        out = ag.concat_channels([np.ones((2, 4, 3, 3)), np.zeros((2, 4, 3, 3))])
        self.assertEqual(out.shape, (2, 8, 3, 3))

    def test_pad_zero_centre(self):
        out = ag.pad_zero(np.full((1, 1, 1, 1), 5.0), 1).value[0, 0]
        expected = np.zeros((3, 3))
        expected[1, 1] = 5.0
        assert_array_equal(out, expected)

    def test_slice_out_of_range(self):
        with self.assertRaises(BoundsError):
            ag.slice_(np.ones((2, 3)), (0, 1), (2, 4))


class BackwardTests(SimpleTestCase):
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = tape.variable(np.array([1.0, 2.0, 3.0]))
        tape.backward(ag.sum_all(x))
        assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        tape = Tape()
        x = tape.variable(np.array([1.0, 2.0, 3.0]))
        backward(ag.sum_all(ag.mul(x, x)))
        assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_fan_out_accumulates(self):
        tape = Tape()
        x = tape.variable(np.array([1.0, -1.0]))
        tape.backward(ag.sum_all(ag.add(x, x)))
        assert_array_equal(x.grad, [2.0, 2.0])

    def test_unreached_variable_reads_zero(self):
        tape = Tape()
        x = tape.variable(np.ones(3))
        y = tape.variable(np.ones(3))
        tape.backward(ag.sum_all(x))
        assert_array_equal(y.grad, np.zeros(3))

    def test_non_scalar_root(self):
        tape = Tape()
        x = tape.variable(np.ones(3))
        with self.assertRaises(ContractError):
            tape.backward(ag.relu(x))

    def test_cleared_tape_rejects_old_variables(self):
        tape = Tape()
        x = tape.variable(np.ones(3))
        out = ag.sum_all(x)
        tape.clear()
        with self.assertRaises(LifecycleError):
            tape.backward(out)
        with self.assertRaises(LifecycleError):
            ag.relu(x)

    def test_untaped_inputs_are_evaluated_eagerly(self):
        out = ag.mul(np.array([2.0]), np.array([3.0]))
        self.assertIsNone(out.tape)
        with self.assertRaises(LifecycleError):
            backward(out)

    def test_mixing_tapes(self):
        a, b = Tape().variable(np.ones(2)), Tape().variable(np.ones(2))
        with self.assertRaises(LifecycleError):
            ag.add(a, b)

    def test_custom_rule_is_executed_once(self):
        calls = []
        tape = Tape()
        x = tape.variable(np.array([1.0, 2.0]))

        def rule(g, saved):
            calls.append(1)
            return (3.0 * g,)

        y = tape.register("triple", [x], 3.0 * x.value, rule)
        tape.backward(ag.sum_all(y))
        self.assertEqual(len(calls), 1)
        assert_array_equal(x.grad, [3.0, 3.0])


class GradCheckTests(SimpleTestCase):
    def test_square_sum_is_tight(self):
        point = np.random.default_rng(3).normal(size=8)
        report = grad_check(lambda x: ag.sum_all(ag.square(x)), point)
        self.assertTrue(report["passed"])
        self.assertLessEqual(report["max_rel_error"], 1e-7)

    def test_dice_against_constant_target(self):
        rng = np.random.default_rng(4)
        target = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(np.float64)
        report = grad_check(lambda p: dice_loss(p, target), rng.uniform(0.1, 0.9, size=(1, 1, 4, 4)))
        self.assertTrue(report["passed"])

    def test_corrupted_rule_fails(self):
        def broken(x):
            tape = x.tape
            if tape is None or not x.requires_grad:
                return ag.sum_all(ag.square(x))
            y = tape.register("square", [x], x.value ** 2, lambda g, s: (g * x.value,))
            return ag.sum_all(y)

        report = grad_check(broken, np.array([1.0, 2.0, -0.5]))
        self.assertFalse(report["passed"])
        self.assertGreater(report["max_rel_error"], 0.4)

    def test_nonfinite_coordinates_are_reported(self):
        def blows_up(x):
            return ag.sum_all(ag.mul(x, np.array([np.inf, 1.0])))

        report = grad_check(blows_up, np.array([1.0, 1.0]))
        self.assertFalse(report["passed"])
        self.assertIn((0,), report["nonfinite"])

    def test_runs_in_float64(self):
        seen = []

        def record(x):
            seen.append(x.dtype)
            return ag.sum_all(x)

        grad_check(record, np.array([1.0], dtype=np.float32))
        self.assertTrue(all(d == np.float64 for d in seen))

    def test_whole_suite_passes(self):
        failed = [name for name, report in run_gradient_suite(seed=0) if not report["passed"]]
        self.assertEqual(failed, [])

    def test_suite_covers_every_bias_and_affine_input(self):
        names = [name for name, _, _ in build_cases()]
        for name in ("conv2d[b]", "transposed_conv2d[b]", "batch_norm2d[gamma]", "batch_norm2d[beta]"):
            self.assertIn(name, names)

    def test_points_lie_in_the_unit_box(self):
        positive_only = {"div[denominator]", "log"}
        for name, _, point in build_cases(seed=3):
            if name not in positive_only:
                self.assertLessEqual(np.abs(point).max(), 1.0, name)


class TensorContainerTests(SimpleTestCase):
    def test_precision_is_scoped(self):
        self.assertEqual(default_dtype(), np.float32)
        with precision(np.float64):
            self.assertEqual(default_dtype(), np.float64)
        self.assertEqual(default_dtype(), np.float32)

    def test_round_trip_is_bit_exact(self):
        rng = np.random.default_rng(0)
        tensors = {"a.weight": rng.normal(size=(2, 3, 3, 3)).astype(np.float32),
                   "a.bias": rng.normal(size=(2,)).astype(np.float32)}
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "t.cetnsr"
            save_tensors(path, tensors)
            loaded = load_tensors(path)
        self.assertEqual(list(loaded), ["a.weight", "a.bias"])
        for name, value in tensors.items():
            assert_array_equal(loaded[name], value)

    def test_truncated_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "t.cetnsr"
            save_tensors(path, {"w": np.ones((4, 4), dtype=np.float32)})
            path.write_bytes(path.read_bytes()[:-3])
            with self.assertRaises(IntegrityError):
                load_tensors(path)

    def test_bad_magic(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "t.cetnsr"
            path.write_bytes(b"NOTATENSORFILE")
            with self.assertRaises(IntegrityError):
                load_tensors(path)
