import os
import struct
import tempfile

import numpy as np
from django.test import SimpleTestCase

from tensors.exceptions import ShapeError, TensorFormatError, ParameterError
from tensors.io import HEADER, MAGIC, read_tensor, write_tensor, tensor_to_bytes, tensor_from_bytes
from tensors.ops import (
    BilinearOp, as_tensor, conv2d, matmul, max_pool2d, max_pool2d_grad, relative_error,
)


def naive_matmul(w, x):
    m, n = w.shape
    p = x.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            for k in range(n):
                out[i, j] += w[i, k] * x[k, j]
    return out


def naive_conv2d(w, x, stride, padding):
    co, ci, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = (padded.shape[1] - kh) // stride + 1
    out_w = (padded.shape[2] - kw) // stride + 1
    out = np.zeros((co, out_h, out_w))
    for o in range(co):
        for p in range(out_h):
            for q in range(out_w):
                for c in range(ci):
                    for k in range(kh):
                        for l in range(kw):
                            out[o, p, q] += w[o, c, k, l] * padded[c, p * stride + k, q * stride + l]
    return out


class MatmulTests(SimpleTestCase):
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), x), x)

    def test_projector(self):
        result = matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0], [7.0]])
        np.testing.assert_array_equal(result, [[5.0], [0.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 3))
        x = rng.normal(size=(3, 2))
        self.assertLessEqual(relative_error(matmul(w, x), naive_matmul(w, x)), 1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_result_is_read_only(self):
        result = matmul(np.eye(2), np.ones((2, 1)))
        with self.assertRaises(ValueError):
            result[0, 0] = 3.0


class Conv2dTests(SimpleTestCase):
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 4, 4))
        np.testing.assert_array_equal(conv2d(np.ones((1, 1, 1, 1)), x), x)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 5, 5))
        result = conv2d(np.zeros((3, 2, 3, 3)), x, padding=1)
        np.testing.assert_array_equal(result, np.zeros((3, 5, 5)))

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(2, 1, 3, 3))
        x = rng.normal(size=(1, 5, 5))
        self.assertLessEqual(relative_error(conv2d(w, x), naive_conv2d(w, x, 1, 0)), 1e-12)

    def test_matches_naive_loops_with_stride_and_padding(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 2, 3, 3))
        x = rng.normal(size=(2, 7, 7))
        self.assertLessEqual(relative_error(conv2d(w, x, 2, 1), naive_conv2d(w, x, 2, 1)), 1e-12)

    def test_non_integral_output_rejected(self):
        with self.assertRaises(ShapeError):
            conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 5, 5)), stride=2)

    def test_kernel_larger_than_input_rejected(self):
        with self.assertRaises(ShapeError):
            conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 3, 3)))

    def test_invalid_stride(self):
        with self.assertRaises(ParameterError):
            conv2d(np.ones((1, 1, 1, 1)), np.ones((1, 3, 3)), stride=0)


class BilinearOpTests(SimpleTestCase):
    cases = [
        (BilinearOp.matmul(), (4, 6), (6, 1)),
        (BilinearOp.conv2d(stride=1, padding=1), (3, 2, 3, 3), (2, 6, 6)),
        (BilinearOp.conv2d(stride=2, padding=0), (2, 2, 3, 3), (2, 7, 7)),
    ]

    def test_bilinearity(self):
        rng = np.random.default_rng(5)
        for op, w_shape, x_shape in self.cases:
            w = rng.uniform(-1e3, 1e3, size=w_shape)
            x1 = rng.uniform(-1e3, 1e3, size=x_shape)
            x2 = rng.uniform(-1e3, 1e3, size=x_shape)
            a, b = rng.uniform(-1e3, 1e3, size=2)
            combined = op.apply(w, a * x1 + b * x2)
            separate = a * op.apply(w, x1) + b * op.apply(w, x2)
            self.assertLessEqual(relative_error(combined, separate), 1e-10, op)

    def test_gradients_are_adjoint(self):
        # <op(w, x), d> == <w, weight_grad(d, x)> == <x, input_grad(w, d)>
        rng = np.random.default_rng(6)
        for op, w_shape, x_shape in self.cases:
            w = rng.normal(size=w_shape)
            x = rng.normal(size=x_shape)
            y = op.apply(w, x)
            delta = rng.normal(size=y.shape)
            expected = float(np.sum(y * delta))
            self.assertAlmostEqual(float(np.sum(w * op.weight_grad(delta, x))), expected, places=9)
            self.assertAlmostEqual(float(np.sum(x * op.input_grad(w, delta, x.shape))), expected, places=9)

    def test_unknown_kind(self):
        with self.assertRaises(ParameterError):
            BilinearOp('fft')


class MaxPoolTests(SimpleTestCase):
    def test_ties_go_to_first_index(self):
        x = np.ones((1, 2, 2))
        pooled, argmax = max_pool2d(x, 2, 2)
        np.testing.assert_array_equal(pooled, [[[1.0]]])
        np.testing.assert_array_equal(argmax, [[[0]]])

    def test_gradient_routes_to_maximum(self):
        x = np.array([[[1.0, 5.0, 2.0, 0.0], [3.0, 4.0, 7.0, 1.0]]])
        pooled, argmax = max_pool2d(x, 2, 2)
        np.testing.assert_array_equal(pooled, [[[5.0, 7.0]]])
        grad = max_pool2d_grad(np.array([[[10.0, 20.0]]]), argmax, x.shape, 2, 2)
        expected = np.zeros_like(x)
        expected[0, 0, 1] = 10.0
        expected[0, 1, 2] = 20.0
        np.testing.assert_array_equal(grad, expected)


class RelativeErrorTests(SimpleTestCase):
    def test_scaled_by_expected(self):
        self.assertAlmostEqual(relative_error([2.0, 4.1], [2.0, 4.0]), 0.025)

    def test_zero_reference_falls_back_to_absolute(self):
        self.assertEqual(relative_error([0.5], [0.0]), 0.5)

    def test_non_finite_rejected(self):
        with self.assertRaises(ParameterError):
            as_tensor([1.0, np.nan])


class TensorIOTests(SimpleTestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)

    def path(self, name):
        return os.path.join(self.tmpdir.name, name)

    def test_round_trip_is_bit_exact(self):
        tensor = np.random.default_rng(7).normal(scale=1e6, size=(3, 4, 2))
        write_tensor(tensor, self.path('t.dkt'))
        loaded = read_tensor(self.path('t.dkt'))
        self.assertEqual(loaded.shape, tensor.shape)
        self.assertEqual(loaded.tobytes(), tensor.tobytes())

    def test_scalar_round_trip(self):
        write_tensor(np.float64(np.pi), self.path('s.dkt'))
        loaded = read_tensor(self.path('s.dkt'))
        self.assertEqual(loaded.shape, ())
        self.assertEqual(float(loaded), np.pi)

    def test_float32_storage(self):
        tensor = np.array([0.1, 1.0 / 3.0, -2.5e10])
        stored = tensor.astype(np.float32)
        loaded = tensor_from_bytes(tensor_to_bytes(tensor, dtype='float32'))
        self.assertEqual(loaded.dtype, np.float64)
        np.testing.assert_array_equal(loaded, stored.astype(np.float64))
        np.testing.assert_array_equal(tensor_from_bytes(tensor_to_bytes(loaded, dtype='float32')), loaded)

    def test_header_layout(self):
        data = tensor_to_bytes(np.zeros((2, 3)))
        self.assertEqual(data[:8], b'DKTENSOR')
        self.assertEqual(data[8], 1)
        self.assertEqual(data[9], 1)
        self.assertEqual(int.from_bytes(data[10:12], 'little'), 2)
        self.assertEqual(len(data), 12 + 2 * 8 + 6 * 8)

    def test_bad_magic(self):
        data = bytearray(tensor_to_bytes(np.ones(3)))
        data[:8] = b'NOTATENS'
        with self.assertRaises(TensorFormatError):
            tensor_from_bytes(bytes(data))

    def test_truncated_payload(self):
        data = tensor_to_bytes(np.ones((4, 4)))
        with self.assertRaises(TensorFormatError):
            tensor_from_bytes(data[:-3])
        with self.assertRaises(TensorFormatError):
            tensor_from_bytes(data[:5])

    def test_payload_length_mismatch(self):
        with self.assertRaises(TensorFormatError):
            tensor_from_bytes(tensor_to_bytes(np.ones(2)) + b'\x00' * 8)

    def test_huge_dimensions_without_payload(self):
        data = HEADER.pack(MAGIC, 1, 1, 2) + struct.pack('<2Q', 2 ** 32, 2 ** 32)
        with self.assertRaises(TensorFormatError):
            tensor_from_bytes(data)

    def test_stored_infinity_rejected(self):
        data = HEADER.pack(MAGIC, 1, 1, 1) + struct.pack('<Q', 2) + struct.pack('<2d', np.inf, 1.0)
        with self.assertRaises(TensorFormatError):
            tensor_from_bytes(data)

    def test_float32_overflow_rejected(self):
        with self.assertRaises(TensorFormatError):
            tensor_to_bytes(np.array([1e39, 1.0]), dtype='float32')
        with self.assertRaises(TensorFormatError):
            write_tensor(np.array([-1e39]), self.path('big.dkt'), dtype='float32')
        self.assertFalse(os.path.exists(self.path('big.dkt')))

    def test_unknown_storage_dtype(self):
        with self.assertRaises(TensorFormatError):
            tensor_to_bytes(np.ones(2), dtype='float16')
