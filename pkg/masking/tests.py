import numpy as np
from django.test import SimpleTestCase

from masking.blinding import (
    BlindingKey, CodedBatch, NoiseSpec, blind, coefficient_ratio_sq, generate_blinding_key, unblind,
)
from masking.sampling import gaussian, philox, random_orthogonal
from tensors.exceptions import KeyMaterialError, ParameterError, ProtocolError, ShapeError
from tensors.ops import BilinearOp, relative_error


def round_trip_error(op, w, xs, key):
    batch = blind(xs, key)
    outputs = [op.apply(w, x) for x in batch]
    recovered = unblind(outputs, key)
    return max(relative_error(y, op.apply(w, x)) for y, x in zip(recovered, xs))


class SamplingTests(SimpleTestCase):
    def test_orthogonal(self):
        for n in range(1, 10):
            q = random_orthogonal(philox(n), n)
            np.testing.assert_allclose(q @ q.T, np.eye(n), atol=1e-12)

    def test_gaussian_moments(self):
        samples = gaussian(philox(11), (400, 500), mean=3.0, variance=4.0)
        self.assertAlmostEqual(samples.mean(), 3.0, delta=0.02)
        self.assertAlmostEqual(samples.var(), 4.0, delta=0.08)

    def test_odd_sample_count(self):
        self.assertEqual(gaussian(philox(1), (3, 3)).shape, (3, 3))

    def test_non_positive_variance(self):
        with self.assertRaises(ParameterError):
            gaussian(philox(1), (2,), variance=0.0)


class GenerateBlindingKeyTests(SimpleTestCase):
    noise = NoiseSpec(mean=0.0, variance=1.0, seed=5)

    def test_orthogonal_key_is_perfectly_conditioned(self):
        key = generate_blinding_key(1, (3,), self.noise, rng_seed=42)
        self.assertEqual(key.a.shape, (2, 2))
        self.assertLessEqual(key.condition_number() - 1, 1e-8)
        self.assertLessEqual(np.max(np.abs(key.a @ key.a_inv - np.eye(2))), 1e-10)

    def test_deterministic(self):
        first = generate_blinding_key(3, (2, 4), self.noise, rng_seed=9)
        second = generate_blinding_key(3, (2, 4), self.noise, rng_seed=9)
        self.assertEqual(first.a.tobytes(), second.a.tobytes())
        self.assertEqual(first.noise.tobytes(), second.noise.tobytes())

    def test_different_seeds_differ(self):
        first = generate_blinding_key(3, (4,), self.noise, rng_seed=1)
        second = generate_blinding_key(3, (4,), self.noise, rng_seed=2)
        self.assertFalse(np.array_equal(first.a, second.a))

    def test_noise_variance(self):
        key = generate_blinding_key(4, (100000,), NoiseSpec(0.0, 9e8, seed=3), rng_seed=8)
        self.assertEqual(key.noise.shape, (100000,))
        self.assertLess(abs(key.noise.var() / 9e8 - 1), 0.05)

    def test_noise_matches_input_shape(self):
        key = generate_blinding_key(2, (3, 5, 5), self.noise, rng_seed=1)
        self.assertEqual(key.input_shape, (3, 5, 5))

    def test_zero_batch_rejected(self):
        with self.assertRaises(ParameterError):
            generate_blinding_key(0, (3,), self.noise, rng_seed=1)

    def test_non_positive_noise_variance_rejected(self):
        with self.assertRaises(ParameterError):
            NoiseSpec(variance=-1.0)

    def test_singular_matrix_rejected(self):
        with self.assertRaises(KeyMaterialError):
            generate_blinding_key(1, (3,), self.noise, rng_seed=1, a=[[1.0, 2.0], [2.0, 4.0]])

    def test_prescribed_condition_number(self):
        key = generate_blinding_key(3, (4,), self.noise, rng_seed=1, condition_number=1e3)
        self.assertAlmostEqual(key.condition_number() / 1e3, 1.0, places=6)

    def test_integrity_row(self):
        key = generate_blinding_key(3, (4,), self.noise, rng_seed=1, integrity=True)
        self.assertEqual(key.a.shape, (5, 4))
        self.assertTrue(key.integrity)
        self.assertAlmostEqual(np.linalg.norm(key.a[4]), 1.0)

    def test_secrets_not_in_repr(self):
        key = generate_blinding_key(1, (2,), self.noise, rng_seed=1)
        self.assertNotIn('a_inv', repr(key))
        self.assertNotIn('noise', repr(key))


class BlindTests(SimpleTestCase):
    noise = NoiseSpec(variance=4.0, seed=2)

    def test_identity_mask(self):
        x = np.array([1.0, -2.0, 3.0])
        key = generate_blinding_key(1, (3,), self.noise, rng_seed=4, a=np.eye(2))
        batch = blind([x], key)
        np.testing.assert_array_equal(batch.blinded[0], x)
        np.testing.assert_array_equal(batch.blinded[1], key.noise)

    def test_zero_inputs_leave_scaled_noise(self):
        key = generate_blinding_key(3, (2, 2), self.noise, rng_seed=6)
        batch = blind([np.zeros((2, 2))] * 3, key)
        for i, blinded in enumerate(batch):
            np.testing.assert_allclose(blinded, key.a[i][3] * key.noise, rtol=0, atol=1e-15)

    def test_matches_weighted_sum(self):
        rng = np.random.default_rng(1)
        xs = [rng.normal(size=(3, 2)) for _ in range(2)]
        key = generate_blinding_key(2, (3, 2), self.noise, rng_seed=7)
        batch = blind(xs, key)
        self.assertEqual(len(batch), 3)
        for i in range(3):
            expected = np.zeros((3, 2))
            for p in range(3):
                for q in range(2):
                    expected[p, q] = key.a[i][0] * xs[0][p, q] + key.a[i][1] * xs[1][p, q] + key.a[i][2] * key.noise[p, q]
            self.assertLessEqual(relative_error(batch.blinded[i], expected), 1e-12)

    def test_wrong_count(self):
        key = generate_blinding_key(2, (3,), self.noise, rng_seed=1)
        with self.assertRaises(ProtocolError):
            blind([np.ones(3)], key)

    def test_shape_mismatch(self):
        key = generate_blinding_key(2, (3,), self.noise, rng_seed=1)
        with self.assertRaises(ShapeError):
            blind([np.ones(3), np.ones(4)], key)

    def test_integrity_adds_one_tensor(self):
        key = generate_blinding_key(2, (3,), self.noise, rng_seed=1, integrity=True)
        batch = blind([np.ones(3), np.zeros(3)], key)
        self.assertEqual(len(batch), 4)
        self.assertTrue(batch.integrity)

    def test_coded_batch_count_checked(self):
        with self.assertRaises(ProtocolError):
            CodedBatch(blinded=(np.ones(2),), k=1)


class UnblindTests(SimpleTestCase):
    def test_identity_key_is_exact(self):
        w = np.random.default_rng(2).normal(size=(4, 3))
        x = np.random.default_rng(3).normal(size=(3, 1))
        key = generate_blinding_key(1, (3, 1), NoiseSpec(variance=1e6), rng_seed=1, a=np.eye(2))
        op = BilinearOp.matmul()
        outputs = [op.apply(w, blinded) for blinded in blind([x], key)]
        np.testing.assert_array_equal(unblind(outputs, key)[0], op.apply(w, x))

    def test_matmul_layer(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(5, 6))
        xs = [rng.normal(size=(6, 1)) for _ in range(3)]
        key = generate_blinding_key(3, (6, 1), NoiseSpec(variance=9e8, seed=1), rng_seed=2)
        self.assertLessEqual(round_trip_error(BilinearOp.matmul(), w, xs, key), 1e-9)

    def test_conv_layer(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(3, 2, 3, 3))
        xs = [rng.normal(size=(2, 6, 6)) for _ in range(2)]
        key = generate_blinding_key(2, (2, 6, 6), NoiseSpec(variance=9e8, seed=1), rng_seed=3)
        self.assertLessEqual(round_trip_error(BilinearOp.conv2d(padding=1), w, xs, key), 1e-9)

    def test_round_trip_across_batch_sizes(self):
        rng = np.random.default_rng(6)
        cases = [
            (BilinearOp.matmul(), (4, 7), (7, 1)),
            (BilinearOp.conv2d(stride=1, padding=1), (2, 2, 3, 3), (2, 5, 5)),
            (BilinearOp.conv2d(stride=2, padding=0), (3, 1, 3, 3), (1, 7, 7)),
        ]
        for k in range(1, 9):
            for variance in (1.0, 1e4, 9e8):
                for op, w_shape, x_shape in cases:
                    w = rng.normal(size=w_shape)
                    xs = [rng.normal(size=x_shape) for _ in range(k)]
                    key = generate_blinding_key(k, x_shape, NoiseSpec(variance=variance, seed=k), rng_seed=100 + k)
                    self.assertLessEqual(round_trip_error(op, w, xs, key), 1e-9, (k, variance, op))

    def test_result_independent_of_noise(self):
        rng = np.random.default_rng(7)
        w = rng.normal(size=(3, 4))
        xs = [rng.normal(size=(4, 1)) for _ in range(2)]
        key = generate_blinding_key(2, (4, 1), NoiseSpec(variance=1.0), rng_seed=5)
        other = BlindingKey(k=2, a=key.a, a_inv=key.a_inv, noise=rng.normal(scale=1e3, size=(4, 1)))
        op = BilinearOp.matmul()
        first = unblind([op.apply(w, b) for b in blind(xs, key)], key)
        second = unblind([op.apply(w, b) for b in blind(xs, other)], other)
        self.assertEqual(len(first), 2)
        for y1, y2 in zip(first, second):
            self.assertLessEqual(relative_error(y1, y2), 1e-9)

    def test_wrong_count(self):
        key = generate_blinding_key(2, (3,), NoiseSpec(), rng_seed=1)
        with self.assertRaises(ProtocolError):
            unblind([np.ones(3)] * 2, key)

    def test_integrity_outputs_accepted(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=(2, 3))
        xs = [rng.normal(size=(3, 1)) for _ in range(2)]
        key = generate_blinding_key(2, (3, 1), NoiseSpec(), rng_seed=1, integrity=True)
        self.assertLessEqual(round_trip_error(BilinearOp.matmul(), w, xs, key), 1e-9)

    def test_ill_conditioned_key_degrades(self):
        # Characterization only: a badly conditioned A loses accuracy that an
        # orthogonal A keeps.
        rng = np.random.default_rng(9)
        w = rng.normal(size=(4, 6))
        xs = [rng.normal(size=(6, 1)) for _ in range(3)]
        noise = NoiseSpec(variance=1e6, seed=1)
        orthogonal = generate_blinding_key(3, (6, 1), noise, rng_seed=4)
        ill = generate_blinding_key(3, (6, 1), noise, rng_seed=4, condition_number=1e8)
        self.assertGreater(ill.condition_number(), 1e7)
        op = BilinearOp.matmul()
        self.assertGreater(round_trip_error(op, w, xs, ill), round_trip_error(op, w, xs, orthogonal))


class CoefficientRatioTests(SimpleTestCase):
    def test_ratio(self):
        self.assertEqual(coefficient_ratio_sq([[1.0, -2.0], [0.5, 1.0]]), 16.0)

    def test_zero_coefficient(self):
        self.assertEqual(coefficient_ratio_sq(np.eye(2)), float('inf'))
