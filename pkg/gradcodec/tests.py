import numpy as np
from django.test import SimpleTestCase

from gradcodec.codec import (
    coded_products, decode_grad, encode_deltas, generate_grad_codec, recover_input_grads,
)
from masking.blinding import NoiseSpec, blind, generate_blinding_key
from tensors.exceptions import KeyMaterialError, ParameterError, ProtocolError, ShapeError
from tensors.ops import BilinearOp, relative_error

MATMUL = (BilinearOp.matmul(), (5, 1), (4, 1))
CONV = (BilinearOp.conv2d(stride=1, padding=1), (2, 5, 5), (3, 5, 5))


def plain_gradient(op, deltas, xs):
    return sum(op.weight_grad(d, x) for d, x in zip(deltas, xs)) / len(xs)


def blinded_gradient(op, deltas, xs, codec, noise, seed):
    key = generate_blinding_key(codec.k, xs[0].shape, noise, rng_seed=seed, a=codec.a)
    encoded = encode_deltas(deltas, codec.b)
    return decode_grad(coded_products(encoded, blind(xs, key).blinded, op), codec)


def least_squares_b(codec):
    # Solve sum_j B[j][i] gamma_j A[j][m] = [I_K | 0][i][m] for the K(K+1)
    # unknowns B[j][i] as one flat linear system.
    k = codec.k
    rows, rhs = [], []
    for i in range(k):
        for m in range(k + 1):
            row = np.zeros((k + 1, k))
            for j in range(k + 1):
                row[j, i] = codec.gamma[j] * codec.a[j, m]
            rows.append(row.ravel())
            rhs.append(1.0 if i == m else 0.0)
    solution = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    return solution.reshape(k + 1, k)


class GenerateGradCodecTests(SimpleTestCase):
    def test_forced_identity_variant(self):
        codec = generate_grad_codec(1, rng_seed=0, a=np.eye(2), gamma=[1.0, 1.0])
        np.testing.assert_allclose(codec.b.T, [[1.0, 0.0]], atol=1e-15)
        self.assertEqual(codec.constraint_residual(), 0.0)

    def test_constraint_holds(self):
        for k in range(1, 9):
            for seed in range(20):
                codec = generate_grad_codec(k, rng_seed=seed)
                self.assertEqual(codec.b.shape, (k + 1, k))
                self.assertLessEqual(codec.constraint_residual(), 1e-10)
                self.assertLessEqual(np.linalg.cond(codec.a) - 1, 1e-8)

    def test_gamma_bounded_away_from_zero(self):
        for seed in range(20):
            gamma = generate_grad_codec(6, rng_seed=seed).gamma
            self.assertTrue(np.all(np.abs(gamma) >= 0.5))
            self.assertTrue(np.all(np.abs(gamma) <= 2.0))

    def test_matches_least_squares_solution(self):
        codec = generate_grad_codec(3, rng_seed=17)
        self.assertLessEqual(np.max(np.abs(least_squares_b(codec) - codec.b)), 1e-10)

    def test_deterministic(self):
        first = generate_grad_codec(4, rng_seed=3)
        second = generate_grad_codec(4, rng_seed=3)
        self.assertEqual(first.b.tobytes(), second.b.tobytes())
        self.assertEqual(first.gamma.tobytes(), second.gamma.tobytes())

    def test_zero_batch_rejected(self):
        with self.assertRaises(ParameterError):
            generate_grad_codec(0, rng_seed=1)

    def test_zero_gamma_rejected(self):
        with self.assertRaises(KeyMaterialError):
            generate_grad_codec(1, rng_seed=1, gamma=[1.0, 0.0])

    def test_secrets_not_in_repr(self):
        text = repr(generate_grad_codec(2, rng_seed=1))
        self.assertNotIn('gamma', text)
        self.assertIn('b=', text)


class EncodeDeltasTests(SimpleTestCase):
    def test_selector_rows(self):
        deltas = [np.full((2, 1), 1.0), np.full((2, 1), 2.0)]
        b = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        encoded = encode_deltas(deltas, b)
        self.assertEqual(len(encoded), 3)
        np.testing.assert_array_equal(encoded[0], deltas[1])
        np.testing.assert_array_equal(encoded[1], deltas[0])
        np.testing.assert_array_equal(encoded[2], deltas[1])

    def test_zero_deltas(self):
        codec = generate_grad_codec(3, rng_seed=2)
        for encoded in encode_deltas([np.zeros((3, 1))] * 3, codec.b):
            np.testing.assert_array_equal(encoded, np.zeros((3, 1)))

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        codec = generate_grad_codec(2, rng_seed=5)
        deltas = [rng.normal(size=(3, 2)) for _ in range(2)]
        encoded = encode_deltas(deltas, codec.b)
        for j in range(3):
            expected = np.zeros((3, 2))
            for p in range(3):
                for q in range(2):
                    expected[p, q] = codec.b[j][0] * deltas[0][p, q] + codec.b[j][1] * deltas[1][p, q]
            self.assertLessEqual(relative_error(encoded[j], expected), 1e-12)

    def test_count_mismatch(self):
        codec = generate_grad_codec(2, rng_seed=5)
        with self.assertRaises(ProtocolError):
            encode_deltas([np.ones(2)], codec.b)

    def test_shape_mismatch(self):
        codec = generate_grad_codec(2, rng_seed=5)
        with self.assertRaises(ShapeError):
            encode_deltas([np.ones(2), np.ones(3)], codec.b)


class CodedProductsTests(SimpleTestCase):
    def test_single_sample_closed_form(self):
        rng = np.random.default_rng(2)
        gamma = [2.0, -0.5]
        codec = generate_grad_codec(1, rng_seed=1, a=np.eye(2), gamma=gamma)
        delta = rng.normal(size=(3, 1))
        x = rng.normal(size=(4, 1))
        key = generate_blinding_key(1, (4, 1), NoiseSpec(variance=1e4), rng_seed=3, a=codec.a)
        eqs = coded_products(encode_deltas([delta], codec.b), blind([x], key).blinded, BilinearOp.matmul())
        expected = np.outer(delta[:, 0], x[:, 0]) / gamma[0]
        self.assertLessEqual(relative_error(eqs.eqs[0], expected), 1e-12)
        np.testing.assert_array_equal(eqs.eqs[1], np.zeros((3, 4)))

    def test_zero_blinded_inputs(self):
        codec = generate_grad_codec(2, rng_seed=4)
        encoded = encode_deltas([np.ones((2, 1))] * 2, codec.b)
        eqs = coded_products(encoded, [np.zeros((3, 1))] * 3, BilinearOp.matmul())
        for eq in eqs:
            np.testing.assert_array_equal(eq, np.zeros((2, 3)))

    def test_dense_matches_outer_products(self):
        rng = np.random.default_rng(3)
        encoded = [rng.normal(size=(4, 1)) for _ in range(4)]
        blinded = [rng.normal(size=(6, 1)) for _ in range(4)]
        eqs = coded_products(encoded, blinded, BilinearOp.matmul())
        for eq, d, x in zip(eqs, encoded, blinded):
            expected = np.zeros((4, 6))
            for p in range(4):
                for q in range(6):
                    expected[p, q] = d[p, 0] * x[q, 0]
            self.assertLessEqual(relative_error(eq, expected), 1e-12)

    def test_too_few_blinded_inputs(self):
        with self.assertRaises(ProtocolError):
            coded_products([np.ones((2, 1))] * 3, [np.ones((3, 1))] * 2, BilinearOp.matmul())

    def test_too_few_encoded_gradients(self):
        with self.assertRaises(ProtocolError):
            coded_products([np.ones((2, 1))] * 2, [np.ones((3, 1))] * 4, BilinearOp.matmul())

    def test_integrity_row_is_ignored(self):
        eqs = coded_products([np.ones((2, 1))] * 3, [np.ones((3, 1))] * 4, BilinearOp.matmul())
        self.assertEqual(len(eqs), 3)


class DecodeGradTests(SimpleTestCase):
    def test_single_sample_identity_construction(self):
        rng = np.random.default_rng(4)
        codec = generate_grad_codec(1, rng_seed=1, a=np.eye(2), gamma=[1.0, 1.0])
        delta = rng.normal(size=(3, 1))
        x = rng.normal(size=(5, 1))
        op = BilinearOp.matmul()
        decoded = blinded_gradient(op, [delta], [x], codec, NoiseSpec(variance=1e6), seed=2)
        self.assertLessEqual(relative_error(decoded, op.weight_grad(delta, x)), 1e-12)

    def test_zero_equations(self):
        codec = generate_grad_codec(3, rng_seed=2)
        np.testing.assert_array_equal(decode_grad([np.zeros((2, 2))] * 4, codec), np.zeros((2, 2)))

    def test_dense_batch(self):
        rng = np.random.default_rng(5)
        op, x_shape, delta_shape = MATMUL
        codec = generate_grad_codec(4, rng_seed=6)
        xs = [rng.normal(size=x_shape) for _ in range(4)]
        deltas = [rng.normal(size=delta_shape) for _ in range(4)]
        decoded = blinded_gradient(op, deltas, xs, codec, NoiseSpec(variance=9e8, seed=2), seed=7)
        self.assertLessEqual(relative_error(decoded, plain_gradient(op, deltas, xs)), 1e-9)

    def test_decode_identity_random_trials(self):
        rng = np.random.default_rng(6)
        trial = 0
        while trial < 500:
            for k in range(1, 9):
                op, x_shape, delta_shape = (MATMUL, CONV)[trial % 2]
                codec = generate_grad_codec(k, rng_seed=trial)
                xs = [rng.normal(size=x_shape) for _ in range(k)]
                deltas = [rng.normal(size=delta_shape) for _ in range(k)]
                decoded = blinded_gradient(op, deltas, xs, codec, NoiseSpec(variance=1e6, seed=trial), seed=1000 + trial)
                self.assertLessEqual(relative_error(decoded, plain_gradient(op, deltas, xs)), 1e-9, (trial, k))
                trial += 1

    def test_noise_cancels(self):
        rng = np.random.default_rng(7)
        for op, x_shape, delta_shape in (MATMUL, CONV):
            codec = generate_grad_codec(3, rng_seed=8)
            xs = [rng.normal(size=x_shape) for _ in range(3)]
            deltas = [rng.normal(size=delta_shape) for _ in range(3)]
            quiet = blinded_gradient(op, deltas, xs, codec, NoiseSpec(variance=1e-2, seed=1), seed=1)
            loud = blinded_gradient(op, deltas, xs, codec, NoiseSpec(mean=50.0, variance=1e8, seed=2), seed=2)
            self.assertLessEqual(relative_error(loud, quiet), 1e-9)

    def test_count_mismatch(self):
        codec = generate_grad_codec(2, rng_seed=1)
        with self.assertRaises(ProtocolError):
            decode_grad([np.ones(2)] * 2, codec)


class RecoverInputGradsTests(SimpleTestCase):
    def test_per_sample_recovery(self):
        rng = np.random.default_rng(8)
        for op, x_shape, delta_shape in (MATMUL, CONV):
            w_shape = (4, 5) if op.kind == 'matmul' else (3, 2, 3, 3)
            w = rng.normal(size=w_shape)
            codec = generate_grad_codec(3, rng_seed=9)
            deltas = [rng.normal(size=delta_shape) for _ in range(3)]
            products = [op.input_grad(w, e, x_shape) for e in encode_deltas(deltas, codec.b)]
            recovered = recover_input_grads(products, codec)
            self.assertEqual(len(recovered), 3)
            for got, delta in zip(recovered, deltas):
                self.assertLessEqual(relative_error(got, op.input_grad(w, delta, x_shape)), 1e-9)

    def test_count_mismatch(self):
        codec = generate_grad_codec(2, rng_seed=1)
        with self.assertRaises(ProtocolError):
            recover_input_grads([np.ones(2)] * 2, codec)
