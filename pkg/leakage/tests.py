import math

import numpy as np
from django.test import SimpleTestCase

from leakage.bounds import (
    LeakageParams, calibrate_sigma, gaussian_channel_bound, leakage_bound, per_equation_bound,
    reproduce_table1,
)
from leakage.normalization import normalize_inputs
from tensors.exceptions import NormalizationError, ParameterError


def params(k=4, c1=1.0, ratio=10.0, sigma_sq=8e8):
    return LeakageParams(k=k, c1=c1, alpha_ratio_sq=ratio, sigma_sq=sigma_sq)


class LeakageBoundTests(SimpleTestCase):
    def test_published_values(self):
        self.assertAlmostEqual(leakage_bound(params(sigma_sq=8e8)).bound, 1e-6, delta=1e-18)
        self.assertAlmostEqual(leakage_bound(params(sigma_sq=4e8)).bound, 2e-6, delta=1e-18)
        self.assertAlmostEqual(leakage_bound(params(sigma_sq=1e8)).bound, 8e-6, delta=1e-17)

    def test_zero_signal(self):
        self.assertEqual(leakage_bound(params(k=1, c1=0.0, ratio=1.0, sigma_sq=1.0)).bound, 0.0)

    def test_bits(self):
        bound = leakage_bound(params())
        self.assertAlmostEqual(bound.bits, bound.nats / math.log(2))

    def test_megapixel_reading(self):
        self.assertAlmostEqual(leakage_bound(params()).leaked_entries(10 ** 6), 1.0)

    def test_invalid_noise(self):
        with self.assertRaises(ParameterError):
            params(sigma_sq=0.0)
        with self.assertRaises(ParameterError):
            params(sigma_sq=-1.0)

    def test_invalid_ratio(self):
        with self.assertRaises(ParameterError):
            params(ratio=0.5)

    def test_monotonic(self):
        base = leakage_bound(params()).bound
        self.assertLess(leakage_bound(params(sigma_sq=9e8)).bound, base)
        self.assertGreater(leakage_bound(params(k=5)).bound, base)
        self.assertGreater(leakage_bound(params(c1=1.5)).bound, base)
        self.assertGreater(leakage_bound(params(ratio=11.0)).bound, base)

    def test_per_equation_chain(self):
        for k in range(1, 9):
            for sigma_sq in (1e4, 1.6e7, 9e8):
                p = params(k=k, c1=0.3, ratio=7.0, sigma_sq=sigma_sq)
                chained = (k + 1) * per_equation_bound(p)
                self.assertLessEqual(abs(chained - leakage_bound(p).bound) / chained, 1e-15)

    def test_gaussian_channel(self):
        self.assertEqual(gaussian_channel_bound(2.0, 8.0), 0.25)
        with self.assertRaises(ParameterError):
            gaussian_channel_bound(1.0, 0.0)


class CalibrateSigmaTests(SimpleTestCase):
    def test_published_round_trips(self):
        self.assertAlmostEqual(calibrate_sigma(1e-6, 4, 1.0, 10.0) / 8e8, 1.0, places=12)
        self.assertAlmostEqual(calibrate_sigma(2e-6, 4, 1.0, 10.0) / 4e8, 1.0, places=12)

    def test_inverse_identity(self):
        for k in range(1, 9):
            for sigma_sq in (1e2, 3.3e5, 9e8):
                p = params(k=k, c1=0.7, ratio=3.0, sigma_sq=sigma_sq)
                calibrated = calibrate_sigma(leakage_bound(p).bound, k, 0.7, 3.0)
                self.assertLessEqual(abs(calibrated - sigma_sq) / sigma_sq, 1e-12)
                recomputed = leakage_bound(params(k=k, c1=0.7, ratio=3.0, sigma_sq=calibrated)).bound
                self.assertLessEqual(abs(recomputed - leakage_bound(p).bound) / recomputed, 1e-12)

    def test_invalid_target(self):
        with self.assertRaises(ParameterError):
            calibrate_sigma(0.0, 4, 1.0, 10.0)


class NoiseTableTests(SimpleTestCase):
    def test_reproduction(self):
        rows = reproduce_table1()
        self.assertEqual([row['status'] for row in rows], ['KNOWN-DISCREPANT', 'KNOWN-DISCREPANT', 'pass', 'pass', 'pass'])
        self.assertAlmostEqual(rows[0]['computed'], 5e-5)
        self.assertAlmostEqual(rows[1]['computed'], 3.2e-5)
        self.assertAlmostEqual(rows[4]['computed'], 800 / 9e8)

    def test_tight_tolerance_fails_rounded_row(self):
        self.assertEqual(reproduce_table1(tolerance=0.05)[4]['status'], 'fail')


class NormalizeInputsTests(SimpleTestCase):
    def test_one_hot_l2(self):
        x = np.array([0.0, 1.0, 0.0])
        normalized, c1 = normalize_inputs([x], 'l2')
        np.testing.assert_array_equal(normalized[0], x)
        self.assertEqual(c1, 1.0)

    def test_constant_l2(self):
        normalized, c1 = normalize_inputs([np.full(16, 3.0)], 'l2')
        np.testing.assert_allclose(normalized[0], np.full(16, 0.25))
        self.assertAlmostEqual(c1, 16 ** -0.5)

    def test_random_l1(self):
        x = np.random.default_rng(1).normal(size=(3, 4, 4))
        normalized, c1 = normalize_inputs([x], 'l1')
        self.assertAlmostEqual(np.sum(np.abs(normalized[0])), 1.0, places=12)
        self.assertLessEqual(c1, 1.0)

    def test_c1_is_largest_entry_over_batch(self):
        normalized, c1 = normalize_inputs([np.array([3.0, 4.0]), np.array([1.0, 1.0])], 'l2')
        self.assertAlmostEqual(c1, 0.8)

    def test_extreme_magnitudes(self):
        for value in (1e200, 1e-200):
            for norm, expected in (('l2', 0.5), ('l1', 0.25)):
                normalized, c1 = normalize_inputs([np.full(4, value)], norm)
                np.testing.assert_allclose(normalized[0], np.full(4, expected), rtol=1e-15)
                self.assertAlmostEqual(c1, expected, places=15)

    def test_zero_tensor_rejected(self):
        with self.assertRaises(NormalizationError):
            normalize_inputs([np.zeros(4)])

    def test_unknown_norm(self):
        with self.assertRaises(ParameterError):
            normalize_inputs([np.ones(2)], 'linf')
