import os
import tempfile

import numpy as np
from django.test import SimpleTestCase, override_settings

from masking.blinding import NoiseSpec, blind, generate_blinding_key
from pipeline.contexts import TamperPolicy, TrustedContext, UntrustedContext
from pipeline.engine import backward_plain, backward_split, forward_plain, forward_split, sgd_step
from pipeline.integrity import tamper_propagation_factor, verify_integrity
from pipeline.layers import Conv2D, Dense, Layer, MaxPool, ReLU, init_model, load_model, save_model
from pipeline.losses import accuracy, mse, softmax_cross_entropy
from pipeline.training import Dataset, TrainConfig, evaluate, train
from tensors.exceptions import KeyMaterialError, ParameterError, ProtocolError, ShapeError
from tensors.ops import relative_error

THRESHOLD = 1e-6


def mlp(hidden=8, seed=0, inputs=2, classes=2):
    return init_model([Dense(inputs, hidden), ReLU(), Dense(hidden, classes)], (inputs,), seed)


def conv_net(seed=0):
    return init_model([Conv2D(1, 2, 3, 3, padding=1), ReLU(), MaxPool(2, 2), Dense(18, 3)], (1, 6, 6), seed)


def contexts(model, seed=0, integrity=False, workers=1):
    trusted = TrustedContext(seed=seed, noise_mean=0.0, noise_variance=1e4, integrity=integrity, threshold=THRESHOLD)
    return trusted, UntrustedContext(model, workers=workers)


def blobs(n=64, seed=0):
    rng = np.random.default_rng(seed)
    labels = [i % 2 for i in range(n)]
    inputs = [rng.normal(loc=(1.0 if label else -1.0), scale=0.7, size=2) for label in labels]
    return Dataset(tuple(inputs), tuple(labels))


def max_param_error(model, expected):
    return max(
        relative_error(model.layers[index].params, expected.layers[index].params)
        for index in model.linear_indices()
    )


class IdentityTrustedContext(TrustedContext):
    def open_layer(self, index, k, input_shape, training=False):
        self._keys[index] = generate_blinding_key(k, input_shape, NoiseSpec(variance=1e4), rng_seed=index, a=np.eye(k + 1))
        return None


class SpyTrustedContext(TrustedContext):
    """
    Collects every secret value the trusted context creates or handles.

    """
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.secrets = []

    def open_layer(self, index, k, input_shape, training=False):
        b = super().open_layer(index, k, input_shape, training)
        key = self._keys[index]
        self.secrets.extend([key.a, key.a_inv, key.noise])
        if training:
            self.secrets.extend([self._codecs[index].a, self._codecs[index].gamma])
        return b

    def blind(self, index, inputs):
        self.secrets.extend(inputs)
        return super().blind(index, inputs)

    def encode(self, index, deltas):
        self.secrets.extend(deltas)
        return super().encode(index, deltas)


class RecordingUntrustedContext(UntrustedContext):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.seen = []

    def receive_public(self, index, b):
        self.seen.append(b)
        super().receive_public(index, b)

    def forward_linear(self, index, blinded):
        self.seen.extend(blinded)
        return super().forward_linear(index, blinded)

    def backward_linear(self, index, encoded_deltas, blinded, need_input_grads=True):
        self.seen.extend(encoded_deltas)
        self.seen.extend(blinded)
        return super().backward_linear(index, encoded_deltas, blinded, need_input_grads)

    def apply_update(self, grads, eta):
        self.seen.extend(grads.values())
        return super().apply_update(grads, eta)

    def store_page(self, page):
        self.seen.append(page)
        super().store_page(page)


class LayerTests(SimpleTestCase):
    def test_init_is_deterministic(self):
        first, second = mlp(seed=3), mlp(seed=3)
        for index in first.linear_indices():
            self.assertEqual(first.layers[index].params.tobytes(), second.layers[index].params.tobytes())

    def test_he_uniform_range(self):
        model = mlp(hidden=32, inputs=8)
        weights = model.layers[0].params
        self.assertEqual(weights.shape, (32, 9))
        self.assertTrue(np.all(np.abs(weights[:, :-1]) <= np.sqrt(6.0 / 8)))
        np.testing.assert_array_equal(weights[:, -1], np.zeros(32))

    def test_output_shapes(self):
        self.assertEqual(conv_net().output_shape, (3,))
        self.assertEqual(mlp(classes=5).output_shape, (5,))

    def test_mismatched_layers_rejected(self):
        with self.assertRaises(ShapeError):
            init_model([Dense(3, 4)], (2,), 0)
        with self.assertRaises(ShapeError):
            init_model([Conv2D(2, 1, 3, 3)], (1, 5, 5), 0)

    def test_from_dict(self):
        layer = Layer.from_dict({'kind': 'conv2d', 'in_channels': 1, 'out_channels': 2, 'kernel_h': 3, 'kernel_w': 3, 'padding': 1})
        self.assertIsInstance(layer, Conv2D)
        self.assertEqual(layer.padding, 1)
        self.assertEqual(Layer.from_dict(layer.to_dict()).to_dict(), layer.to_dict())

    def test_unknown_kind(self):
        with self.assertRaises(ParameterError):
            Layer.from_dict({'kind': 'batchnorm'})
        with self.assertRaises(ParameterError):
            Layer.from_dict({'kind': 'dense', 'in_features': 2})

    def test_save_and_load(self):
        model = conv_net(seed=4)
        with tempfile.TemporaryDirectory() as directory:
            save_model(model, directory)
            self.assertTrue(os.path.exists(os.path.join(directory, 'manifest.json')))
            loaded = load_model(directory)
        self.assertEqual(loaded.to_dict(), model.to_dict())
        for index in model.linear_indices():
            np.testing.assert_array_equal(loaded.layers[index].params, model.layers[index].params)


class LossTests(SimpleTestCase):
    def finite_difference(self, loss_fn, y, label):
        grad = np.zeros_like(y)
        for i in range(y.size):
            step = np.zeros_like(y)
            step[i] = 1e-6
            grad[i] = (loss_fn([y + step], [label])[0] - loss_fn([y - step], [label])[0]) / 2e-6
        return grad

    def test_gradients_match_finite_differences(self):
        y = np.array([0.3, -1.2, 0.8])
        for loss_fn in (mse, softmax_cross_entropy):
            _, deltas = loss_fn([y], [2])
            np.testing.assert_allclose(deltas[0], self.finite_difference(loss_fn, y, 2), atol=1e-7)

    def test_cross_entropy_gradient_sums_to_zero(self):
        _, deltas = softmax_cross_entropy([np.array([5.0, -3.0, 1.0, 0.0])], [0])
        self.assertAlmostEqual(float(np.sum(deltas[0])), 0.0)

    def test_large_logits_are_stable(self):
        loss, _ = softmax_cross_entropy([np.array([1000.0, 0.0])], [0])
        self.assertAlmostEqual(loss, 0.0)

    def test_perfect_mse(self):
        loss, deltas = mse([np.array([0.0, 1.0])], [1])
        self.assertEqual(loss, 0.0)
        np.testing.assert_array_equal(deltas[0], np.zeros(2))

    def test_accuracy(self):
        self.assertEqual(accuracy([np.array([1.0, 0.0]), np.array([0.0, 1.0])], [0, 0]), 0.5)

    def test_label_out_of_range(self):
        with self.assertRaises(ShapeError):
            mse([np.zeros(2)], [2])


class ForwardSplitTests(SimpleTestCase):
    def test_identity_key_is_exact(self):
        model = init_model([Dense(3, 2)], (3,), 0)
        x = np.array([0.5, -1.0, 2.0])
        trusted = IdentityTrustedContext(seed=0)
        logits, _ = forward_split(model, [x], trusted, UntrustedContext(model, workers=1))
        np.testing.assert_array_equal(logits[0], forward_plain(model, [x])[0][0])

    def test_mlp_matches_plain(self):
        model = mlp()
        xs = [np.array([0.2, -0.4]), np.array([1.5, 0.3])]
        logits, _ = forward_split(model, xs, *contexts(model))
        for got, expected in zip(logits, forward_plain(model, xs)[0]):
            self.assertLessEqual(relative_error(got, expected), 1e-9)

    def test_conv_net_matches_plain(self):
        model = conv_net()
        rng = np.random.default_rng(1)
        xs = [rng.normal(size=(1, 6, 6)) for _ in range(4)]
        logits, stored = forward_split(model, xs, *contexts(model))
        for got, expected in zip(logits, forward_plain(model, xs)[0]):
            self.assertLessEqual(relative_error(got, expected), 1e-9)
        self.assertEqual(sorted(stored), [0, 3])
        self.assertEqual(len(stored[0]), 5)

    def test_identical_inputs_match_single_input(self):
        model = mlp()
        x = np.array([0.7, -0.1])
        single, _ = forward_split(model, [x], *contexts(model, seed=1))
        batch, _ = forward_split(model, [x] * 4, *contexts(model, seed=2))
        for y in batch:
            self.assertLessEqual(relative_error(y, single[0]), 1e-9)

    def test_worker_pool_gives_same_outputs(self):
        model = conv_net()
        xs = [np.random.default_rng(2).normal(size=(1, 6, 6)) for _ in range(3)]
        inline, _ = forward_split(model, xs, *contexts(model, seed=3, workers=1))
        pooled, _ = forward_split(model, xs, *contexts(model, seed=3, workers=3))
        for a, b in zip(inline, pooled):
            np.testing.assert_array_equal(a, b)

    @override_settings(DARKNIGHT_UNTRUSTED_WORKERS=2)
    def test_workers_default_from_settings(self):
        self.assertEqual(UntrustedContext(mlp()).workers, 2)

    def test_wrong_input_shape(self):
        model = mlp()
        with self.assertRaises(ShapeError):
            forward_split(model, [np.ones(3)], *contexts(model))


class BackwardSplitTests(SimpleTestCase):
    def run_split(self, model, xs, labels, loss_fn=softmax_cross_entropy, seed=0):
        trusted, untrusted = contexts(model, seed=seed)
        logits, stored = forward_split(model, xs, trusted, untrusted, training=True)
        _, deltas = loss_fn(logits, labels)
        return backward_split(model, stored, deltas, trusted, untrusted)

    def run_plain(self, model, xs, labels, loss_fn=softmax_cross_entropy):
        logits, cache = forward_plain(model, xs)
        _, deltas = loss_fn(logits, labels)
        return backward_plain(model, cache, deltas)

    def test_single_dense_mse_closed_form(self):
        model = init_model([Dense(3, 2)], (3,), 5)
        x = np.array([0.4, -0.9, 1.1])
        x_aug = np.append(x, 1.0)
        y = model.layers[0].params @ x_aug
        expected = np.outer(2.0 * (y - np.array([0.0, 1.0])) / 2, x_aug)
        grads = self.run_split(model, [x], [1], loss_fn=mse)
        self.assertLessEqual(relative_error(grads[0], expected), 1e-10)

    def test_zero_loss_gradient(self):
        model = conv_net()
        trusted, untrusted = contexts(model)
        xs = [np.ones((1, 6, 6))] * 2
        _, stored = forward_split(model, xs, trusted, untrusted, training=True)
        grads = backward_split(model, stored, [np.zeros(3)] * 2, trusted, untrusted)
        self.assertEqual(sorted(grads), [0, 3])
        for grad in grads.values():
            np.testing.assert_array_equal(grad, np.zeros_like(grad))

    def test_mlp_matches_plain(self):
        model = mlp(hidden=6)
        rng = np.random.default_rng(3)
        xs = [rng.normal(size=2) for _ in range(4)]
        labels = [0, 1, 1, 0]
        split = self.run_split(model, xs, labels)
        plain = self.run_plain(model, xs, labels)
        self.assertEqual(sorted(split), [0, 2])
        for index in plain:
            self.assertLessEqual(relative_error(split[index], plain[index]), 1e-8)

    def test_conv_net_matches_plain(self):
        model = conv_net(seed=2)
        rng = np.random.default_rng(4)
        xs = [rng.normal(size=(1, 6, 6)) for _ in range(4)]
        labels = [0, 1, 2, 1]
        split = self.run_split(model, xs, labels, seed=6)
        plain = self.run_plain(model, xs, labels)
        for index in plain:
            self.assertLessEqual(relative_error(split[index], plain[index]), 1e-8)

    def test_missing_activations(self):
        model = mlp()
        trusted, untrusted = contexts(model)
        with self.assertRaises(ProtocolError):
            backward_split(model, {}, [np.zeros(2)], trusted, untrusted)

    def test_backward_without_codec(self):
        model = mlp()
        trusted, untrusted = contexts(model)
        _, stored = forward_split(model, [np.ones(2)], trusted, untrusted)
        with self.assertRaises(ProtocolError):
            backward_split(model, stored, [np.zeros(2)], trusted, untrusted)


class BoundaryHygieneTests(SimpleTestCase):
    def test_untrusted_side_never_sees_secrets(self):
        model = mlp(hidden=4)
        dataset = blobs(n=8, seed=5)
        trusted = SpyTrustedContext(seed=1, noise_mean=0.0, noise_variance=1e4, integrity=True, threshold=THRESHOLD)
        untrusted = RecordingUntrustedContext(model, workers=1)
        cfg = TrainConfig(eta=0.1, k=4, epochs=1, integrity=True)
        train(model, dataset, cfg, trusted=trusted, untrusted=untrusted)
        raw_inputs = [np.asarray(x) for x in dataset.inputs]
        secrets = trusted.secrets + raw_inputs
        self.assertTrue(untrusted.seen)
        for value in untrusted.seen:
            if isinstance(value, bytes):
                for secret in secrets:
                    self.assertNotIn(np.asarray(secret).tobytes(), value)
                continue
            for secret in secrets:
                self.assertFalse(np.shares_memory(value, secret))
                self.assertFalse(value.shape == secret.shape and np.array_equal(value, secret))

    def test_secrets_not_exposed(self):
        trusted = TrustedContext(seed=0)
        public = [name for name in vars(trusted) if not name.startswith('_')]
        self.assertNotIn('keys', public)
        self.assertNotIn('codecs', public)


class SgdStepTests(SimpleTestCase):
    def test_zero_learning_rate(self):
        model = mlp()
        updated = sgd_step(model, {0: np.ones((8, 3)), 2: np.ones((2, 9))}, 0.0)
        self.assertEqual(max_param_error(updated, model), 0.0)

    def test_zero_gradient(self):
        model = mlp()
        self.assertEqual(max_param_error(sgd_step(model, {0: np.zeros((8, 3))}, 0.5), model), 0.0)

    def test_full_step_to_zero(self):
        model = mlp()
        updated = sgd_step(model, model.params(), 1.0)
        for index in updated.linear_indices():
            np.testing.assert_array_equal(updated.layers[index].params, 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            sgd_step(mlp(), {0: np.zeros((2, 2))}, 0.1)
        with self.assertRaises(ShapeError):
            sgd_step(mlp(), {1: np.zeros((2, 2))}, 0.1)


class IntegrityTests(SimpleTestCase):
    def honest_outputs(self, k, seed, w=None):
        rng = np.random.default_rng(seed)
        key = generate_blinding_key(k, (5, 1), NoiseSpec(variance=1e4, seed=seed), rng_seed=seed, integrity=True)
        w = rng.normal(size=(4, 5)) if w is None else w
        xs = [rng.normal(size=(5, 1)) for _ in range(k)]
        return [w @ x for x in blind(xs, key)], key

    def test_honest_run(self):
        outputs, key = self.honest_outputs(4, 0)
        result = verify_integrity(outputs, key, THRESHOLD, layer=0)
        self.assertTrue(result.ok)
        self.assertLessEqual(result.max_residual, 1e-9)

    def test_tampered_run(self):
        outputs, key = self.honest_outputs(4, 1)
        tampered = TamperPolicy(layer=0, equation=2, epsilon=1e-2).apply(outputs)
        with self.assertLogs('pipeline.integrity', 'WARNING'):
            result = verify_integrity(tampered, key, THRESHOLD, layer=0)
        self.assertEqual(result.status, 'violation')
        self.assertEqual(result.to_dict()['layer'], 0)

    def test_below_threshold_passes(self):
        outputs, key = self.honest_outputs(4, 2)
        tampered = TamperPolicy(layer=0, equation=2, epsilon=1e-12).apply(outputs)
        self.assertTrue(verify_integrity(tampered, key, THRESHOLD).ok)

    def test_propagation_factor(self):
        outputs, key = self.honest_outputs(3, 3)
        honest = verify_integrity(outputs, key, THRESHOLD).max_residual
        for equation in range(5):
            tampered = TamperPolicy(layer=0, equation=equation, epsilon=1e-2).apply(outputs)
            expected = 1e-2 * abs(tamper_propagation_factor(key, equation))
            self.assertAlmostEqual(verify_integrity(tampered, key, THRESHOLD).max_residual, expected, delta=honest + 1e-12)

    def test_tamper_detection_rate(self):
        rng = np.random.default_rng(4)
        for trial in range(1000):
            k = 1 + trial % 8
            outputs, key = self.honest_outputs(k, 100 + trial)
            equation = int(rng.integers(k + 2))
            factor = abs(tamper_propagation_factor(key, equation))
            magnitude = 10 * THRESHOLD / factor * rng.uniform(1.0, 100.0)
            epsilon = magnitude if rng.random() < 0.5 else -magnitude
            entry = None if trial % 3 else int(rng.integers(4))
            tampered = TamperPolicy(layer=0, equation=equation, epsilon=epsilon, entry=entry).apply(outputs)
            with self.assertLogs('pipeline.integrity', 'WARNING'):
                self.assertFalse(verify_integrity(tampered, key, THRESHOLD).ok, trial)

    def test_no_false_positives(self):
        for trial in range(1000):
            outputs, key = self.honest_outputs(1 + trial % 8, 5000 + trial)
            self.assertTrue(verify_integrity(outputs, key, THRESHOLD).ok, trial)

    def test_key_without_integrity_row(self):
        key = generate_blinding_key(2, (3, 1), NoiseSpec(), rng_seed=0)
        with self.assertRaises(KeyMaterialError):
            verify_integrity([np.zeros((3, 1))] * 4, key)

    def test_wrong_output_count(self):
        outputs, key = self.honest_outputs(2, 6)
        with self.assertRaises(ProtocolError):
            verify_integrity(outputs[:3], key)

    def test_split_forward_detects_tampering(self):
        model = mlp()
        trusted, untrusted = contexts(model, integrity=True)
        untrusted.inject_tamper(TamperPolicy(layer=2, equation=1, epsilon=1e-2))
        with self.assertLogs('pipeline.integrity', 'WARNING'):
            forward_split(model, [np.ones(2), -np.ones(2), np.zeros(2)], trusted, untrusted)
        statuses = [result.status for result in trusted.release_integrity_results()]
        self.assertEqual(statuses, ['ok', 'violation'])


class InjectTamperTests(SimpleTestCase):
    def test_nonexistent_layer(self):
        model = mlp()
        with self.assertRaises(ProtocolError):
            UntrustedContext(model).inject_tamper(TamperPolicy(layer=7, equation=0, epsilon=1.0))

    def test_nonlinear_layer(self):
        model = mlp()
        with self.assertRaises(ProtocolError):
            UntrustedContext(model).inject_tamper(TamperPolicy(layer=1, equation=0, epsilon=1.0))

    def test_zero_epsilon_leaves_outputs(self):
        outputs = [np.arange(3.0), np.ones(3)]
        for got, expected in zip(TamperPolicy(layer=0, equation=1, epsilon=0.0).apply(outputs), outputs):
            np.testing.assert_array_equal(got, expected)

    def test_single_entry(self):
        tampered = TamperPolicy(layer=0, equation=0, epsilon=2.0, entry=1).apply([np.zeros(3)])
        np.testing.assert_array_equal(tampered[0], [0.0, 2.0, 0.0])

    def test_out_of_range_equation(self):
        with self.assertRaises(ProtocolError):
            TamperPolicy(layer=0, equation=3, epsilon=1.0).apply([np.zeros(2)] * 3)

    def test_non_finite_epsilon(self):
        with self.assertRaises(ParameterError):
            TamperPolicy(layer=0, equation=0, epsilon=float('nan'))


class GradientPageTests(SimpleTestCase):
    def test_round_trip(self):
        trusted = TrustedContext(seed=0)
        grads = {0: np.arange(6.0).reshape(2, 3), 2: np.ones((1, 4))}
        opened, k = trusted.open_page(trusted.seal_page(grads, 4))
        self.assertEqual(k, 4)
        for index in grads:
            np.testing.assert_array_equal(opened[index], grads[index])

    def test_corrupted_page(self):
        trusted = TrustedContext(seed=0)
        page = bytearray(trusted.seal_page({0: np.ones((2, 2))}, 2))
        page[20] ^= 1
        with self.assertRaises(ProtocolError):
            trusted.open_page(bytes(page))

    def test_foreign_page(self):
        page = TrustedContext(seed=0).seal_page({0: np.ones((2, 2))}, 2)
        with self.assertRaises(ProtocolError):
            TrustedContext(seed=0).open_page(page)

    def test_weighted_aggregation(self):
        trusted = TrustedContext(seed=0)
        pages = [trusted.seal_page({0: np.full((2, 2), 1.0)}, 2), trusted.seal_page({0: np.full((2, 2), 4.0)}, 4)]
        np.testing.assert_allclose(trusted.aggregate_pages(pages)[0], np.full((2, 2), 3.0))

    def test_no_pages(self):
        with self.assertRaises(ProtocolError):
            TrustedContext(seed=0).aggregate_pages([])


class TrainTests(SimpleTestCase):
    def trajectory(self, engine, cfg, model, dataset):
        steps = []
        final, history = train(model, dataset, cfg, engine=engine, on_step=lambda step, m: steps.append(m))
        return final, history, steps

    def test_blinded_training_matches_plain(self):
        dataset = blobs()
        model = mlp()
        cfg = TrainConfig(eta=0.1, k=4, epochs=7, seed=11, noise_variance=1e4)
        _, split_history, split_steps = self.trajectory('split', cfg, model, dataset)
        plain, plain_history, plain_steps = self.trajectory('plain', cfg, model, dataset)
        self.assertEqual(len(split_steps), 112)
        for split, plain in zip(split_steps, plain_steps):
            self.assertLessEqual(max_param_error(split, plain), 1e-7)
        self.assertLessEqual(abs(split_history[-1]['loss'] - plain_history[-1]['loss']), 1e-6)
        self.assertLess(evaluate(plain, dataset)[0], evaluate(model, dataset)[0])

    def test_virtual_batches_sum_to_full_batch(self):
        dataset = blobs(n=4, seed=2)
        model = mlp()
        two, _ = train(model, dataset, TrainConfig(eta=0.5, k=2, batch_size=4, epochs=1, shuffle=False))
        one, _ = train(model, dataset, TrainConfig(eta=0.5, k=4, epochs=1, shuffle=False))
        self.assertLessEqual(max_param_error(two, one), 1e-10)

    def test_full_batch_is_one_step(self):
        dataset = blobs(n=4, seed=3)
        model = mlp()
        trained, history = train(model, dataset, TrainConfig(eta=0.3, k=4, epochs=1))
        logits, cache = forward_plain(model, list(dataset.inputs))
        _, deltas = softmax_cross_entropy(logits, list(dataset.labels))
        expected = sgd_step(model, backward_plain(model, cache, deltas), 0.3)
        self.assertEqual(len(history), 1)
        self.assertLessEqual(max_param_error(trained, expected), 1e-10)

    def test_history_records(self):
        _, history = train(mlp(), blobs(n=8), TrainConfig(eta=0.1, k=2, batch_size=4, epochs=2))
        self.assertEqual([record['step'] for record in history], [1, 2, 3, 4])
        self.assertEqual([record['epoch'] for record in history], [0, 0, 1, 1])
        self.assertEqual({record['integrity'] for record in history}, {'off'})
        self.assertTrue(all(record['grad_norm'] > 0 for record in history))

    def test_deterministic(self):
        cfg = TrainConfig(eta=0.1, k=2, epochs=2, seed=4)
        first, _ = train(mlp(), blobs(n=8), cfg)
        second, _ = train(mlp(), blobs(n=8), cfg)
        self.assertLessEqual(max_param_error(first, second), 1e-12)

    def test_zero_epochs(self):
        model = mlp()
        trained, history = train(model, blobs(n=8), TrainConfig(eta=0.1, k=4, epochs=0))
        self.assertEqual(history, [])
        self.assertEqual(max_param_error(trained, model), 0.0)

    def test_integrity_during_training(self):
        model = mlp()
        cfg = TrainConfig(eta=0.1, k=4, epochs=1, integrity=True)
        _, history = train(model, blobs(n=8), cfg)
        self.assertEqual([record['integrity'] for record in history], ['ok', 'ok'])
        untrusted = UntrustedContext(model, workers=1)
        untrusted.inject_tamper(TamperPolicy(layer=0, equation=0, epsilon=1e-2))
        with self.assertLogs('pipeline.integrity', 'WARNING'):
            _, history = train(model, blobs(n=8), cfg, untrusted=untrusted)
        self.assertEqual([record['integrity'] for record in history], ['violation', 'violation'])

    def test_invalid_config(self):
        with self.assertRaises(ParameterError):
            TrainConfig(eta=0.0, k=2, epochs=1)
        with self.assertRaises(ParameterError):
            TrainConfig(eta=0.1, k=0, epochs=1)
        with self.assertRaises(ParameterError):
            TrainConfig(eta=0.1, k=4, epochs=1, batch_size=6)
        with self.assertRaises(ParameterError):
            TrainConfig(eta=0.1, k=4, epochs=1, threshold=1e-20)
        with self.assertRaises(ParameterError):
            TrainConfig(eta=0.1, k=4, epochs=1, loss='hinge')

    def test_empty_dataset(self):
        with self.assertRaises(ParameterError):
            train(mlp(), Dataset((), ()), TrainConfig(eta=0.1, k=1, epochs=1))

    def test_dataset_not_divisible(self):
        with self.assertRaises(ParameterError):
            train(mlp(), blobs(n=6), TrainConfig(eta=0.1, k=4, epochs=1))

    def test_evaluate(self):
        loss, acc = evaluate(mlp(), blobs(n=8))
        self.assertGreater(loss, 0.0)
        self.assertGreaterEqual(acc, 0.0)
        self.assertLessEqual(acc, 1.0)
