import json
import os
import shutil
import tempfile
from io import StringIO

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from pipeline.contexts import TamperPolicy
from pipeline.layers import Dense, init_model, load_model, save_model
from runs.datasets import load_dataset, make_blobs, make_xor, normalize, save_dataset
from runs.forms import BoundForm, TrainForm, VerifyForm, bind_config
from runs.reports import leakage_summary, write_report
from runs.management.commands.train import default_layers
from tensors.exceptions import TensorFormatError
from tensors.io import read_tensor, write_tensor


def run_command(name, **options):
    stdout = StringIO()
    call_command(name, stdout=stdout, **options)
    return json.loads(stdout.getvalue())


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)
        super().tearDown()

    def path(self, *parts):
        return os.path.join(self.directory, *parts)

    def write_config(self, config):
        path = self.path('config.json')
        with open(path, 'w') as f:
            json.dump(config, f)
        return path


class FormTests(SimpleTestCase):
    def test_unknown_keys_rejected(self):
        form = bind_config(BoundForm, {'bogus': 1}, {})
        self.assertFalse(form.is_valid())
        self.assertIn('bogus', str(form.errors))

    def test_flags_win(self):
        form = bind_config(BoundForm, {'k': 2, 'sigma_sq': 1e8}, {'sigma_sq': 8e8})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.cleaned_data['k'], 2)
        self.assertEqual(form.cleaned_data['sigma_sq'], 8e8)

    def test_tamper_spec(self):
        form = bind_config(VerifyForm, {'model': 'm', 'inputs': 'x.dkt'}, {'tamper': '0:2:0.01'})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.cleaned_data['tamper'], TamperPolicy(0, 2, 0.01))
        form = bind_config(VerifyForm, {'model': 'm', 'inputs': 'x.dkt', 'tamper': {'layer': 0, 'equation': 1, 'epsilon': 1.0, 'entry': 3}}, {})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.cleaned_data['tamper'].entry, 3)

    def test_malformed_tamper_spec(self):
        for spec in ('0:2', 'a:b:c', '0:2:inf', '0:-1:0.1'):
            form = bind_config(VerifyForm, {'model': 'm', 'inputs': 'x.dkt', 'tamper': spec}, {})
            self.assertFalse(form.is_valid(), spec)
            self.assertIn('tamper', form.errors)

    @override_settings(DARKNIGHT_NOISE_MEAN=5.0, DARKNIGHT_NOISE_VARIANCE=2e6, DARKNIGHT_UNTRUSTED_WORKERS=3)
    def test_noise_and_workers_default_from_settings(self):
        form = bind_config(BoundForm, {'noise': {'mean': 1.0}}, {})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.cleaned_data['noise'], {'mean': 1.0, 'variance': 2e6})
        self.assertEqual(form.cleaned_data['workers'], 3)

    def test_invalid_noise(self):
        for noise in ({'variance': 0}, {'variance': 'loud'}, {'scale': 1.0}, [1.0]):
            self.assertFalse(bind_config(BoundForm, {'noise': noise}, {}).is_valid(), noise)

    def test_model_spec(self):
        layers = [{'kind': 'dense', 'in_features': 2, 'out_features': 4}, {'kind': 'relu'}]
        form = bind_config(TrainForm, {'synthetic': 'xor', 'layers': layers, 'output': 'out'}, {})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual([layer.kind for layer in form.cleaned_data['layers']], ['dense', 'relu'])
        self.assertEqual(form.resolved_config()['layers'][0]['out_features'], 4)

    def test_invalid_model_spec(self):
        form = bind_config(TrainForm, {'synthetic': 'xor', 'layers': [{'kind': 'lstm'}], 'output': 'out'}, {})
        self.assertFalse(form.is_valid())
        self.assertIn('layers', form.errors)

    def test_dataset_source_required(self):
        self.assertFalse(bind_config(TrainForm, {'output': 'out'}, {}).is_valid())
        self.assertFalse(bind_config(TrainForm, {'output': 'out', 'synthetic': 'xor', 'dataset': 'd'}, {}).is_valid())

    def test_batch_size_multiple_of_k(self):
        self.assertFalse(bind_config(TrainForm, {'output': 'o', 'synthetic': 'xor', 'k': 4, 'batch_size': 6}, {}).is_valid())


class DatasetTests(TempDirMixin, SimpleTestCase):
    def test_xor_labels(self):
        dataset = make_xor(samples=64, seed=1)
        self.assertEqual(len(dataset), 64)
        for x, label in zip(dataset.inputs, dataset.labels):
            self.assertEqual(label, int(np.sign(x[0]) != np.sign(x[1])))
        self.assertEqual(sum(dataset.labels), 32)

    def test_blobs_deterministic(self):
        first, second = make_blobs(seed=3), make_blobs(seed=3)
        np.testing.assert_array_equal(np.stack(first.inputs), np.stack(second.inputs))
        self.assertEqual(first.labels, second.labels)
        self.assertEqual(sum(first.labels), 32)

    def test_save_and_load(self):
        dataset = make_blobs(samples=8, seed=2)
        save_dataset(dataset, self.directory)
        loaded = load_dataset(self.directory)
        np.testing.assert_array_equal(np.stack(loaded.inputs), np.stack(dataset.inputs))
        self.assertEqual(loaded.labels, dataset.labels)

    def test_fractional_labels(self):
        write_tensor(np.ones((2, 3)), self.path('inputs.dkt'))
        write_tensor(np.array([0.0, 0.5]), self.path('labels.dkt'))
        with self.assertRaises(TensorFormatError):
            load_dataset(self.directory)

    def test_normalize_none_reports_largest_entry(self):
        inputs, c1 = normalize([np.array([3.0, -4.0])], 'none')
        np.testing.assert_array_equal(inputs[0], [3.0, -4.0])
        self.assertEqual(c1, 4.0)


class BoundCommandTests(TempDirMixin, SimpleTestCase):
    def test_published_values(self):
        report = run_command('bound', k=4, c1=1.0, ratio=10.0, sigma_sq=4e8)
        self.assertAlmostEqual(report['bound']['nats'], 2e-6, delta=1e-18)
        report = run_command('bound', sigma_sq=8e8)
        self.assertAlmostEqual(report['bound']['nats'], 1e-6, delta=1e-18)
        self.assertAlmostEqual(report['bound']['bits'], 1e-6 / np.log(2))
        self.assertAlmostEqual(report['bound']['leaked_entries_per_megapixel'], 1.0)

    def test_zero_signal(self):
        report = run_command('bound', k=4, c1=0.0, ratio=1.0, sigma_sq=1e4)
        self.assertEqual(report['bound']['nats'], 0.0)

    def test_table1(self):
        report = run_command('bound', table1=True)
        self.assertEqual(
            [row['status'] for row in report['table1']],
            ['KNOWN-DISCREPANT', 'KNOWN-DISCREPANT', 'pass', 'pass', 'pass'],
        )

    def test_table1_flag(self):
        stdout = StringIO()
        call_command('bound', '-k', '4', '--c1', '1', '--ratio', '10', '--sigma-sq', '4e8', '--table1', stdout=stdout)
        report = json.loads(stdout.getvalue())
        self.assertEqual(len(report['table1']), 5)
        self.assertTrue(report['config']['table1'])

    def test_calibration(self):
        report = run_command('bound', target=1e-6)
        self.assertAlmostEqual(report['calibrated_sigma_sq'] / 8e8, 1.0, places=12)

    def test_config_file_and_provenance(self):
        report = run_command('bound', config_file=self.write_config({'sigma_sq': 1e8, 'k': 4}), sigma_sq=8e8)
        self.assertAlmostEqual(report['bound']['nats'], 1e-6, delta=1e-18)
        self.assertEqual(report['command'], 'bound')
        self.assertEqual(report['config']['sigma_sq'], 8e8)

    def test_invalid_config(self):
        with self.assertRaises(CommandError):
            run_command('bound', config_file=self.write_config({'k': 4, 'sigma': 1.0}))
        with self.assertRaises(CommandError):
            run_command('bound', sigma_sq=-1.0)
        with self.assertRaises(CommandError):
            run_command('bound', config_file=self.path('missing.json'))


class InferCommandTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.inputs = np.array([[0.5, -1.0, 2.0], [3.0, 0.25, -0.5], [1.0, 1.0, 1.0]])
        write_tensor(self.inputs, self.path('inputs.dkt'))

    def save_identity_model(self):
        model = init_model([Dense(3, 3)], (3,), 0)
        save_model(model.with_params({0: np.hstack([np.eye(3), np.zeros((3, 1))])}), self.path('identity'))
        return self.path('identity')

    def save_random_model(self):
        save_model(init_model([Dense(3, 4)], (3,), 7), self.path('random'))
        return self.path('random')

    def test_identity_model(self):
        report = run_command('infer', model=self.save_identity_model(), inputs=self.path('inputs.dkt'), k=2, normalize='none')
        self.assertEqual(report['samples'], 3)
        np.testing.assert_allclose(np.array(report['outputs']), self.inputs, atol=1e-9)
        self.assertEqual(report['leakage']['c1'], 3.0)

    def test_check_plain(self):
        report = run_command('infer', model=self.save_random_model(), inputs=self.path('inputs.dkt'), k=3, check_plain=True)
        self.assertLessEqual(report['check_plain']['max_relative_error'], 1e-9)
        self.assertGreater(report['leakage']['nats'], 0.0)

    def test_outputs_file(self):
        run_command('infer', model=self.save_random_model(), inputs=self.path('inputs.dkt'), k=1, output=self.path('out.dkt'))
        self.assertEqual(read_tensor(self.path('out.dkt')).shape, (3, 4))

    def test_integrity_results(self):
        report = run_command('infer', model=self.save_random_model(), inputs=self.path('inputs.dkt'), k=2, integrity=True)
        self.assertEqual([result['status'] for result in report['integrity']], ['ok', 'ok'])

    def test_k_exceeds_samples(self):
        with self.assertRaises(CommandError):
            run_command('infer', model=self.save_random_model(), inputs=self.path('inputs.dkt'), k=4)

    def test_unreadable_files(self):
        with self.assertRaises(CommandError):
            run_command('infer', model=self.path('nowhere'), inputs=self.path('inputs.dkt'), k=1)
        with open(self.path('broken.dkt'), 'wb') as f:
            f.write(b'NOTATENSOR')
        with self.assertRaises(CommandError):
            run_command('infer', model=self.save_random_model(), inputs=self.path('broken.dkt'), k=1)

    def test_deterministic(self):
        options = {'model': self.save_random_model(), 'inputs': self.path('inputs.dkt'), 'k': 3, 'seed': 5}
        self.assertEqual(run_command('infer', **options)['outputs'], run_command('infer', **options)['outputs'])


class VerifyCommandTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        rng = np.random.default_rng(0)
        write_tensor(rng.normal(size=(4, 3)), self.path('inputs.dkt'))
        save_model(init_model([Dense(3, 4)], (3,), 1), self.path('model'))

    def verify(self, **options):
        return run_command('verify', model=self.path('model'), inputs=self.path('inputs.dkt'), **options)

    def test_honest_run(self):
        report = self.verify(k=2)
        self.assertEqual(report['status'], 'ok')
        self.assertLessEqual(report['max_residual'], 1e-9)
        self.assertEqual(len(report['results']), 2)

    def test_tampered_run(self):
        stdout = StringIO()
        with self.assertLogs('pipeline.integrity', 'WARNING'):
            with self.assertRaises(CommandError) as cm:
                call_command('verify', model=self.path('model'), inputs=self.path('inputs.dkt'), tamper='0:2:0.01', stdout=stdout)
        self.assertEqual(cm.exception.returncode, 2)
        report = json.loads(stdout.getvalue())
        self.assertEqual(report['status'], 'violation')
        self.assertEqual(report['config']['tamper']['epsilon'], 0.01)

    def test_below_threshold(self):
        self.assertEqual(self.verify(tamper='0:2:1e-13')['status'], 'ok')

    def test_malformed_tamper(self):
        with self.assertRaises(CommandError) as cm:
            self.verify(tamper='0:2')
        self.assertEqual(cm.exception.returncode, 1)

    def test_tamper_on_missing_layer(self):
        with self.assertRaises(CommandError):
            self.verify(tamper='3:0:0.01')


class TrainCommandTests(TempDirMixin, SimpleTestCase):
    def test_xor(self):
        report = run_command('train', synthetic='xor', epochs=200, output=self.path('xor'))
        self.assertEqual(report['accuracy'], 1.0)
        self.assertEqual(report['steps'], 200 * 16)

    def test_oracle(self):
        report = run_command('train', synthetic='blobs', samples=32, epochs=3, oracle=True, output=self.path('blobs'))
        self.assertLessEqual(report['oracle']['max_divergence'], 1e-7)
        self.assertLessEqual(report['oracle']['final_loss_difference'], 1e-6)

    def test_zero_epochs_keeps_initialization(self):
        report = run_command('train', synthetic='blobs', epochs=0, seed=3, output=self.path('init'))
        self.assertEqual(report['steps'], 0)
        saved = load_model(self.path('init'))
        expected = init_model(default_layers((2,), 2), (2,), 3)
        for index in expected.linear_indices():
            np.testing.assert_array_equal(saved.layers[index].params, expected.layers[index].params)

    def test_metrics_log(self):
        report = run_command('train', synthetic='blobs', samples=16, k=2, batch_size=4, epochs=2, integrity=True, output=self.path('m'))
        with open(report['metrics']) as f:
            records = [json.loads(line) for line in f]
        self.assertEqual(len(records), 8)
        self.assertEqual(set(records[0]), {'step', 'epoch', 'loss', 'grad_norm', 'integrity'})
        self.assertEqual(report['integrity'], ['ok'])

    def test_dataset_directory(self):
        save_dataset(make_blobs(samples=16, seed=1), self.path('data'))
        config = self.write_config({'dataset': self.path('data'), 'k': 4, 'epochs': 1, 'loss': 'mse'})
        report = run_command('train', config_file=config, output=self.path('out'))
        self.assertEqual(report['steps'], 4)
        self.assertEqual(report['config']['loss'], 'mse')

    def test_invalid_dataset_size(self):
        with self.assertRaises(CommandError):
            run_command('train', synthetic='blobs', samples=10, k=4, output=self.path('bad'))


class ReportTests(SimpleTestCase):
    def test_unbounded_ratio_reported_as_null(self):
        summary = leakage_summary(4, 1.0, float('inf'), 1e4)
        self.assertIsNone(summary['alpha_ratio_sq'])
        self.assertIsNone(summary['nats'])
        stream = StringIO()
        write_report(stream, {'leakage': summary})
        self.assertIsNone(json.loads(stream.getvalue())['leakage']['bits'])

    def test_non_finite_values_rejected(self):
        with self.assertRaises(ValueError):
            write_report(StringIO(), {'value': float('nan')})
