import math
import os

from django.conf import settings

from leakage.normalization import NORMS
from pipeline.layers import Dense, ReLU, init_model, save_model
from pipeline.losses import LOSSES
from pipeline.training import TrainConfig, evaluate, train, trusted_context
from runs.datasets import SYNTHETIC, load_dataset, normalize_dataset, synthetic_dataset
from runs.forms import TrainForm
from runs.management.commands.infer import input_leakage
from runs.reports import ReportCommand, write_metrics
from tensors.ops import relative_error

METRICS_NAME = 'metrics.jsonl'
HIDDEN_UNITS = 16


def default_layers(input_shape, classes):
    return [Dense(math.prod(input_shape), HIDDEN_UNITS), ReLU(), Dense(HIDDEN_UNITS, classes)]


def trajectory_divergence(split_steps, plain_steps):
    divergence = 0.0
    for split, plain in zip(split_steps, plain_steps):
        for index in split.linear_indices():
            divergence = max(divergence, relative_error(split.layers[index].params, plain.layers[index].params))
    return divergence


class Command(ReportCommand):
    help = "Trains a model with blinded forward and backward passes."
    form_class = TrainForm

    def add_run_arguments(self, parser):
        parser.add_argument('--dataset', help="Directory holding inputs.dkt and labels.dkt.")
        parser.add_argument('--synthetic', choices=list(SYNTHETIC))
        parser.add_argument('--samples', type=int, help="Size of a synthetic dataset.")
        parser.add_argument('-k', '--k', dest='k', type=int, help="Virtual batch size.")
        parser.add_argument('--batch-size', dest='batch_size', type=int)
        parser.add_argument('--eta', type=float, help="Learning rate.")
        parser.add_argument('--epochs', type=int)
        parser.add_argument('--loss', choices=list(LOSSES))
        parser.add_argument('--normalize', choices=list(NORMS) + ['none'])
        parser.add_argument('--integrity', action='store_true', default=None)
        parser.add_argument('--threshold', type=float)
        parser.add_argument('--oracle', action='store_true', default=None,
                            help="Also train without blinding and report how far the weights drift apart.")
        parser.add_argument('--output', help="Directory for the trained model and metrics.")

    def run(self, config):
        if config['dataset']:
            dataset = load_dataset(config['dataset'])
        else:
            dataset = synthetic_dataset(config['synthetic'], config['samples'], config['seed'])
        dataset, c1 = normalize_dataset(dataset, config['normalize'] or 'l2')
        classes = max(2, max(dataset.labels) + 1)
        layers = config['layers'] or default_layers(dataset.input_shape, classes)
        model = init_model(layers, dataset.input_shape, config['seed'])
        cfg = TrainConfig(
            eta=config['eta'],
            k=config['k'],
            epochs=config['epochs'],
            loss=config['loss'],
            seed=config['seed'],
            integrity=config['integrity'],
            threshold=config['threshold'],
            batch_size=config['batch_size'],
            noise_mean=config['noise']['mean'],
            noise_variance=config['noise']['variance'],
            workers=config['workers'],
        )
        trusted = trusted_context(cfg)
        split_steps = []
        trained, history = train(model, dataset, cfg, trusted=trusted, on_step=lambda step, m: split_steps.append(m))

        save_model(trained, config['output'], settings.DARKNIGHT_TENSOR_DTYPE)
        metrics_path = os.path.join(config['output'], METRICS_NAME)
        write_metrics(history, metrics_path)
        loss, accuracy = evaluate(trained, dataset, cfg.loss, cfg.k)
        report = {
            'samples': len(dataset),
            'steps': len(history),
            'final_loss': loss,
            'accuracy': accuracy,
            'integrity': sorted({record['integrity'] for record in history}),
            'model': config['output'],
            'metrics': metrics_path,
            'leakage': input_leakage(model, trusted, cfg.k, c1, config['noise']),
        }
        if config['oracle']:
            plain_steps = []
            plain, _ = train(model, dataset, cfg, engine='plain', on_step=lambda step, m: plain_steps.append(m))
            report['oracle'] = {
                'max_divergence': trajectory_divergence(split_steps, plain_steps),
                'final_loss_difference': abs(evaluate(plain, dataset, cfg.loss, cfg.k)[0] - loss),
            }
        return report
