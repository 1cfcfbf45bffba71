import numpy as np
from django.conf import settings
from django.core.management.base import CommandError

from leakage.normalization import NORMS
from pipeline.contexts import TrustedContext, UntrustedContext
from pipeline.engine import forward_plain, infer_split
from pipeline.layers import load_model
from runs.datasets import normalize, read_inputs
from runs.forms import InferForm
from runs.reports import ReportCommand, leakage_summary
from tensors.io import write_tensor
from tensors.ops import relative_error


def add_blinded_run_arguments(parser):
    parser.add_argument('--model', help="Directory holding a saved model.")
    parser.add_argument('--inputs', help="DKTENSOR file of stacked inputs.")
    parser.add_argument('-k', '--k', dest='k', type=int, help="Virtual batch size.")
    parser.add_argument('--normalize', choices=list(NORMS) + ['none'])
    parser.add_argument('--threshold', type=float, help="Integrity threshold.")


def prepare_run(config, integrity):
    """
    Loads the model and inputs and builds the two contexts for a blinded
    inference run.

    """
    model = load_model(config['model'])
    inputs = read_inputs(config['inputs'])
    if config['k'] > len(inputs):
        raise CommandError("k=%d exceeds the %d available inputs." % (config['k'], len(inputs)))
    inputs, c1 = normalize(inputs, config['normalize'] or 'l2')
    noise = config['noise']
    trusted = TrustedContext(
        seed=config['seed'],
        noise_mean=noise['mean'],
        noise_variance=noise['variance'],
        integrity=integrity,
        threshold=config['threshold'],
    )
    untrusted = UntrustedContext(model, workers=config['workers'])
    return model, inputs, c1, trusted, untrusted


def input_leakage(model, trusted, k, c1, noise):
    linear = model.linear_indices()
    if not linear:
        return None
    return leakage_summary(k, c1, trusted.coefficient_ratios.get(linear[0], 1.0), noise['variance'])


class Command(ReportCommand):
    help = "Runs blinded inference over a file of stacked inputs."
    form_class = InferForm

    def add_run_arguments(self, parser):
        add_blinded_run_arguments(parser)
        parser.add_argument('--check-plain', dest='check_plain', action='store_true', default=None,
                            help="Also run the unblinded model and report the largest relative error.")
        parser.add_argument('--integrity', action='store_true', default=None)
        parser.add_argument('--output', help="DKTENSOR file for the stacked outputs.")

    def run(self, config):
        model, inputs, c1, trusted, untrusted = prepare_run(config, config['integrity'])
        outputs = infer_split(model, inputs, config['k'], trusted, untrusted)
        report = {
            'samples': len(inputs),
            'outputs': outputs,
            'leakage': input_leakage(model, trusted, config['k'], c1, config['noise']),
        }
        if config['check_plain']:
            plain, _ = forward_plain(model, inputs)
            report['check_plain'] = {
                'max_relative_error': max(relative_error(got, expected) for got, expected in zip(outputs, plain)),
            }
        if config['integrity']:
            report['integrity'] = [result.to_dict() for result in trusted.release_integrity_results()]
        if config['output']:
            write_tensor(np.stack(outputs), config['output'], settings.DARKNIGHT_TENSOR_DTYPE)
        return report
