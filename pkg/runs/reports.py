"""
Structured reports and the base class the run commands share.

Reports are JSON documents written to the command's stdout. They carry the
resolved config for provenance and the time the run took.

"""
import json
import logging
import math
import time

import numpy as np
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from leakage.bounds import LeakageParams, leakage_bound
from runs.forms import bind_config, read_config
from tensors.exceptions import DarknightError

logger = logging.getLogger(__name__)

MEGAPIXEL = 10 ** 6


def to_jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, 'to_dict'):
        return value.to_dict()
    raise TypeError("%r is not JSON serializable" % (value,))


def write_report(stream, report):
    stream.write(json.dumps(report, indent=2, default=to_jsonable, allow_nan=False))


def write_metrics(history, path):
    """
    One JSON record per line.

    """
    with open(path, 'w') as f:
        for record in history:
            f.write(json.dumps(record, default=to_jsonable, allow_nan=False) + '\n')


def leakage_summary(k, c1, ratio, sigma_sq):
    """
    The bound for one set of parameters. A zero mixing coefficient makes the
    ratio unbounded; the ratio and the bound are then reported as null.

    """
    summary = {'k': k, 'c1': c1, 'alpha_ratio_sq': None, 'sigma_sq': sigma_sq}
    if not math.isfinite(ratio):
        return dict(summary, nats=None, bits=None, leaked_entries_per_megapixel=None)
    bound = leakage_bound(LeakageParams(k=k, c1=c1, alpha_ratio_sq=ratio, sigma_sq=sigma_sq))
    return dict(
        summary,
        alpha_ratio_sq=ratio,
        nats=bound.nats,
        bits=bound.bits,
        leaked_entries_per_megapixel=bound.leaked_entries(MEGAPIXEL),
    )


def format_errors(form):
    messages = []
    for field, errors in form.errors.items():
        prefix = '' if field == '__all__' else '%s: ' % field
        messages.extend(prefix + error for error in errors)
    return "Invalid config. " + ' '.join(messages)


class ReportCommand(BaseCommand):
    """
    Reads --config, applies the flags on top, validates the result with
    form_class, calls run() and writes its report.

    Subclasses declare their flags with dest names matching form fields.

    """
    form_class = None

    def add_arguments(self, parser):
        parser.add_argument('--config', dest='config_file', help="JSON file holding the run configuration.")
        parser.add_argument('--seed', type=int)
        parser.add_argument('--workers', type=int)
        parser.add_argument('--noise-mean', dest='noise_mean', type=float)
        parser.add_argument('--noise-variance', dest='noise_variance', type=float)
        self.add_run_arguments(parser)

    def add_run_arguments(self, parser):
        pass

    def get_overrides(self, config, options):
        overrides = {
            name: options[name] for name in self.form_class.base_fields
            if options.get(name) is not None
        }
        noise = {
            key: options[option] for key, option in (('mean', 'noise_mean'), ('variance', 'noise_variance'))
            if options.get(option) is not None
        }
        if noise:
            base = config.get('noise')
            overrides['noise'] = dict(base if isinstance(base, dict) else {}, **noise)
        return overrides

    def handle(self, *args, **options):
        try:
            config = read_config(options.get('config_file'))
        except ValidationError as e:
            raise CommandError(' '.join(e.messages))
        form = bind_config(self.form_class, config, self.get_overrides(config, options))
        if not form.is_valid():
            raise CommandError(format_errors(form))
        started = time.perf_counter()
        try:
            report = self.run(form.cleaned_data)
        except (DarknightError, OSError) as e:
            raise CommandError(str(e))
        logger.info("%s finished in %.3fs", self.command_name, time.perf_counter() - started)
        report = dict(
            {'command': self.command_name, 'config': form.resolved_config()},
            **report,
            seconds=time.perf_counter() - started,
        )
        try:
            write_report(self.stdout, report)
        except ValueError as e:
            raise CommandError("Cannot write the report: %s" % e)
        self.check_report(report)

    @property
    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def run(self, config):
        raise NotImplementedError

    def check_report(self, report):
        pass
