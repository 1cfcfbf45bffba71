from django.core.management.base import CommandError

from pipeline.engine import infer_split
from pipeline.integrity import OK, VIOLATION
from runs.forms import VerifyForm
from runs.management.commands.infer import add_blinded_run_arguments, prepare_run
from runs.reports import ReportCommand

VIOLATION_EXIT_CODE = 2


class Command(ReportCommand):
    help = "Runs blinded inference with integrity rows and reports whether any output was altered."
    form_class = VerifyForm

    def add_run_arguments(self, parser):
        add_blinded_run_arguments(parser)
        parser.add_argument('--tamper', help="layer:equation:epsilon[:entry] perturbation to inject.")

    def run(self, config):
        model, inputs, _, trusted, untrusted = prepare_run(config, integrity=True)
        if config['tamper'] is not None:
            untrusted.inject_tamper(config['tamper'])
        infer_split(model, inputs, config['k'], trusted, untrusted)
        results = trusted.release_integrity_results()
        return {
            'status': OK if all(result.ok for result in results) else VIOLATION,
            'threshold': config['threshold'],
            'max_residual': max((result.max_residual for result in results), default=0.0),
            'results': [result.to_dict() for result in results],
        }

    def check_report(self, report):
        if report['status'] == VIOLATION:
            raise CommandError(
                "Integrity violation: residual %.3g exceeds %.3g." % (report['max_residual'], report['threshold']),
                returncode=VIOLATION_EXIT_CODE,
            )
