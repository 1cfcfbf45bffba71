from leakage.bounds import calibrate_sigma, reproduce_table1
from runs.forms import BoundForm
from runs.reports import ReportCommand, leakage_summary


class Command(ReportCommand):
    help = "Prints the leakage bound for a batch size, input bound, coefficient ratio and noise variance."
    form_class = BoundForm

    def add_run_arguments(self, parser):
        parser.add_argument('-k', '--k', dest='k', type=int, help="Virtual batch size.")
        parser.add_argument('--c1', type=float, help="Bound on the magnitude of any input entry.")
        parser.add_argument('--ratio', type=float, help="Squared max/min mixing coefficient ratio.")
        parser.add_argument('--sigma-sq', dest='sigma_sq', type=float, help="Noise variance.")
        parser.add_argument('--target', type=float, help="Leakage in nats to calibrate the noise for.")
        parser.add_argument('--table1', action='store_true', default=None,
                            help="Also check the bound against the published noise settings.")
        parser.add_argument('--tolerance', type=float)

    def run(self, config):
        sigma_sq = config['sigma_sq'] or config['noise']['variance']
        report = {'bound': leakage_summary(config['k'], config['c1'], config['ratio'], sigma_sq)}
        if config['target'] is not None:
            report['calibrated_sigma_sq'] = calibrate_sigma(config['target'], config['k'], config['c1'], config['ratio'])
        if config['table1']:
            report['table1'] = reproduce_table1(config['tolerance'])
        return report
