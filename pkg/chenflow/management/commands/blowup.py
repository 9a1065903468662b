# chenflow/management/commands/blowup.py
import pandas as pd

from chenflow.analysis_suite import blowup_report
from chenflow.exceptions import ChenFlowError
from chenflow.persistence import load_run, write_blowup

from ._base import FlowCommand


class Command(FlowCommand):
    help = 'Reescalamientos de blowup sobre las instantáneas de una corrida'

    def add_arguments(self, parser):
        parser.add_argument('run_dir', type=str, help='Directorio de una corrida')
        parser.add_argument('--eps3', type=float, default=None,
                            help='Umbral de concentración (por defecto eps1 de la corrida)')
        parser.add_argument('--radii', type=float, nargs='+', default=None,
                            help='Cronograma de radios decreciente')
        super().add_arguments(parser)

    def handle(self, *args, **options):
        threads = self.threads(options)
        try:
            run = load_run(options['run_dir'])
            eps3 = options['eps3']
            if eps3 is None:
                eps3 = run.manifest.constants.get('eps1', 1.0) if run.manifest else 1.0
            report = blowup_report(run, eps3, radii=options['radii'], threads=threads)
        except (ChenFlowError, OSError) as e:
            self.fail(f'❌ {e}')

        out_dir = self.output_dir(options, run.run_dir)
        path = write_blowup(report, out_dir)

        table = pd.DataFrame([item.as_json() for item in report]).drop(columns=['x'])
        self.write_table(table, f'🔎 Blowup con eps3={eps3:g}')
        self.stdout.write(self.style.SUCCESS(f'✅ Reporte en {path}'))
