# chenflow/management/commands/bench.py
from pathlib import Path

from chenflow.analysis_suite import run_bench
from chenflow.config import parse_mesh_spec
from chenflow.diffgeo_ops import build_operators, curvature_field, dump_field
from chenflow.exceptions import ChenFlowError

from ._base import FlowCommand


class Command(FlowCommand):
    help = 'Banco numérico de desigualdades sobre una malla o un generador'

    def add_arguments(self, parser):
        parser.add_argument('mesh', type=str,
                            help="Ruta de malla o generador, p. ej. 'icosphere:radius=1,level=4'")
        parser.add_argument('--dump-field', type=str, default=None,
                            help='Archivo .csv o .npz con cantidades por vértice')
        super().add_arguments(parser)

    def handle(self, *args, **options):
        try:
            source = parse_mesh_spec(options['mesh'])
            mesh = source.build()
            table = run_bench(mesh, seed=options['seed'])
        except (ChenFlowError, OSError) as e:
            self.fail(f'❌ {e}')

        self.write_table(table, f'🧪 Banco sobre {source.describe()}')

        if options['dump_field']:
            ops = build_operators(mesh)
            dump_field(curvature_field(mesh, ops), ops, options['dump_field'])
        if options['out']:
            out_dir = Path(options['out'])
            out_dir.mkdir(parents=True, exist_ok=True)
            table.to_csv(out_dir / 'bench.csv', index=False, float_format='%.17g')

        failed = table.loc[~table['passed'], 'check'].tolist()
        if failed:
            self.fail(f'❌ Chequeos fallidos: {", ".join(failed)}')
        self.stdout.write(self.style.SUCCESS(f'✅ {len(table)} chequeos aprobados'))
