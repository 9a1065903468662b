# chenflow/management/commands/validate.py
import re
from pathlib import Path

from django.conf import settings

from chenflow.analysis_suite import convergence_passed, convergence_table
from chenflow.exceptions import ChenFlowError

from ._base import FlowCommand

LEVEL_RANGE = re.compile(r'^(\d+)(?:(?:-|\.\.)(\d+))?$')


def parse_level_range(text: str):
    """'2..4', '2-4' o '3' -> lista de niveles"""
    match = LEVEL_RANGE.match(text.strip())
    if not match:
        raise ValueError(f"rango de niveles inválido: '{text}'")
    first = int(match.group(1))
    last = int(match.group(2)) if match.group(2) else first
    if last < first:
        raise ValueError(f"rango vacío: '{text}'")
    return list(range(first, last + 1))


class Command(FlowCommand):
    help = 'Estudio de convergencia de operadores en la esfera unitaria'

    def add_arguments(self, parser):
        parser.add_argument('level_range', type=str, nargs='?', default='2..4',
                            help="Niveles de icosfera, p. ej. '2..4'")
        super().add_arguments(parser)

    def handle(self, *args, **options):
        try:
            levels = parse_level_range(options['level_range'])
        except ValueError as e:
            self.fail(f'❌ {e}')

        max_level = settings.FLOW_SETTINGS.get('MAX_ICOSPHERE_LEVEL', 7)
        if levels[-1] > max_level:
            self.fail(f'❌ El nivel {levels[-1]} excede el presupuesto de memoria (máximo {max_level})')

        try:
            table = convergence_table(levels)
        except ChenFlowError as e:
            self.fail(f'❌ {e}')

        self.write_table(table, f'📐 Convergencia en niveles {levels[0]}..{levels[-1]}')
        if options['out']:
            out_dir = Path(options['out'])
            out_dir.mkdir(parents=True, exist_ok=True)
            table.to_csv(out_dir / 'convergence.csv', index=False, float_format='%.17g')

        if not convergence_passed(table):
            self.fail('❌ Regresión: algún error no decrece con el nivel')
        self.stdout.write(self.style.SUCCESS('✅ Todos los errores decrecen'))
