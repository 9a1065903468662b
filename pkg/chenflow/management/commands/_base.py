# chenflow/management/commands/_base.py
"""Opciones globales y utilidades comunes a los comandos de chenflow"""

from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

EXIT_FAILURE = 1
EXIT_SINGULARITY = 2
EXIT_SOLVER_FAILURE = 3


class FlowCommand(BaseCommand):
    """Agrega --out, --threads y --seed a cada subcomando"""

    def add_arguments(self, parser):
        parser.add_argument('--out', type=str, default=None, help='Directorio de salida')
        parser.add_argument(
            '--threads', type=int, default=settings.FLOW_SETTINGS.get('THREADS', 1),
            help='Máximo de hilos internos (1 = reproducible bit a bit)',
        )
        parser.add_argument(
            '--seed', type=int, default=settings.FLOW_SETTINGS.get('SEED', 12345),
            help='Semilla del generador aleatorio',
        )

    def fail(self, message, returncode=EXIT_FAILURE):
        raise CommandError(message, returncode=returncode)

    def threads(self, options) -> int:
        threads = options['threads']
        if threads < 1:
            self.fail(f'--threads debe ser >= 1 (recibido {threads})')
        return threads

    def output_dir(self, options, default) -> Path:
        return Path(options['out']) if options['out'] else Path(default)

    def write_table(self, frame, title):
        self.stdout.write(self.style.SUCCESS('=' * 60))
        self.stdout.write(self.style.SUCCESS(title))
        self.stdout.write(frame.to_string(index=False))
        self.stdout.write(self.style.SUCCESS('=' * 60))
