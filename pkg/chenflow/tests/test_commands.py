# chenflow/tests/test_commands.py
import json
from io import StringIO

import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from chenflow.analysis_suite import DIAGNOSTIC_COLUMNS
from chenflow.config import RunConfig, load_run_config
from chenflow.management.commands.validate import parse_level_range
from chenflow.mesh_core import ImmersedMesh, icosphere, save_obj

from .test_mesh_core import TmpDirMixin

SPHERE_RUN = """
[mesh]
generator = icosphere
radius = 1.0
level = 2

[flow]
tau_scale = 5.0
diag_every = 2
"""

DUMBBELL_RUN = """
[mesh]
generator = dumbbell
neck_ratio = 0.1
level = 2

[flow]
tau_scale = 1.0
diag_every = 50
track_concentration = false
"""


class CommandTestCase(TmpDirMixin, SimpleTestCase):

    def call(self, *args, **options):
        out = StringIO()
        call_command(*args, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()

    def assertExitCode(self, returncode, *args, **options):
        with self.assertRaises(CommandError) as ctx:
            self.call(*args, **options)
        self.assertEqual(ctx.exception.returncode, returncode)
        return ctx.exception

    def write_config(self, text, name='corrida.ini'):
        path = self.tmp / name
        path.write_text(text)
        return path


class RunCommandTests(CommandTestCase):

    def test_sphere_run_writes_outputs(self):
        config_path = self.write_config(SPHERE_RUN)
        out_dir = self.tmp / 'salida'
        output = self.call('run', str(config_path), out=str(out_dir))
        self.assertIn('Extinct', output)

        frame = pd.read_csv(out_dir / 'diagnostics.csv')
        self.assertEqual(list(frame.columns), list(DIAGNOSTIC_COLUMNS))
        self.assertTrue((frame['area'].diff().dropna() < 0).all())

        meta = json.loads((out_dir / 'meta.json').read_text())
        self.assertEqual(meta['termination'], 'Extinct')
        self.assertEqual(meta['seed'], 12345)
        self.assertEqual(len(meta['input_hash']), 40)
        self.assertEqual(len(meta['snapshots']), len(frame))
        for snapshot in meta['snapshots']:
            self.assertTrue((out_dir / snapshot['file']).exists())

        echo = RunConfig.from_ini_text((out_dir / 'config.ini').read_text())
        self.assertEqual(echo, load_run_config(config_path))

    def test_runs_are_reproducible(self):
        config_path = self.write_config(SPHERE_RUN)
        first, second = self.tmp / 'a', self.tmp / 'b'
        self.call('run', str(config_path), out=str(first))
        self.call('run', str(config_path), out=str(second))
        self.assertEqual((first / 'diagnostics.csv').read_bytes(), (second / 'diagnostics.csv').read_bytes())
        steps = sorted(p.name for p in first.glob('step_*'))
        self.assertTrue(steps)
        for name in steps:
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes())

    def test_missing_mesh_file(self):
        config_path = self.write_config("[mesh]\npath = no_existe.obj\n")
        self.assertExitCode(1, 'run', str(config_path), out=str(self.tmp / 'x'))

    def test_invalid_config(self):
        config_path = self.write_config("[mesh]\ngenerator = icosphere\n[flow]\nfamily = ricci\n")
        self.assertExitCode(1, 'run', str(config_path), out=str(self.tmp / 'x'))

    def test_singularity_exit_code(self):
        config_path = self.write_config(SPHERE_RUN + "stop_max_A_h = 0.001\n")
        out_dir = self.tmp / 'singular'
        self.assertExitCode(2, 'run', str(config_path), out=str(out_dir))
        meta = json.loads((out_dir / 'meta.json').read_text())
        self.assertEqual(meta['termination'], 'SingularityDetected')

    def test_dumbbell_neck_pinch_exit_code(self):
        config_path = self.write_config(DUMBBELL_RUN)
        out_dir = self.tmp / 'pesa'
        error = self.assertExitCode(2, 'run', str(config_path), out=str(out_dir))
        self.assertIn('Singularidad', str(error))
        meta = json.loads((out_dir / 'meta.json').read_text())
        self.assertEqual(meta['termination'], 'SingularityDetected')
        frame = pd.read_csv(out_dir / 'diagnostics.csv')
        self.assertEqual(len(frame), len(meta['snapshots']))

    def test_unwritable_output_directory(self):
        blocker = self.tmp / 'archivo'
        blocker.write_text('no soy un directorio\n')
        config_path = self.write_config(SPHERE_RUN)
        error = self.assertExitCode(1, 'run', str(config_path), out=str(blocker / 'salida'))
        self.assertIn('No se puede escribir', str(error))

    def test_solver_failure_exit_code(self):
        config_path = self.write_config(SPHERE_RUN + "solver_maxiter = 1\n")
        self.assertExitCode(3, 'run', str(config_path), out=str(self.tmp / 'falla'))


class ValidateCommandTests(CommandTestCase):

    def test_level_range_parsing(self):
        self.assertEqual(parse_level_range('2..4'), [2, 3, 4])
        self.assertEqual(parse_level_range('2-3'), [2, 3])
        self.assertEqual(parse_level_range('3'), [3])
        for text in ('4..2', 'a', '2...4'):
            with self.subTest(text), self.assertRaises(ValueError):
                parse_level_range(text)

    def test_convergence_passes(self):
        output = self.call('validate', '2..3', out=str(self.tmp))
        self.assertIn('H_error', output)
        table = pd.read_csv(self.tmp / 'convergence.csv')
        self.assertEqual(list(table['level']), [2, 3])

    def test_level_over_budget(self):
        self.assertExitCode(1, 'validate', '9')


class BenchCommandTests(CommandTestCase):

    def test_sphere_bench_passes(self):
        output = self.call('bench', 'icosphere:radius=1,level=4', out=str(self.tmp),
                           dump_field=str(self.tmp / 'campo.csv'))
        self.assertIn('gauss_bonnet', output)
        table = pd.read_csv(self.tmp / 'bench.csv')
        self.assertTrue(table['passed'].all())
        self.assertTrue((self.tmp / 'campo.csv').exists())

    def test_open_mesh_fails(self):
        sphere = icosphere(1.0, 2)
        broken = ImmersedMesh.from_arrays(sphere.positions, sphere.faces[1:])
        path = save_obj(broken, self.tmp / 'rota.obj')
        self.assertExitCode(1, 'bench', str(path))

    def test_unknown_generator_parameter(self):
        self.assertExitCode(1, 'bench', 'icosphere:color=rojo')


class BlowupCommandTests(CommandTestCase):

    def test_empty_directory(self):
        self.assertExitCode(1, 'blowup', str(self.tmp))

    def test_sphere_run_blowup(self):
        run_dir = self.tmp / 'esfera'
        self.call('run', str(self.write_config(SPHERE_RUN)), out=str(run_dir))
        self.call('blowup', str(run_dir))
        lines = (run_dir / 'blowup.jsonl').read_text().strip().splitlines()
        self.assertGreaterEqual(len(lines), 1)
        first = json.loads(lines[0])
        self.assertIn('sphere_rms', first)
        self.assertTrue((run_dir / first['mesh']).exists())
