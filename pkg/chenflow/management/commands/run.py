# chenflow/management/commands/run.py
import configparser
from pathlib import Path

from django.conf import settings

from chenflow.analysis_suite import extinction_upper_bound, fit_lifespan_constant
from chenflow.config import load_run_config
from chenflow.exceptions import ChenFlowError
from chenflow.flow_engine import Termination, run_flow
from chenflow.mesh_core import validate
from chenflow.persistence import RunManifest, RunWriter, blob_hash, mesh_bytes

from ._base import EXIT_SINGULARITY, EXIT_SOLVER_FAILURE, FlowCommand


class Command(FlowCommand):
    help = 'Ejecuta una corrida de flujo descrita por un archivo INI'

    def add_arguments(self, parser):
        parser.add_argument('config_path', type=str, help='Archivo INI con [mesh], [flow] y [constants]')
        super().add_arguments(parser)

    def handle(self, *args, **options):
        config_path = options['config_path']
        threads = self.threads(options)

        try:
            run_config = load_run_config(config_path)
            mesh = run_config.mesh.build()
            validate(mesh)
        except (ChenFlowError, OSError) as e:
            self.fail(f'❌ {e}')

        out_dir = self.output_dir(
            options, Path(settings.FLOW_SETTINGS['OUTPUT_DIR']) / Path(config_path).stem
        )
        ini_text = run_config.to_ini_text()
        try:
            writer = RunWriter(out_dir)
            writer.write_config_echo(ini_text)
        except OSError as e:
            self.fail(f'❌ No se puede escribir en {out_dir}: {e}')

        self.stdout.write(self.style.WARNING(
            f'📂 Malla {run_config.mesh.describe()}: {mesh.num_vertices} vértices en R^{mesh.ambient_dim}'
        ))

        try:
            trajectory = run_flow(
                mesh,
                run_config.flow,
                run_config.constants,
                threads=threads,
                on_snapshot=writer.write_snapshot,
            )
        except OSError as e:
            self.fail(f'❌ Error de escritura durante la corrida: {e}')

        lifespan_c = None
        if run_config.flow.track_concentration:
            lifespan_c = fit_lifespan_constant(trajectory.records, trajectory.final_time)

        initial_area = trajectory.records[0].area
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(ini_text)
        manifest = RunManifest(
            config={name: dict(parser[name]) for name in parser.sections()},
            constants=run_config.constants.as_dict(),
            provenance=run_config.mesh.describe(),
            input_hash=blob_hash(ini_text.encode('utf-8'), mesh_bytes(mesh)),
            seed=options['seed'],
            threads=threads,
            termination=str(trajectory.termination),
            message=trajectory.message,
            steps=trajectory.final_state.step,
            final_time=trajectory.final_time,
            initial_area=initial_area,
            extinction_bound=extinction_upper_bound(initial_area, run_config.constants.n),
            lifespan_constant=lifespan_c,
            wall_seconds=trajectory.wall_seconds,
        )
        try:
            writer.write_manifest(manifest)
        except OSError as e:
            self.fail(f'❌ No se pudo escribir el manifiesto: {e}')

        last = trajectory.records_frame().tail(1)
        self.write_table(last, f'🏁 {trajectory.termination} en t={trajectory.final_time:.6e}')
        self.stdout.write(f'📁 Resultados en {out_dir}')

        if trajectory.termination == Termination.SINGULARITY:
            record = trajectory.records[-1]
            self.stdout.write(self.style.ERROR(
                f'⚠️  Concentración final: rho*={record.rho_star:.4g}, eta={record.eta_at_rho:.4g}, '
                f'max|A|={record.max_abs_A:.4g}, h_min={record.h_min:.4g}'
            ))
            self.fail(f'Singularidad detectada: {trajectory.message or "max|A| h_min sobre el umbral"}',
                      returncode=EXIT_SINGULARITY)
        if trajectory.termination == Termination.SOLVER_FAILURE:
            self.fail(f'Falla del solver: {trajectory.message}', returncode=EXIT_SOLVER_FAILURE)

        self.stdout.write(self.style.SUCCESS('✅ Corrida terminada'))
