# chenflow/persistence.py
"""
Directorios de corrida:

    <run>/step_<k>.obj (o .nobj si N != 3)
    <run>/diagnostics.csv
    <run>/meta.json          manifiesto de la corrida
    <run>/blowup.jsonl       reporte de blowup y mallas blowup_<j>.obj
"""

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from .analysis_suite import DIAGNOSTIC_COLUMNS, DiagnosticsRecord, records_frame
from .exceptions import RunDataError
from .mesh_core import ImmersedMesh, load_mesh, mesh_suffix, save_mesh

logger = logging.getLogger(__name__)

DIAGNOSTICS_FILE = 'diagnostics.csv'
MANIFEST_FILE = 'meta.json'
BLOWUP_FILE = 'blowup.jsonl'
CONFIG_ECHO_FILE = 'config.ini'
FLOAT_FORMAT = '%.17g'

_STEP_PATTERN = re.compile(r'^step_(\d+)\.(obj|nobj)$')


def blob_hash(*chunks: bytes) -> str:
    """Hash estilo git ('blob <len>\\0' + contenido) de la concatenación"""
    data = b''.join(chunks)
    digest = hashlib.sha1(b'blob %d\x00' % len(data))
    digest.update(data)
    return digest.hexdigest()


def mesh_bytes(mesh: ImmersedMesh) -> bytes:
    """Bytes canónicos de una malla para el hash de entradas"""
    return (np.ascontiguousarray(mesh.positions, dtype='<f8').tobytes()
            + np.ascontiguousarray(mesh.faces, dtype='<i8').tobytes())


@dataclass
class RunManifest:
    """Contenido de meta.json"""
    config: dict
    constants: dict
    provenance: str
    input_hash: str
    seed: int
    threads: int
    termination: str = ''
    message: str = ''
    steps: int = 0
    final_time: float = 0.0
    initial_area: float = 0.0
    extinction_bound: float = float('nan')
    lifespan_constant: Optional[float] = None
    wall_seconds: float = 0.0
    snapshots: List[dict] = field(default_factory=list)

    def to_json(self) -> str:
        data = asdict(self)
        if data['lifespan_constant'] is not None and not np.isfinite(data['lifespan_constant']):
            data['lifespan_constant'] = None
        if not np.isfinite(data['extinction_bound']):
            data['extinction_bound'] = None
        return json.dumps(data, indent=2, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> 'RunManifest':
        data = json.loads(text)
        if data.get('extinction_bound') is None:
            data['extinction_bound'] = float('nan')
        return cls(**data)


class RunWriter:
    """
    Escribe los archivos de una corrida en un directorio.

    write_snapshot se usa como on_snapshot de run_flow: cada instantánea
    deja su malla y agrega su fila a diagnostics.csv en el momento, de modo
    que una corrida interrumpida conserva lo escrito hasta ahí.
    """

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.snapshots: List[dict] = []
        self.diagnostics_path = self.run_dir / DIAGNOSTICS_FILE
        self.diagnostics_path.unlink(missing_ok=True)

    def write_snapshot(self, state, record: DiagnosticsRecord) -> Path:
        path = save_mesh(state.mesh, self.run_dir / f"step_{state.step}{mesh_suffix(state.mesh)}")
        self.snapshots.append({'step': int(state.step), 't': float(state.t), 'file': path.name})
        self.append_record(record)
        return path

    def append_record(self, record: DiagnosticsRecord) -> Path:
        first = not self.diagnostics_path.exists()
        records_frame([record]).to_csv(
            self.diagnostics_path, mode='a', header=first, index=False, float_format=FLOAT_FORMAT
        )
        return self.diagnostics_path

    def write_config_echo(self, ini_text: str) -> Path:
        path = self.run_dir / CONFIG_ECHO_FILE
        path.write_text(ini_text, encoding='utf-8')
        return path

    def write_manifest(self, manifest: RunManifest) -> Path:
        manifest.snapshots = list(self.snapshots)
        path = self.run_dir / MANIFEST_FILE
        path.write_text(manifest.to_json(), encoding='utf-8')
        logger.info(f"Manifiesto escrito en {path} ({len(self.snapshots)} instantáneas)")
        return path


def write_blowup(report, out_dir) -> Path:
    """blowup.jsonl con una línea por radio y la malla reescalada al lado"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for j, item in enumerate(report):
        mesh_path = save_mesh(item.rescaled_mesh, out_dir / f"blowup_{j}{mesh_suffix(item.rescaled_mesh)}")
        rows.append({**item.as_json(), 'mesh': mesh_path.name})
    path = out_dir / BLOWUP_FILE
    pd.DataFrame(rows).to_json(path, orient='records', lines=True, double_precision=15)
    logger.info(f"Reporte de blowup escrito en {path} ({len(rows)} radios)")
    return path


# ==============================================================================
# LECTURA
# ==============================================================================

@dataclass(frozen=True, eq=False)
class SavedSnapshot:
    step: int
    t: float
    mesh: ImmersedMesh
    path: Path


@dataclass
class SavedRun:
    run_dir: Path
    snapshots: List[SavedSnapshot]
    records: pd.DataFrame
    manifest: Optional[RunManifest]


def load_run(run_dir) -> SavedRun:
    """
    Reconstruye las instantáneas de un directorio de corrida. Los tiempos
    salen del manifiesto; sin manifiesto se toman de diagnostics.csv en el
    mismo orden.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise RunDataError(f"{run_dir} no es un directorio")

    files = sorted(
        (int(m.group(1)), p) for p in run_dir.iterdir() if (m := _STEP_PATTERN.match(p.name))
    )
    if not files:
        raise RunDataError(f"{run_dir} no contiene instantáneas step_<k>")

    manifest = None
    manifest_path = run_dir / MANIFEST_FILE
    if manifest_path.exists():
        manifest = RunManifest.from_json(manifest_path.read_text(encoding='utf-8'))

    diagnostics_path = run_dir / DIAGNOSTICS_FILE
    records = (pd.read_csv(diagnostics_path) if diagnostics_path.exists()
               else pd.DataFrame(columns=list(DIAGNOSTIC_COLUMNS)))

    if manifest is not None and manifest.snapshots:
        times = {int(s['step']): float(s['t']) for s in manifest.snapshots}
    elif len(records) == len(files):
        times = {step: float(t) for (step, _), t in zip(files, records['t'])}
    else:
        raise RunDataError(f"{run_dir}: no hay tiempos para las instantáneas (falta {MANIFEST_FILE})")

    snapshots = []
    for step, path in files:
        if step not in times:
            logger.warning(f"{path.name} no figura en el manifiesto; se omite")
            continue
        snapshots.append(SavedSnapshot(step=step, t=times[step], mesh=load_mesh(path), path=path))

    logger.info(f"Corrida {run_dir}: {len(snapshots)} instantáneas")
    return SavedRun(run_dir=run_dir, snapshots=snapshots, records=records, manifest=manifest)
