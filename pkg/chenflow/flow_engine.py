# chenflow/flow_engine.py
"""
Integración temporal de la familia de velocidades F = P_normal(Delta H) + corrección.

Convención: d/dt f = -F. El integrador cf_semiimplicit resuelve la forma en
posiciones de Chen (M + tau L0 M^{-1} L0) f_next = M f_prev con la métrica
congelada; ncf_explicit avanza con la velocidad normal y sirve a las tres
familias.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field, fields, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import cg
from django.conf import settings
from django.db.models import TextChoices

from .analysis_suite import Constants, DiagnosticsRecord, diagnostics, records_frame
from .diffgeo_ops import (
    CurvatureField,
    OperatorCache,
    build_operators,
    curvature_field,
    q_endomorphism,
)
from .exceptions import (
    ChenFlowError,
    FlowTerminated,
    GeometryError,
    InvalidParameters,
    MeshError,
    SolverFailure,
)
from .mesh_core import ImmersedMesh, validate

logger = logging.getLogger(__name__)

SOLVER_RTOL = 1e-10


# ==============================================================================
# OPCIONES
# ==============================================================================

class FlowFamily(TextChoices):
    CHEN = 'chen', 'Flujo de Chen'
    WILLMORE = 'willmore', 'Flujo de Willmore'
    SURFACE_DIFFUSION = 'surface_diffusion', 'Difusión superficial'


class Integrator(TextChoices):
    CF_SEMIIMPLICIT = 'cf_semiimplicit', 'Semi-implícito en posiciones'
    NCF_EXPLICIT = 'ncf_explicit', 'Explícito normal'


class Termination(TextChoices):
    EXTINCT = 'Extinct', 'Extinción'
    SINGULARITY = 'SingularityDetected', 'Singularidad detectada'
    STEP_BUDGET = 'StepBudget', 'Presupuesto de pasos agotado'
    SOLVER_FAILURE = 'SolverFailure', 'Falla del solver'


def _default_maxiter() -> int:
    return int(settings.FLOW_SETTINGS.get('SOLVER_MAXITER', 5000))


@dataclass(frozen=True)
class FlowConfig:
    """Parámetros de una corrida; los nombres son las claves del archivo INI"""
    family: str = FlowFamily.CHEN
    integrator: str = Integrator.CF_SEMIIMPLICIT
    tau_scale: float = 0.1
    tau_max: float = 1e-2
    rebuild_every: int = 1
    max_steps: int = 500000
    stop_area_fraction: float = 0.01
    stop_max_A_h: float = 5.0
    stop_h_ratio: float = 0.1
    diag_every: int = 10
    track_concentration: bool = True
    solver_maxiter: int = dataclass_field(default_factory=_default_maxiter)

    def __post_init__(self):
        # normaliza cadenas sueltas a las opciones
        try:
            object.__setattr__(self, 'family', FlowFamily(self.family))
            object.__setattr__(self, 'integrator', Integrator(self.integrator))
        except ValueError as exc:
            raise InvalidParameters(str(exc)) from exc

        if not self.tau_scale > 0:
            raise InvalidParameters(f"tau_scale debe ser > 0 (recibido {self.tau_scale})")
        if not self.tau_max > 0:
            raise InvalidParameters(f"tau_max debe ser > 0 (recibido {self.tau_max})")
        if not 0.0 < self.stop_area_fraction < 1.0:
            raise InvalidParameters(
                f"stop_area_fraction debe estar en (0, 1) (recibido {self.stop_area_fraction})"
            )
        if not self.stop_max_A_h > 0:
            raise InvalidParameters("stop_max_A_h debe ser > 0")
        if not 0.0 < self.stop_h_ratio < 1.0:
            raise InvalidParameters(
                f"stop_h_ratio debe estar en (0, 1) (recibido {self.stop_h_ratio})"
            )
        if self.rebuild_every < 1 or self.diag_every < 1:
            raise InvalidParameters("rebuild_every y diag_every deben ser >= 1")
        if self.max_steps < 0:
            raise InvalidParameters("max_steps no puede ser negativo")
        if self.solver_maxiter < 1:
            raise InvalidParameters("solver_maxiter debe ser >= 1")
        if self.integrator == Integrator.CF_SEMIIMPLICIT and self.family != FlowFamily.CHEN:
            raise InvalidParameters("cf_semiimplicit solo integra la familia chen")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ==============================================================================
# ESTADO
# ==============================================================================

@dataclass(frozen=True, eq=False)
class FlowState:
    """Un cuadro de la trayectoria; los pasos devuelven estados nuevos"""
    mesh: ImmersedMesh
    t: float
    step: int
    ops: OperatorCache
    field: CurvatureField
    termination: Optional[Termination] = None
    ops_step: int = 0

    @property
    def is_terminated(self) -> bool:
        return self.termination is not None


def initial_state(mesh: ImmersedMesh, config: Optional[FlowConfig] = None) -> FlowState:
    """Estado en t=0 con operadores y campo de curvatura construidos"""
    ops = build_operators(mesh)
    return FlowState(mesh=mesh, t=0.0, step=0, ops=ops, field=curvature_field(mesh, ops))


def velocity(field: CurvatureField, ops: OperatorCache, family) -> np.ndarray:
    """
    F = P_normal(M^{-1} L0 H_lap) + corrección por familia.

    chen: sin corrección; surface_diffusion: + Q(A)H;
    willmore: + Q(A)H + Q(A°)H. H es la traza g^{ij} A_ij.
    """
    family = FlowFamily(family)
    if field.H_lap is None:
        raise InvalidParameters("el campo no tiene H_lap; usar curvature_field")

    F = field.project_normal(ops.laplacian(field.H_lap))
    if family in (FlowFamily.SURFACE_DIFFUSION, FlowFamily.WILLMORE):
        F = F + q_endomorphism(field, field.H)
    if family == FlowFamily.WILLMORE:
        F = F + q_endomorphism(field, field.H, tracefree=True)
    return F


def _check_step(state: FlowState, tau: float) -> bool:
    """True si tau es cero y no hay nada que hacer"""
    if state.is_terminated:
        raise FlowTerminated(f"El estado terminó ({state.termination}) en el paso {state.step}")
    if not np.isfinite(tau) or tau < 0:
        raise InvalidParameters(f"tau debe ser >= 0 (recibido {tau})")
    return tau == 0


def _advance(state: FlowState, positions: np.ndarray, tau: float, config: FlowConfig) -> FlowState:
    try:
        mesh = state.mesh.with_positions(positions)
        validate(mesh)
    except MeshError as exc:
        raise SolverFailure(f"paso {state.step + 1}: malla degenerada ({exc})") from exc

    step = state.step + 1
    if step - state.ops_step >= config.rebuild_every:
        ops, ops_step = build_operators(mesh), step
    else:
        ops, ops_step = state.ops, state.ops_step

    return FlowState(
        mesh=mesh,
        t=state.t + tau,
        step=step,
        ops=ops,
        field=curvature_field(mesh, ops),
        ops_step=ops_step,
    )


def step_ncf(state: FlowState, tau: float, config: FlowConfig) -> FlowState:
    """Paso explícito: f <- f - tau F"""
    if _check_step(state, tau):
        return state
    F = velocity(state.field, state.ops, config.family)
    return _advance(state, state.mesh.positions - tau * F, tau, config)


def step_cf(state: FlowState, tau: float, config: FlowConfig) -> FlowState:
    """
    Paso semi-implícito de Chen por coordenada ambiente:
    (M + tau L0 M^{-1} L0) f_next = M f_prev, resuelto con gradiente
    conjugado precondicionado por la diagonal.
    """
    if config.family != FlowFamily.CHEN:
        raise InvalidParameters("step_cf solo admite la familia chen")
    if _check_step(state, tau):
        return state

    ops = state.ops
    system = (sparse.diags(ops.mass) + tau * ops.bilaplacian_stiffness).tocsr()
    jacobi = sparse.diags(1.0 / system.diagonal())
    previous = state.mesh.positions
    rhs = ops.mass[:, None] * previous

    positions = np.empty_like(previous)
    for k in range(previous.shape[1]):
        solution, info = cg(
            system,
            rhs[:, k],
            x0=previous[:, k],
            rtol=SOLVER_RTOL,
            atol=0.0,
            maxiter=config.solver_maxiter,
            M=jacobi,
        )
        if info != 0:
            raise SolverFailure(
                f"CG no convergió en la coordenada {k} (info={info}, paso {state.step + 1})"
            )
        positions[:, k] = solution

    return _advance(state, positions, tau, config)


def choose_tau(state: FlowState, config: FlowConfig) -> float:
    """Paso tipo CFL de cuarto orden a partir de la arista más corta"""
    h = state.mesh.h_min
    tau = config.tau_scale * h ** 4
    if config.integrator == Integrator.NCF_EXPLICIT:
        tau /= 1.0 + (h * state.field.max_abs_A) ** 4
    return min(config.tau_max, tau)


_STEPPERS = {
    Integrator.CF_SEMIIMPLICIT: step_cf,
    Integrator.NCF_EXPLICIT: step_ncf,
}


# ==============================================================================
# CORRIDA COMPLETA
# ==============================================================================

@dataclass
class Trajectory:
    """
    Resultado de run_flow: registros, estado final y motivo de terminación.

    Las instantáneas intermedias solo se guardan en memoria con
    keep_snapshots=True; en otro caso viajan a on_snapshot y se sueltan.
    """
    config: FlowConfig
    constants: Constants
    final_state: FlowState
    records: List[DiagnosticsRecord]
    termination: Termination
    snapshots: List[FlowState] = dataclass_field(default_factory=list)
    message: str = ''
    wall_seconds: float = 0.0

    @property
    def final_time(self) -> float:
        return self.final_state.t

    def records_frame(self) -> pd.DataFrame:
        return records_frame(self.records)


def _mesh_ratio(mesh: ImmersedMesh) -> float:
    return mesh.h_min / mesh.h_mean


def _termination_of(
    state: FlowState,
    config: FlowConfig,
    initial_area: float,
    initial_ratio: float,
) -> Tuple[Optional[Termination], str]:
    if state.mesh.area < config.stop_area_fraction * initial_area:
        return Termination.EXTINCT, ''
    if state.field.max_abs_A * state.mesh.h_min > config.stop_max_A_h:
        return Termination.SINGULARITY, ''
    ratio = _mesh_ratio(state.mesh) / initial_ratio
    if ratio < config.stop_h_ratio:
        return Termination.SINGULARITY, (
            f"colapso de aristas: h_min/h_mean cayó a {ratio:.3g} de su valor inicial"
        )
    if state.step >= config.max_steps:
        return Termination.STEP_BUDGET, ''
    return None, ''


def run_flow(
    mesh: ImmersedMesh,
    config: FlowConfig,
    constants: Optional[Constants] = None,
    threads: int = 1,
    on_snapshot: Optional[Callable[[FlowState, DiagnosticsRecord], None]] = None,
    keep_snapshots: bool = False,
) -> Trajectory:
    """
    Itera choose_tau + paso hasta una condición de terminación.

    Las fallas numéricas se reportan en Trajectory.termination; solo los
    errores de la malla inicial se propagan. Cada diag_every pasos (y en el
    estado final) se toma una instantánea, se calcula su registro de
    diagnóstico y se entrega a on_snapshot en orden. Con threads > 1 el
    diagnóstico de una instantánea corre en un hilo aparte mientras se
    calcula el paso siguiente; nunca hay más de uno pendiente.
    """
    constants = constants or Constants()
    stepper = _STEPPERS[config.integrator]
    start = time.perf_counter()

    state = initial_state(mesh, config)
    initial_area = state.mesh.area
    initial_ratio = _mesh_ratio(state.mesh)
    logger.info(
        f"Inicio de corrida: {config.family}/{config.integrator}, "
        f"{mesh.num_vertices} vértices en R^{mesh.ambient_dim}, área {initial_area:.6g}"
    )

    executor = ThreadPoolExecutor(max_workers=1) if threads > 1 else None
    records: List[DiagnosticsRecord] = []
    snapshots: List[FlowState] = []
    pending = []

    def compute(snapshot: FlowState) -> DiagnosticsRecord:
        return diagnostics(
            snapshot.field,
            snapshot.ops,
            constants,
            mesh=snapshot.mesh,
            t=snapshot.t,
            initial_area=initial_area,
            track_concentration=config.track_concentration,
            threads=threads,
        )

    def flush():
        while pending:
            snapshot, item = pending.pop(0)
            rec = item.result() if executor else item
            records.append(rec)
            if keep_snapshots:
                snapshots.append(snapshot)
            if on_snapshot is not None:
                on_snapshot(snapshot, rec)

    def record(snapshot: FlowState):
        flush()
        pending.append((snapshot, executor.submit(compute, snapshot) if executor else compute(snapshot)))

    record(state)
    last_recorded = state
    message = ''
    try:
        while True:
            termination, message = _termination_of(state, config, initial_area, initial_ratio)
            if termination is not None:
                break
            tau = choose_tau(state, config)
            try:
                state = stepper(state, tau, config)
            except SolverFailure as exc:
                termination, message = Termination.SOLVER_FAILURE, str(exc)
                break
            except GeometryError as exc:
                termination, message = Termination.SINGULARITY, str(exc)
                break
            except ChenFlowError as exc:
                termination, message = Termination.SOLVER_FAILURE, str(exc)
                break

            logger.debug(f"paso {state.step}: t={state.t:.6e} tau={tau:.3e} área={state.mesh.area:.6e}")
            if state.step % config.diag_every == 0:
                record(state)
                last_recorded = state

        final = replace(state, termination=termination)
        if last_recorded is state:
            # el registro pendiente ya es el del estado final
            pending[-1] = (final, pending[-1][1])
        else:
            record(final)
        flush()
    finally:
        if executor:
            executor.shutdown(wait=True)

    wall = time.perf_counter() - start
    logger.info(
        f"Fin de corrida: {termination} en el paso {final.step}, t={final.t:.6e}, "
        f"{wall:.1f} s" + (f" ({message})" if message else '')
    )
    return Trajectory(
        config=config,
        constants=constants,
        final_state=final,
        records=records,
        termination=termination,
        snapshots=snapshots,
        message=message,
        wall_seconds=wall,
    )
