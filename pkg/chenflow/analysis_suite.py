# chenflow/analysis_suite.py
"""
Funcionales escalares, cotas como chequeos en tiempo de ejecución,
diagnósticos de concentración y vida útil, reescalamiento de blowup y el
banco numérico de desigualdades.

Todas las integrales usan la masa agrupada como dmu. Las funciones son
puras sobre instantáneas inmutables.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from scipy.special import gamma
from django.conf import settings

from .diffgeo_ops import (
    CurvatureField,
    GradientField,
    OperatorCache,
    build_operators,
    covariant_gradients,
    curvature_field,
    face_gradients,
    gauss_curvature_angle_defect,
    q_endomorphism,
)
from .exceptions import (
    InvalidParameters,
    PreconditionViolated,
    RadiusScheduleExhausted,
)
from .mesh_core import ImmersedMesh, icosphere, validate

logger = logging.getLogger(__name__)


# ==============================================================================
# CONSTANTES
# ==============================================================================

SUPPORTED_DIMENSIONS = (2, 3, 4)
TRACEFREE_CEILING = 8.0 * np.pi

CHEN_TOLERANCE = 0.02          # fracción de 16 pi
AREA_DECAY_SLACK = 0.02        # fracción de mu(0)^2
RHO_RTOL = 1e-3
MONOTONE_RTOL = 1e-3
MONOTONE_ATOL = 1e-4
GRADIENT_DOMINATION = 3.0
GRADIENT_TOLERANCE = 0.05
GAUSS_TWO_WAY_TOLERANCE = 0.05
GAUSS_BONNET_RTOL = 1e-8
Q_POSITIVITY_TOL = 1e-12
DEFAULT_SCHEDULE_LENGTH = 6
BENCH_BUMPS = 20


def unit_sphere_area(n: int) -> float:
    """omega_n = 2 pi^{(n+1)/2} / Gamma((n+1)/2), área de la n-esfera unitaria"""
    if n < 1:
        raise InvalidParameters(f"n debe ser >= 1 (recibido {n})")
    return float(2.0 * np.pi ** ((n + 1) / 2.0) / gamma((n + 1) / 2.0))


def chen_lower_bound(n: int = 2) -> float:
    """omega_n n^n: cota inferior de la integral de |H|^n"""
    return unit_sphere_area(n) * n ** n


def _area_decay_constant(n: int) -> float:
    return 4.0 * unit_sphere_area(n) ** (4.0 / n) * n ** 2


@dataclass(frozen=True)
class Constants:
    """
    Constantes de las cotas. eps1, eps2 y c_lifespan son configuración:
    solo se conoce que existen (y que eps2 < 8 pi).
    """
    n: int = 2
    eps1: float = 1.0
    eps2: float = 0.9 * TRACEFREE_CEILING
    c_lifespan: float = 1.0

    def __post_init__(self):
        if self.n != 2:
            raise InvalidParameters(f"solo se simulan superficies (n=2), recibido n={self.n}")
        if not self.eps1 > 0:
            raise InvalidParameters("eps1 debe ser > 0")
        if not 0 < self.eps2 < TRACEFREE_CEILING:
            raise InvalidParameters(f"eps2 debe estar en (0, 8 pi) (recibido {self.eps2})")
        if not self.c_lifespan > 0:
            raise InvalidParameters("c_lifespan debe ser > 0")

    @property
    def omega_n(self) -> float:
        return unit_sphere_area(self.n)

    @property
    def C_n(self) -> float:
        """4 omega_n^{4/n} n^2; 256 pi^2 para n=2"""
        return _area_decay_constant(self.n)

    def as_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(omega_n=self.omega_n, C_n=self.C_n)
        return data


# ==============================================================================
# COTAS Y SOLUCIÓN DE REFERENCIA
# ==============================================================================

def extinction_upper_bound(mu0: float, n: int = 2) -> float:
    """T <= mu0^{4/n} / C_n"""
    if n not in SUPPORTED_DIMENSIONS:
        raise InvalidParameters(f"dimensión no soportada n={n}; use {SUPPORTED_DIMENSIONS}")
    if mu0 < 0:
        raise InvalidParameters("mu0 debe ser >= 0")
    return mu0 ** (4.0 / n) / _area_decay_constant(n)


def sphere_radius_at(r0: float, n: int, t: float) -> float:
    """Esfera que se encoge homotéticamente: r^4 = r0^4 - 4 n^2 t"""
    if r0 <= 0 or n < 1:
        raise InvalidParameters("r0 debe ser > 0 y n >= 1")
    extinction = r0 ** 4 / (4.0 * n ** 2)
    if t < 0 or t > extinction * (1.0 + 1e-12):
        raise InvalidParameters(f"t={t} fuera de [0, {extinction}]")
    return max(r0 ** 4 - 4.0 * n ** 2 * t, 0.0) ** 0.25


# ==============================================================================
# REGISTROS DE DIAGNÓSTICO
# ==============================================================================

@dataclass(frozen=True)
class DiagnosticsRecord:
    """Una fila de diagnostics.csv; el orden de los campos es el de las columnas"""
    t: float
    area: float
    area_sq: float
    energy_H2: float
    energy_A2: float
    energy_Ao2: float
    chen_residual: float
    area_bound_residual: float
    rho_star: float = float('nan')
    eta_at_rho: float = float('nan')
    h_min: float = float('nan')
    max_abs_A: float = float('nan')


DIAGNOSTIC_COLUMNS = tuple(f.name for f in fields(DiagnosticsRecord))


def records_frame(records) -> pd.DataFrame:
    """Lista de registros (o DataFrame ya armado) -> DataFrame con las columnas fijas"""
    if isinstance(records, pd.DataFrame):
        return records.loc[:, list(DIAGNOSTIC_COLUMNS)]
    return pd.DataFrame([asdict(r) for r in records], columns=list(DIAGNOSTIC_COLUMNS))


def diagnostics(
    field: CurvatureField,
    ops: OperatorCache,
    constants: Optional[Constants] = None,
    *,
    mesh: Optional[ImmersedMesh] = None,
    t: float = 0.0,
    initial_area: Optional[float] = None,
    track_concentration: bool = False,
    threads: int = 1,
) -> DiagnosticsRecord:
    """
    Integrales por suma de densidad por vértice por masa.

    Sin mesh no se pueden calcular h_min ni el radio de concentración y
    quedan en NaN.
    """
    constants = constants or Constants()
    mass = ops.mass
    area = float(mass.sum())
    mu0 = area if initial_area is None else float(initial_area)
    energy_H2 = float(field.H_sq @ mass)

    rho_star = eta = h_min = float('nan')
    if mesh is not None:
        h_min = mesh.h_min
        if track_concentration:
            profile = ConcentrationProfile(mesh, field, threads=threads)
            rho_star = largest_small_radius(mesh, field, constants.eps1, profile=profile)
            eta = profile.eta(rho_star)

    return DiagnosticsRecord(
        t=float(t),
        area=area,
        area_sq=area ** 2,
        energy_H2=energy_H2,
        energy_A2=float(field.A_sq @ mass),
        energy_Ao2=float(field.Ao_sq @ mass),
        chen_residual=energy_H2 - chen_lower_bound(constants.n),
        area_bound_residual=(mu0 ** 2 - constants.C_n * t) - area ** 2,
        rho_star=rho_star,
        eta_at_rho=eta,
        h_min=h_min,
        max_abs_A=field.max_abs_A,
    )


@dataclass(frozen=True)
class CheckReport:
    passed: bool
    worst_margin: float
    samples: int
    detail: str = ''


def area_decay_check(records, constants: Optional[Constants] = None) -> CheckReport:
    """
    mu(t)^2 <= mu(0)^2 - C_2 t + slack con slack = 0.02 mu(0)^2.

    El margen de cada muestra es (mu(0)^2 - C_2 t) - mu(t)^2; se reporta el
    peor. Serie vacía: pasa.
    """
    constants = constants or Constants()
    frame = records_frame(records)
    if frame.empty:
        return CheckReport(passed=True, worst_margin=float('inf'), samples=0, detail='serie vacía')

    mu0_sq = float(frame['area_sq'].iloc[0])
    margins = (mu0_sq - constants.C_n * frame['t']) - frame['area_sq']
    slack = AREA_DECAY_SLACK * mu0_sq
    worst = float(margins.min())
    return CheckReport(
        passed=bool(worst >= -slack),
        worst_margin=worst,
        samples=len(frame),
        detail=f"holgura {slack:.6g}",
    )


# ==============================================================================
# CONCENTRACIÓN
# ==============================================================================

class ConcentrationProfile:
    """
    |A|^2 por cara (promedio de esquinas por área) y baricentros de una
    instantánea. eta(rho) suma las caras cuyo baricentro cae en la bola
    cerrada de radio rho y toma el máximo sobre los centros.
    """

    def __init__(self, mesh: ImmersedMesh, field: CurvatureField, threads: int = 1,
                 chunk: Optional[int] = None):
        self.mesh = mesh
        self.barycenters = mesh.barycenters
        self.weights = field.A_sq[mesh.faces].mean(axis=1) * mesh.face_areas
        self.threads = max(1, int(threads))
        self.chunk = chunk or settings.FLOW_SETTINGS.get('CONCENTRATION_CHUNK', 512)

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def ball_sums(self, rho: float, centers: Optional[np.ndarray] = None) -> np.ndarray:
        """Integral de |A|^2 en la bola de cada centro"""
        if not rho > 0:
            raise InvalidParameters(f"rho debe ser > 0 (recibido {rho})")
        centers = self.mesh.positions if centers is None else np.atleast_2d(centers)
        blocks = [centers[i:i + self.chunk] for i in range(0, len(centers), self.chunk)]

        def block_sums(block):
            inside = cdist(block, self.barycenters) <= rho
            return inside.astype(float) @ self.weights

        if self.threads > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(pool.map(block_sums, blocks))
        else:
            parts = [block_sums(b) for b in blocks]
        return np.concatenate(parts)

    def eta(self, rho: float, centers: Optional[np.ndarray] = None) -> float:
        return float(self.ball_sums(rho, centers).max())

    def argmax(self, rho: float, centers: Optional[np.ndarray] = None):
        """(eta, índice del centro que lo alcanza)"""
        sums = self.ball_sums(rho, centers)
        best = int(np.argmax(sums))
        return float(sums[best]), best


def ambient_grid(mesh: ImmersedMesh, spacing: float) -> np.ndarray:
    """Centros extra en una grilla uniforme sobre la caja de la malla"""
    lo = mesh.positions.min(axis=0)
    hi = mesh.positions.max(axis=0)
    axes = [np.arange(a, b + spacing, spacing) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, mesh.ambient_dim)


def concentration(
    mesh: ImmersedMesh,
    field: CurvatureField,
    rho: float,
    centers: Optional[np.ndarray] = None,
    threads: int = 1,
) -> float:
    """eta(rho) = max sobre centros de la integral de |A|^2 en B_rho(x)"""
    return ConcentrationProfile(mesh, field, threads=threads).eta(rho, centers)


def largest_small_radius(
    mesh: ImmersedMesh,
    field: CurvatureField,
    eps1: float,
    threads: int = 1,
    profile: Optional[ConcentrationProfile] = None,
) -> float:
    """
    Mayor rho con eta(rho) <= eps1, por bisección en [h_min, 2 diámetro]
    hasta ancho relativo 1e-3.
    """
    if not eps1 > 0:
        raise InvalidParameters("eps1 debe ser > 0")
    profile = profile or ConcentrationProfile(mesh, field, threads=threads)
    lo = mesh.h_min
    hi = 2.0 * mesh.bounding_diagonal

    if profile.eta(hi) <= eps1:
        return hi
    if profile.eta(lo) > eps1:
        return lo

    while hi - lo > RHO_RTOL * lo:
        mid = 0.5 * (lo + hi)
        if profile.eta(mid) <= eps1:
            lo = mid
        else:
            hi = mid
    return lo


# ==============================================================================
# VIDA ÚTIL
# ==============================================================================

def predicted_lifespan(rho_star: float, c_lifespan: float = 1.0) -> float:
    """T >= rho^4 / c"""
    if not rho_star > 0:
        raise InvalidParameters("rho_star debe ser > 0")
    if not c_lifespan > 0:
        raise InvalidParameters("c_lifespan debe ser > 0")
    return rho_star ** 4 / c_lifespan


def fit_lifespan_constant(records, T_obs: float) -> float:
    """Menor c con rho*(t) <= (c (T_obs - t))^{1/4} en todas las muestras"""
    frame = records_frame(records)
    usable = frame[(frame['t'] < T_obs) & np.isfinite(frame['rho_star'])]
    if usable.empty:
        return float('nan')
    return float((usable['rho_star'] ** 4 / (T_obs - usable['t'])).max())


# ==============================================================================
# MONOTONÍA DE LA ENERGÍA SIN TRAZA
# ==============================================================================

def tracefree_monotonicity_check(records, eps2: float) -> CheckReport:
    """
    La integral de |A°|^2 no crece salvo repuntes de 1e-3 relativo por
    muestra (con piso absoluto 1e-4 cerca de cero).

    Raises:
        PreconditionViolated: si la energía inicial supera eps2
    """
    frame = records_frame(records)
    if frame.empty:
        return CheckReport(passed=True, worst_margin=float('inf'), samples=0, detail='serie vacía')

    energy = frame['energy_Ao2'].to_numpy()
    if energy[0] > eps2:
        raise PreconditionViolated(
            f"energía sin traza inicial {energy[0]:.4f} > eps2={eps2:.4f}; chequeo omitido"
        )

    allowed = MONOTONE_RTOL * energy[:-1] + MONOTONE_ATOL
    margins = allowed - np.diff(energy)
    worst = float(margins.min()) if len(margins) else float('inf')
    return CheckReport(passed=bool(worst >= 0), worst_margin=worst, samples=len(frame))


# ==============================================================================
# BLOWUP
# ==============================================================================

def rescale_about(mesh: ImmersedMesh, x, r: float) -> ImmersedMesh:
    """(f - x) / r con la misma conectividad"""
    if not r > 0:
        raise InvalidParameters(f"r debe ser > 0 (recibido {r})")
    return mesh.with_positions((mesh.positions - np.asarray(x, dtype=float)) / r)


@dataclass(frozen=True)
class SphereFit:
    center: np.ndarray
    radius: float
    rms: float          # residuo radial RMS relativo al radio


def sphere_fit(points: np.ndarray) -> SphereFit:
    """Esfera algebraica por mínimos cuadrados: |p|^2 = 2 c.p + (r^2 - |c|^2)"""
    points = np.asarray(points, dtype=float)
    design = np.hstack((2.0 * points, np.ones((len(points), 1))))
    target = np.einsum('kn,kn->k', points, points)
    solution, *_ = np.linalg.lstsq(design, target, rcond=None)
    center, offset = solution[:-1], solution[-1]
    radius = float(np.sqrt(max(offset + center @ center, 0.0)))
    residual = np.linalg.norm(points - center, axis=1) - radius
    rms = float(np.sqrt(np.mean(residual ** 2)) / radius) if radius > 0 else float('inf')
    return SphereFit(center=center, radius=radius, rms=rms)


@dataclass(frozen=True, eq=False)
class BlowupRecord:
    step: int
    t: float
    radius: float
    center: np.ndarray
    eta: float
    rescaled_mesh: ImmersedMesh
    rescaled_area: float
    tracefree_energy: float
    sphere_rms: float
    sphere_radius: float

    def as_json(self) -> dict:
        return {
            'step': self.step,
            't': self.t,
            'r': self.radius,
            'x': [float(v) for v in self.center],
            'eta': self.eta,
            'rescaled_area': self.rescaled_area,
            'tracefree_energy': self.tracefree_energy,
            'sphere_rms': self.sphere_rms,
            'sphere_radius': self.sphere_radius,
        }


def _snapshot_field(snapshot) -> CurvatureField:
    field = getattr(snapshot, 'field', None)
    return field if field is not None else curvature_field(snapshot.mesh)


def blowup_report(
    trajectory,
    eps3: float,
    radii: Optional[Sequence[float]] = None,
    threads: int = 1,
) -> List[BlowupRecord]:
    """
    Para cada radio r_j de un cronograma decreciente busca la primera
    instantánea donde eta(r_j) > eps3, el centro x_j que lo maximiza y el
    reescalamiento (f - x_j)/r_j con su redondez.

    El cronograma por defecto parte del rho* inicial (con eps3 como umbral)
    y se divide por 2 en cada paso. Los radios que nunca se superan se
    omiten.

    Raises:
        RadiusScheduleExhausted: si ningún radio presenta concentración
    """
    if not eps3 > 0:
        raise InvalidParameters("eps3 debe ser > 0")
    snapshots = list(trajectory.snapshots)
    if not snapshots:
        raise RadiusScheduleExhausted("la trayectoria no tiene instantáneas")

    profiles = {}

    def profile_at(index):
        if index not in profiles:
            snap = snapshots[index]
            profiles[index] = ConcentrationProfile(snap.mesh, _snapshot_field(snap), threads=threads)
        return profiles[index]

    if radii is None:
        first = snapshots[0]
        rho0 = largest_small_radius(first.mesh, _snapshot_field(first), eps3, profile=profile_at(0))
        radii = [rho0 * 0.5 ** j for j in range(DEFAULT_SCHEDULE_LENGTH)]
    radii = sorted((float(r) for r in radii), reverse=True)

    report = []
    start = 0
    for radius in radii:
        for index in range(start, len(snapshots)):
            eta, center_index = profile_at(index).argmax(radius)
            if eta > eps3:
                break
        else:
            logger.info(f"radio {radius:.4g}: sin concentración por encima de {eps3}")
            continue

        # los tiempos de concentración crecen al bajar el radio
        start = index
        snap = snapshots[index]
        center = snap.mesh.positions[center_index].copy()
        rescaled = rescale_about(snap.mesh, center, radius)
        ops = build_operators(rescaled)
        field = curvature_field(rescaled, ops)
        fit = sphere_fit(rescaled.positions)
        report.append(BlowupRecord(
            step=int(getattr(snap, 'step', index)),
            t=float(snap.t),
            radius=radius,
            center=center,
            eta=eta,
            rescaled_mesh=rescaled,
            rescaled_area=rescaled.area,
            tracefree_energy=float(field.Ao_sq @ ops.mass),
            sphere_rms=fit.rms,
            sphere_radius=fit.radius,
        ))
        logger.info(f"blowup r={radius:.4g} en t={snap.t:.6e}: RMS esfera {fit.rms:.2e}")

    if not report:
        raise RadiusScheduleExhausted(
            f"ningún radio de {[round(r, 6) for r in radii]} supera eps3={eps3}"
        )
    return report


# ==============================================================================
# BANCO DE DESIGUALDADES
# ==============================================================================

MSS_CONSTANT = 4.0 ** 3 / math.sqrt(unit_sphere_area(2))


@dataclass(frozen=True)
class InequalityResult:
    lhs: float
    rhs: float
    passed: bool

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else (0.0 if self.lhs == 0 else float('inf'))


def mss_check(
    mesh: ImmersedMesh,
    field: CurvatureField,
    u: np.ndarray,
    ops: Optional[OperatorCache] = None,
) -> InequalityResult:
    """
    Sobolev de Michael-Simon con n=2:
    (int u^2)^{1/2} <= 64/sqrt(4 pi) int (|grad u| + |u||H|).
    """
    ops = ops or build_operators(mesh)
    u = np.asarray(u, dtype=float)
    lhs = float(np.sqrt((u ** 2) @ ops.mass))
    grad_norm = np.linalg.norm(face_gradients(mesh, u), axis=1)
    integral = grad_norm @ mesh.face_areas + (np.abs(u) * np.sqrt(field.H_sq)) @ ops.mass
    rhs = float(MSS_CONSTANT * integral)
    return InequalityResult(lhs=lhs, rhs=rhs, passed=bool(lhs <= rhs))


def domination_ratio(gradients: GradientField) -> float:
    """int |grad A|^2 / int |grad A°|^2; la cota continua es 3"""
    lhs, rhs = gradients.int_grad_A2, gradients.int_grad_Ao2
    if rhs > 0:
        return lhs / rhs
    return 0.0 if lhs == 0 else float('inf')


def gradient_domination_check(field: CurvatureField, gradients: GradientField) -> InequalityResult:
    """int |grad A|^2 <= 3 (1 + 0.05) int |grad A°|^2"""
    lhs = gradients.int_grad_A2
    rhs = GRADIENT_DOMINATION * (1.0 + GRADIENT_TOLERANCE) * gradients.int_grad_Ao2
    return InequalityResult(lhs=lhs, rhs=rhs, passed=bool(lhs <= rhs))


def q_positivity_margin(field: CurvatureField) -> float:
    """min por vértice de <Q(A)H, H> - |H|^4 / 2, relativo a 1 + |H|^4"""
    QH = q_endomorphism(field, field.H)
    margin = np.einsum('vn,vn->v', QH, field.H) - 0.5 * field.H_sq ** 2
    return float((margin / (1.0 + field.H_sq ** 2)).min())


def bump_functions(mesh: ImmersedMesh, count: int, seed: int) -> List[np.ndarray]:
    """Campanas gaussianas con centro en un vértice y ancho aleatorios"""
    rng = np.random.default_rng(seed)
    scale = mesh.bounding_diagonal
    bumps = []
    for _ in range(count):
        center = mesh.positions[rng.integers(mesh.num_vertices)]
        width = rng.uniform(0.1, 0.4) * scale
        amplitude = rng.uniform(0.5, 2.0)
        d2 = np.sum((mesh.positions - center) ** 2, axis=1)
        bumps.append(amplitude * np.exp(-d2 / (2.0 * width ** 2)))
    return bumps


def run_bench(mesh: ImmersedMesh, seed: int = 12345, bumps: int = BENCH_BUMPS) -> pd.DataFrame:
    """
    Banco completo sobre una malla: Michael-Simon para constantes,
    coordenadas y campanas aleatorias; Chen; positividad de Q; dominación
    de gradientes; Gauss-Bonnet y comparación de las dos curvaturas de Gauss.

    Returns:
        DataFrame con columnas check, value, passed
    """
    validate(mesh)
    ops = build_operators(mesh)
    field = curvature_field(mesh, ops)
    rows = []

    tests = [('const', np.ones(mesh.num_vertices))]
    tests += [(f"x{k + 1}", mesh.positions[:, k]) for k in range(mesh.ambient_dim)]
    tests += [(f"bump_{k:02d}", u) for k, u in enumerate(bump_functions(mesh, bumps, seed))]
    for name, u in tests:
        result = mss_check(mesh, field, u, ops)
        rows.append({'check': f"mss[{name}]", 'value': result.ratio, 'passed': result.passed})

    chen_residual = float(field.H_sq @ ops.mass) - chen_lower_bound(2)
    rows.append({
        'check': 'chen_residual',
        'value': chen_residual,
        'passed': chen_residual >= -CHEN_TOLERANCE * chen_lower_bound(2),
    })

    q_margin = q_positivity_margin(field)
    rows.append({'check': 'q_positivity', 'value': q_margin, 'passed': q_margin >= -Q_POSITIVITY_TOL})

    gradients = covariant_gradients(mesh, field)
    domination = gradient_domination_check(field, gradients)
    rows.append({
        'check': 'gradient_domination',
        'value': domination_ratio(gradients),
        'passed': domination.passed,
    })

    target = 2.0 * np.pi * mesh.topology.euler_characteristic
    K_defect = gauss_curvature_angle_defect(mesh, ops)
    defect_total = float(K_defect @ ops.mass)
    defect_error = abs(defect_total - target) / max(abs(target), 1.0)
    rows.append({
        'check': 'gauss_bonnet',
        'value': defect_error,
        'passed': defect_error <= GAUSS_BONNET_RTOL,
    })
    two_way = abs(float(field.K @ ops.mass) - target) / float(np.abs(K_defect) @ ops.mass)
    rows.append({
        'check': 'gauss_two_way',
        'value': two_way,
        'passed': two_way <= GAUSS_TWO_WAY_TOLERANCE,
    })

    frame = pd.DataFrame(rows, columns=['check', 'value', 'passed'])
    logger.info(f"Banco: {int(frame['passed'].sum())}/{len(frame)} chequeos aprobados")
    return frame


# ==============================================================================
# CONVERGENCIA DE OPERADORES
# ==============================================================================

CONVERGENCE_CHECKS = ('H_error', 'K_error', 'area_error')


def convergence_table(levels: Iterable[int]) -> pd.DataFrame:
    """
    Errores en la esfera unitaria por nivel de icosfera: max |H_lap + 2 nu|,
    max |K - 1|, error relativo de área y, como referencia sin chequeo,
    max |H + 2 nu| de la traza ajustada.
    """
    rows = []
    for level in sorted(set(int(l) for l in levels)):
        mesh = icosphere(1.0, level)
        ops = build_operators(mesh)
        field = curvature_field(mesh, ops)
        nu = mesh.positions / np.linalg.norm(mesh.positions, axis=1)[:, None]
        rows.append({
            'level': level,
            'vertices': mesh.num_vertices,
            'h_min': mesh.h_min,
            'H_error': float(np.linalg.norm(field.H_lap + 2.0 * nu, axis=1).max()),
            'K_error': float(np.abs(field.K - 1.0).max()),
            'area_error': abs(ops.total_area - 4.0 * np.pi) / (4.0 * np.pi),
            'H_trace_error': float(np.linalg.norm(field.H + 2.0 * nu, axis=1).max()),
        })
    return pd.DataFrame(rows)


def convergence_passed(table: pd.DataFrame) -> bool:
    """Cada error decrece estrictamente con el nivel; una sola fila pasa"""
    return all(bool((table[column].diff().dropna() < 0).all()) for column in CONVERGENCE_CHECKS)
