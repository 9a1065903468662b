# chenflow/diffgeo_ops.py
"""
Operadores de geometría diferencial discreta sobre ImmersedMesh.

Convenciones:
    - Delta = M^{-1} L0 con L0 la matriz de cotangentes (semidefinida
      negativa) y M la masa agrupada de Voronoi mixta.
    - H_lap = Delta f; en la esfera unitaria orientada hacia afuera
      H = -2 nu_out.
    - H (traza) = g^{ij} A_ij, que es la que entra en Q(A) y en las
      densidades de energía para que las identidades algebraicas sean exactas.

Todos los cálculos están vectorizados por vértice o por cara; los anillos
de vecinos se rellenan hasta el ancho máximo con una máscara.
"""

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import sparse

from .exceptions import (
    DegenerateCotangent,
    InvalidMesh,
    RankDeficientStar,
    UnderdeterminedFit,
)
from .mesh_core import ImmersedMesh

logger = logging.getLogger(__name__)


# ==============================================================================
# CONSTANTES
# ==============================================================================

COT_CLAMP = 1e6
ANGLE_TOL = 1e-6
RANK_TOL = 1e-12
MIN_FIT_POINTS = 6
FIT_COND_LIMIT = 1e12
NORMAL_SPACE_TOL = 1e-8


# ==============================================================================
# ÁLGEBRA LINEAL POR LOTES
# ==============================================================================

def _inverse_sqrt(spd: np.ndarray) -> np.ndarray:
    """S^{-1/2} para una pila de matrices simétricas definidas positivas"""
    evals, evecs = np.linalg.eigh(spd)
    return np.einsum('...ik,...k,...jk->...ij', evecs, 1.0 / np.sqrt(evals), evecs)


def _polar(matrices: np.ndarray) -> np.ndarray:
    """Factor ortogonal de la descomposición polar (rotación de menor desajuste)"""
    u, _, vt = np.linalg.svd(matrices)
    return u @ vt


def _orthonormalize(basis: np.ndarray) -> np.ndarray:
    """B (B^T B)^{-1/2}: la base ortonormal más cercana a las columnas de B"""
    gram = np.einsum('...na,...nb->...ab', basis, basis)
    return basis @ _inverse_sqrt(gram)


# ==============================================================================
# OPERADORES
# ==============================================================================

@dataclass(frozen=True, eq=False)
class OperatorCache:
    """Masa agrupada y rigidez de cotangentes de una instantánea de la malla"""
    mass: np.ndarray
    stiffness: sparse.csr_matrix
    face_areas: np.ndarray
    degenerate_angles: int = 0

    @property
    def total_area(self) -> float:
        return float(self.mass.sum())

    def laplacian(self, values: np.ndarray) -> np.ndarray:
        """Aplica M^{-1} L0 a un campo por vértice (escalar o vectorial)"""
        result = self.stiffness @ values
        if result.ndim == 1:
            return result / self.mass
        return result / self.mass[:, None]

    @cached_property
    def bilaplacian_stiffness(self) -> sparse.csr_matrix:
        """L0 M^{-1} L0, simétrica semidefinida positiva"""
        inv_mass = sparse.diags(1.0 / self.mass)
        return (self.stiffness @ inv_mass @ self.stiffness).tocsr()


def mixed_voronoi_areas(dots: np.ndarray, double_areas: np.ndarray, cot: np.ndarray) -> np.ndarray:
    """
    Área de cada esquina (F, 3) según la regla de Voronoi mixta.

    En caras no obtusas cada esquina recibe su región de Voronoi
    (|e_ij|^2 cot_k + |e_ik|^2 cot_j) / 8; si la cara es obtusa, la esquina
    obtusa recibe la mitad del área y las otras dos un cuarto cada una. Las
    piezas son positivas y suman el área de la cara.
    """
    area = 0.5 * double_areas
    # |p_{k+1} - p_k|^2 = dots_k + dots_{k+1}
    next_sq = dots + np.roll(dots, -1, axis=1)
    prev_sq = dots + np.roll(dots, -2, axis=1)
    voronoi = (next_sq * np.roll(cot, -2, axis=1) + prev_sq * np.roll(cot, -1, axis=1)) / 8.0

    obtuse_corner = dots < 0.0
    obtuse_face = obtuse_corner.any(axis=1)
    split = np.where(obtuse_corner, 0.5, 0.25) * area[:, None]
    pieces = np.where(obtuse_face[:, None], split, voronoi)
    return np.where(double_areas[:, None] > 0.0, pieces, 0.0)


def build_operators(mesh: ImmersedMesh, strict: bool = False) -> OperatorCache:
    """
    Ensambla el Laplace-Beltrami de cotangentes y la masa de Voronoi mixta.

    Los ángulos mayores que pi - 1e-6 se marcan y sus cotangentes se recortan
    a |cot| <= 1e6; con strict=True se lanza DegenerateCotangent.
    """
    faces = mesh.faces
    num_vertices = mesh.num_vertices
    dots, double_areas = mesh.corner_terms

    with np.errstate(divide='ignore', invalid='ignore'):
        cot = dots / double_areas[:, None]
    cot = np.nan_to_num(cot, nan=0.0, posinf=COT_CLAMP, neginf=-COT_CLAMP)
    cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)

    degenerate = int(np.sum(mesh.corner_angles > np.pi - ANGLE_TOL))
    if degenerate:
        if strict:
            raise DegenerateCotangent(f"{degenerate} ángulos casi llanos")
        logger.warning(f"{degenerate} ángulos casi llanos; cotangentes recortadas a {COT_CLAMP:g}")

    # la esquina k es opuesta a la arista (k+1, k+2)
    i = np.roll(faces, -1, axis=1).reshape(-1)
    j = np.roll(faces, -2, axis=1).reshape(-1)
    w = 0.5 * cot.reshape(-1)
    off_diagonal = sparse.coo_matrix(
        (np.concatenate((w, w)), (np.concatenate((i, j)), np.concatenate((j, i)))),
        shape=(num_vertices, num_vertices),
    ).tocsr()
    row_sums = np.asarray(off_diagonal.sum(axis=1)).ravel()
    stiffness = (off_diagonal - sparse.diags(row_sums)).tocsr()

    face_areas = mesh.face_areas
    mass = np.bincount(
        faces.reshape(-1), weights=mixed_voronoi_areas(dots, double_areas, cot).reshape(-1),
        minlength=num_vertices,
    )
    if np.any(mass <= 0.0):
        raise InvalidMesh(f"{int(np.sum(mass <= 0))} vértices sin área incidente")

    return OperatorCache(
        mass=mass,
        stiffness=stiffness,
        face_areas=face_areas,
        degenerate_angles=degenerate,
    )


def mean_curvature_vector(mesh: ImmersedMesh, ops: OperatorCache) -> np.ndarray:
    """H_lap = M^{-1} L0 f por coordenada ambiente; (V, N)"""
    return ops.laplacian(mesh.positions)


# ==============================================================================
# MARCOS
# ==============================================================================

@dataclass(frozen=True, eq=False)
class VertexFrame:
    """Marco de un vértice: 2 tangentes y N-2 normales, todos ortonormales"""
    tangent: np.ndarray   # (N, 2)
    normal: np.ndarray    # (N, N-2)


@dataclass(frozen=True, eq=False)
class VertexFrames:
    """Marcos de todos los vértices apilados"""
    tangent: np.ndarray   # (V, N, 2)
    normal: np.ndarray    # (V, N, N-2)

    def __len__(self):
        return len(self.tangent)

    def __getitem__(self, vertex: int) -> VertexFrame:
        return VertexFrame(tangent=self.tangent[vertex], normal=self.normal[vertex])

    def project_normal(self, vectors: np.ndarray) -> np.ndarray:
        coeffs = np.einsum('vna,vn->va', self.normal, vectors)
        return np.einsum('vna,va->vn', self.normal, coeffs)


def vertex_frames(mesh: ImmersedMesh) -> VertexFrames:
    """
    Plano tangente por las dos direcciones principales de la nube centrada
    del 1-anillo; las normales completan una base ortonormal de R^N.
    """
    idx, mask = mesh.topology.ring(1)
    counts = mask.sum(axis=1)
    if np.any(counts < 3):
        bad = np.flatnonzero(counts < 3)
        raise RankDeficientStar(f"vértices con menos de 3 vecinos: {bad[:10].tolist()}")

    weights = mask.astype(float)
    points = mesh.positions[idx]
    center = np.einsum('vk,vkn->vn', weights, points) / counts[:, None]
    centered = (points - center[:, None, :]) * weights[..., None]
    covariance = np.einsum('vkn,vkm->vnm', centered, centered)

    evals, evecs = np.linalg.eigh(covariance)
    colinear = evals[:, -2] <= RANK_TOL * np.maximum(evals[:, -1], np.finfo(float).tiny)
    if np.any(colinear):
        bad = np.flatnonzero(colinear)
        raise RankDeficientStar(f"1-anillos colineales en los vértices {bad[:10].tolist()}")

    tangent = evecs[:, :, -1:-3:-1]
    normal = evecs[:, :, :-2]
    return VertexFrames(tangent=tangent, normal=normal)


# ==============================================================================
# SEGUNDA FORMA FUNDAMENTAL
# ==============================================================================

@dataclass(frozen=True, eq=False)
class CurvatureField:
    """
    Estado geométrico por vértice.

    metric y second_form están en las coordenadas del plano tangente del
    marco de entrada; fitted_frames es la base ortonormal de la superficie
    ajustada, en la que se expresan orthonormal_form y las componentes
    normales.
    """
    frames: VertexFrames
    fitted_frames: VertexFrames
    metric: np.ndarray         # g, (V, 2, 2)
    second_form: np.ndarray    # A_ij en R^N, (V, 2, 2, N)
    H: np.ndarray              # g^{ij} A_ij, (V, N)
    tracefree: np.ndarray      # A°, (V, 2, 2, N)
    K: np.ndarray              # (|H|^2 - |A|^2) / 2
    A_sq: np.ndarray
    Ao_sq: np.ndarray
    H_sq: np.ndarray
    H_lap: Optional[np.ndarray] = None

    @property
    def num_vertices(self) -> int:
        return len(self.H)

    @cached_property
    def metric_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.metric)

    @cached_property
    def _metric_inverse_sqrt(self) -> np.ndarray:
        return _inverse_sqrt(self.metric)

    @cached_property
    def orthonormal_form(self) -> np.ndarray:
        """g^{-1/2} A g^{-1/2}: A en una base tangente ortonormal"""
        s = self._metric_inverse_sqrt
        return np.einsum('vik,vkln,vlj->vijn', s, self.second_form, s)

    @cached_property
    def orthonormal_tracefree(self) -> np.ndarray:
        s = self._metric_inverse_sqrt
        return np.einsum('vik,vkln,vlj->vijn', s, self.tracefree, s)

    @property
    def normal_coefficients(self) -> np.ndarray:
        """A_ij^alpha = <A_ij, nu_alpha> en el marco ajustado; (V, 2, 2, N-2)"""
        return np.einsum('vijn,vna->vija', self.orthonormal_form, self.fitted_frames.normal)

    @property
    def tracefree_trace(self) -> np.ndarray:
        """g^{ij} A°_ij, nulo salvo redondeo"""
        return np.einsum('vij,vijn->vn', self.metric_inverse, self.tracefree)

    @property
    def max_abs_A(self) -> float:
        return float(np.sqrt(self.A_sq.max()))

    def project_normal(self, vectors: np.ndarray) -> np.ndarray:
        return self.fitted_frames.project_normal(vectors)

    def mean_curvature_discrepancy(self) -> float:
        """max |H_lap - H| entre las dos definiciones de curvatura media"""
        if self.H_lap is None:
            return float('nan')
        return float(np.linalg.norm(self.H_lap - self.H, axis=1).max())


def _fit_stencil(mesh: ImmersedMesh):
    """2-anillo por vértice, con respaldo en el 3-anillo si hay < 6 puntos"""
    idx, mask = mesh.topology.ring(2)
    short = mask.sum(axis=1) < MIN_FIT_POINTS
    if not np.any(short):
        return idx, mask

    logger.warning(f"{int(short.sum())} vértices con 2-anillo insuficiente; se usa el 3-anillo")
    idx3, mask3 = mesh.topology.ring(3)
    if np.any(mask3[short].sum(axis=1) < MIN_FIT_POINTS):
        raise UnderdeterminedFit("ni el 3-anillo tiene 6 vecinos para el ajuste cuadrático")

    width = max(idx.shape[1], idx3.shape[1])
    pad = width - idx.shape[1]
    idx = np.pad(idx, ((0, 0), (0, pad)), mode='edge')
    mask = np.pad(mask, ((0, 0), (0, pad)), constant_values=False)
    pad3 = width - idx3.shape[1]
    idx[short] = np.pad(idx3[short], ((0, 0), (0, pad3)), mode='edge')
    mask[short] = np.pad(mask3[short], ((0, 0), (0, pad3)), constant_values=False)
    return idx, mask


def second_fundamental_form(mesh: ImmersedMesh, frames: VertexFrames) -> CurvatureField:
    """
    Ajuste cuadrático por mínimos cuadrados ponderados (pesos 1/d^2) de las
    alturas normales sobre el plano tangente, en el 2-anillo.

    Cada altura z^alpha se modela como b.x + x^T a x / 2 pasando por el
    vértice. De ahí salen la métrica g_ij = <d_i f, d_j f> y
    A_ij = (d_ij f)^perp de la superficie ajustada.
    """
    num_vertices, ambient_dim = mesh.positions.shape
    idx, mask = _fit_stencil(mesh)

    rel = mesh.positions[idx] - mesh.positions[:, None, :]
    d2 = np.einsum('vkn,vkn->vk', rel, rel)
    weights = np.where(mask, 1.0 / np.maximum(d2, np.finfo(float).tiny), 0.0)
    # escala local para que el sistema normal quede bien condicionado
    scale = np.sqrt(mask.sum(axis=1) / weights.sum(axis=1))

    x = np.einsum('vkn,vni->vki', rel, frames.tangent) / scale[:, None, None]
    z = np.einsum('vkn,vna->vka', rel, frames.normal) / scale[:, None, None]
    design = np.stack(
        (x[..., 0], x[..., 1], 0.5 * x[..., 0] ** 2, x[..., 0] * x[..., 1], 0.5 * x[..., 1] ** 2),
        axis=-1,
    )
    lhs = np.einsum('vk,vki,vkj->vij', weights, design, design)
    rhs = np.einsum('vk,vki,vka->via', weights, design, z)

    cond = np.linalg.cond(lhs)
    if np.any(~np.isfinite(cond) | (cond > FIT_COND_LIMIT)):
        bad = np.flatnonzero(~np.isfinite(cond) | (cond > FIT_COND_LIMIT))
        raise UnderdeterminedFit(f"ajuste mal condicionado en los vértices {bad[:10].tolist()}")
    coef = np.linalg.solve(lhs, rhs)

    slopes = coef[:, 0:2, :]
    hess = np.empty((num_vertices, 2, 2, coef.shape[2]))
    hess[:, 0, 0] = coef[:, 2]
    hess[:, 0, 1] = hess[:, 1, 0] = coef[:, 3]
    hess[:, 1, 1] = coef[:, 4]
    hess /= scale[:, None, None, None]

    # d_i f = e_i + sum_alpha b_i^alpha nu_alpha
    jacobian = frames.tangent + np.einsum('vna,via->vni', frames.normal, slopes)
    metric = np.einsum('vni,vnj->vij', jacobian, jacobian)
    metric_inv = np.linalg.inv(metric)
    projector = np.eye(ambient_dim) - np.einsum('vni,vij,vmj->vnm', jacobian, metric_inv, jacobian)

    second_derivative = np.einsum('vna,vija->vijn', frames.normal, hess)
    second_form = np.einsum('vnm,vijm->vijn', projector, second_derivative)

    H = np.einsum('vij,vijn->vn', metric_inv, second_form)
    tracefree = second_form - 0.5 * metric[..., None] * H[:, None, None, :]
    A_sq = np.einsum('vik,vjl,vijn,vkln->v', metric_inv, metric_inv, second_form, second_form)
    Ao_sq = np.einsum('vik,vjl,vijn,vkln->v', metric_inv, metric_inv, tracefree, tracefree)
    H_sq = np.einsum('vn,vn->v', H, H)

    fitted_tangent = jacobian @ _inverse_sqrt(metric)
    fitted_normal = _orthonormalize(projector @ frames.normal)

    return CurvatureField(
        frames=frames,
        fitted_frames=VertexFrames(tangent=fitted_tangent, normal=fitted_normal),
        metric=metric,
        second_form=second_form,
        H=H,
        tracefree=tracefree,
        K=0.5 * (H_sq - A_sq),
        A_sq=A_sq,
        Ao_sq=Ao_sq,
        H_sq=H_sq,
    )


def curvature_field(mesh: ImmersedMesh, ops: Optional[OperatorCache] = None) -> CurvatureField:
    """Marcos + segunda forma + H_lap en un solo paso"""
    if ops is None:
        ops = build_operators(mesh)
    field = second_fundamental_form(mesh, vertex_frames(mesh))
    field = replace(field, H_lap=mean_curvature_vector(mesh, ops))
    logger.debug(f"max |H_lap - H| = {field.mean_curvature_discrepancy():.3e}")
    return field


def gauss_curvature_angle_defect(mesh: ImmersedMesh, ops: Optional[OperatorCache] = None) -> np.ndarray:
    """K_i = (2 pi - suma de ángulos incidentes) / m_i"""
    if ops is None:
        ops = build_operators(mesh)
    angle_sums = np.bincount(
        mesh.faces.reshape(-1), weights=mesh.corner_angles.reshape(-1), minlength=mesh.num_vertices
    )
    return (2.0 * np.pi - angle_sums) / ops.mass


def q_endomorphism(field: CurvatureField, phi: np.ndarray, tracefree: bool = False) -> np.ndarray:
    """
    Q(A) phi = A_ij <A^ij, phi> por vértice (Q(A°) phi con tracefree=True).

    phi se proyecta al espacio normal; si tenía componente tangente se
    emite una advertencia.
    """
    phi = np.asarray(phi, dtype=float)
    projected = field.project_normal(phi)
    leak = np.linalg.norm(phi - projected, axis=1)
    size = max(float(np.linalg.norm(phi, axis=1).max()), np.finfo(float).tiny)
    if leak.max() > NORMAL_SPACE_TOL * size:
        logger.warning(f"phi tenía componente tangente (máx {leak.max():.2e}); se proyectó")

    form = field.orthonormal_tracefree if tracefree else field.orthonormal_form
    return np.einsum('vijn,vijm,vm->vn', form, form, projected)


# ==============================================================================
# GRADIENTES
# ==============================================================================

@dataclass(frozen=True, eq=False)
class FaceFrames:
    """Base tangente de cada cara y la inversa de sus aristas en 2D"""
    tangent: np.ndarray        # (F, N, 2)
    edge_inverse: np.ndarray   # (F, 2, 2)

    def gradient(self, corner_values: np.ndarray) -> np.ndarray:
        """Gradiente P1 de valores en las esquinas (F, 3, ...) -> (F, 2, ...)"""
        du = np.stack((corner_values[:, 1] - corner_values[:, 0],
                       corner_values[:, 2] - corner_values[:, 0]), axis=1)
        return np.einsum('fij,fj...->fi...', self.edge_inverse, du)


def face_frames(mesh: ImmersedMesh) -> FaceFrames:
    p = mesh.positions[mesh.faces]
    e1 = p[:, 1] - p[:, 0]
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    w = p[:, 2] - p[:, 0]
    e2 = w - np.einsum('fn,fn->f', w, e1)[:, None] * e1
    e2 /= np.linalg.norm(e2, axis=1)[:, None]
    tangent = np.stack((e1, e2), axis=-1)

    local = np.einsum('fkn,fni->fki', p - p[:, :1], tangent)
    edges = np.stack((local[:, 1], local[:, 2]), axis=1)
    return FaceFrames(tangent=tangent, edge_inverse=np.linalg.inv(edges))


def face_gradients(mesh: ImmersedMesh, values: np.ndarray, frames: Optional[FaceFrames] = None) -> np.ndarray:
    """Gradiente por cara de un campo por vértice, en coordenadas de la cara"""
    if frames is None:
        frames = face_frames(mesh)
    return frames.gradient(np.asarray(values, dtype=float)[mesh.faces])


@dataclass(frozen=True, eq=False)
class GradientField:
    grad_H: np.ndarray     # (F, 2, N-2)
    grad_A: np.ndarray     # (F, 2, 2, 2, N-2)
    grad_Ao: np.ndarray    # (F, 2, 2, 2, N-2)
    face_areas: np.ndarray

    def _integral(self, grad: np.ndarray) -> float:
        density = np.sum(grad.reshape(len(grad), -1) ** 2, axis=1)
        return float(density @ self.face_areas)

    @cached_property
    def int_grad_H2(self) -> float:
        return self._integral(self.grad_H)

    @cached_property
    def int_grad_A2(self) -> float:
        return self._integral(self.grad_A)

    @cached_property
    def int_grad_Ao2(self) -> float:
        return self._integral(self.grad_Ao)


def covariant_gradients(mesh: ImmersedMesh, field: CurvatureField) -> GradientField:
    """
    Gradientes por cara de H, A y A° en componentes alineadas.

    Los marcos ajustados de los tres vértices se llevan al marco de la cara
    con la rotación de menor desajuste (factor polar de los solapamientos
    tangente y normal) y luego se toma el gradiente lineal por cara.
    """
    faces = mesh.faces
    ff = face_frames(mesh)

    # normales de la cara: las del vértice 0 sin su parte tangente a la cara
    n0 = field.fitted_frames.normal[faces[:, 0]]
    n0 = n0 - ff.tangent @ np.einsum('fni,fna->fia', ff.tangent, n0)
    face_normal = _orthonormalize(n0)

    tv = field.fitted_frames.tangent[faces]
    nv = field.fitted_frames.normal[faces]
    rot_t = _polar(np.einsum('fni,fknj->fkij', ff.tangent, tv))
    rot_n = _polar(np.einsum('fna,fknb->fkab', face_normal, nv))

    normal = field.fitted_frames.normal
    comp_A = np.einsum('vijn,vna->vija', field.orthonormal_form, normal)
    comp_Ao = np.einsum('vijn,vna->vija', field.orthonormal_tracefree, normal)
    comp_H = np.einsum('vn,vna->va', field.H, normal)

    def align(components):
        return np.einsum('fkip,fkjq,fkab,fkpqb->fkija', rot_t, rot_t, rot_n, components[faces])

    corner_H = np.einsum('fkab,fkb->fka', rot_n, comp_H[faces])

    return GradientField(
        grad_H=ff.gradient(corner_H),
        grad_A=ff.gradient(align(comp_A)),
        grad_Ao=ff.gradient(align(comp_Ao)),
        face_areas=mesh.face_areas,
    )


# ==============================================================================
# VOLCADO POR VÉRTICE
# ==============================================================================

def dump_field(field: CurvatureField, ops: OperatorCache, path) -> Path:
    """
    Vuelca cantidades escalares por vértice.

    .csv -> formato largo 'vertex,quantity,value'; .npz -> una columna por
    cantidad.
    """
    path = Path(path)
    columns = {
        'mass': ops.mass,
        'H_sq': field.H_sq,
        'A_sq': field.A_sq,
        'Ao_sq': field.Ao_sq,
        'K': field.K,
    }
    if field.H_lap is not None:
        columns['H_lap_sq'] = np.einsum('vn,vn->v', field.H_lap, field.H_lap)

    if path.suffix == '.npz':
        np.savez(path, **columns)
    else:
        wide = pd.DataFrame(columns)
        wide.index.name = 'vertex'
        long = wide.reset_index().melt(id_vars='vertex', var_name='quantity', value_name='value')
        long.to_csv(path, index=False, float_format='%.17g')
    logger.info(f"Campo por vértice escrito en {path}")
    return path
