# chenflow/mesh_core.py
"""
Inmersiones discretas f: M^2 -> R^N como mallas de triángulos cerradas.

Contiene la representación inmutable (ImmersedMesh), la validación de
variedad cerrada y orientada, los generadores de superficies de referencia
y la lectura/escritura en OBJ y en el formato extendido para N != 3.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from django.conf import settings

from .exceptions import (
    DegenerateFace,
    InvalidMesh,
    InvalidParameters,
    NotClosed,
    NotOriented,
    ParseError,
    UnsupportedDimension,
)

logger = logging.getLogger(__name__)


# ==============================================================================
# CONSTANTES
# ==============================================================================

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

ICOSAHEDRON_VERTICES = np.array([
    [-1.0, _GOLDEN, 0.0],
    [1.0, _GOLDEN, 0.0],
    [-1.0, -_GOLDEN, 0.0],
    [1.0, -_GOLDEN, 0.0],
    [0.0, -1.0, _GOLDEN],
    [0.0, 1.0, _GOLDEN],
    [0.0, -1.0, -_GOLDEN],
    [0.0, 1.0, -_GOLDEN],
    [_GOLDEN, 0.0, -1.0],
    [_GOLDEN, 0.0, 1.0],
    [-_GOLDEN, 0.0, -1.0],
    [-_GOLDEN, 0.0, 1.0],
])

# Orientación antihoraria vista desde afuera
ICOSAHEDRON_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [5, 4, 9], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])

TORUS_EMBEDDINGS = ('R3', 'clifford_R4')

# Semiancho axial del cuello de la mancuerna (sobre la esfera unitaria)
DUMBBELL_NECK_WIDTH = 0.3
DUMBBELL_ELONGATION = 2.0

OBJ_SUFFIX = '.obj'
EXTENDED_SUFFIX = '.nobj'


# ==============================================================================
# TOPOLOGÍA
# ==============================================================================

class MeshTopology:
    """Conectividad derivada de las caras; se comparte entre pasos del flujo"""

    def __init__(self, faces, num_vertices: int):
        faces = np.array(faces, dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise InvalidMesh("Las caras deben ser triples de índices")
        if len(faces) == 0:
            raise InvalidMesh("La malla no tiene caras")
        if faces.min() < 0 or faces.max() >= num_vertices:
            raise InvalidMesh("Índice de vértice fuera de rango en las caras")

        repeated = (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 2] == faces[:, 0])
        )
        if repeated.any():
            raise InvalidMesh(f"Vértice repetido en la cara {int(np.argmax(repeated))}")

        faces.setflags(write=False)
        self.faces = faces
        self.num_vertices = int(num_vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def directed_edges(self) -> np.ndarray:
        """Aristas dirigidas (i -> j) en el orden de recorrido de cada cara"""
        heads = self.faces.reshape(-1)
        tails = np.roll(self.faces, -1, axis=1).reshape(-1)
        return np.column_stack((heads, tails))

    @cached_property
    def _edge_table(self) -> Tuple[np.ndarray, np.ndarray]:
        undirected = np.sort(self.directed_edges, axis=1)
        edges, counts = np.unique(undirected, axis=0, return_counts=True)
        return edges, counts

    @property
    def edges(self) -> np.ndarray:
        return self._edge_table[0]

    @property
    def edge_face_counts(self) -> np.ndarray:
        """Número de caras incidentes por arista (2 en una superficie cerrada)"""
        return self._edge_table[1]

    @cached_property
    def max_directed_multiplicity(self) -> int:
        _, counts = np.unique(self.directed_edges, axis=0, return_counts=True)
        return int(counts.max())

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def euler_characteristic(self) -> int:
        return self.num_vertices - self.num_edges + self.num_faces

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Matriz de adyacencia simétrica y binaria del grafo de aristas"""
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        n = self.num_vertices
        adj = sparse.csr_matrix(
            (data, (np.concatenate((i, j)), np.concatenate((j, i)))), shape=(n, n)
        )
        adj.data[:] = 1.0
        return adj

    @property
    def valences(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def ring(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Vecindad combinatoria de radio k de cada vértice (sin el vértice).

        Returns:
            Tupla (indices, mask) de forma (V, k_max); las posiciones con
            mask=False son relleno y apuntan al propio vértice.
        """
        cache = self.__dict__.setdefault('_ring_cache', {})
        if k in cache:
            return cache[k]

        reach = self.adjacency.copy()
        for _ in range(k - 1):
            reach = reach + reach @ self.adjacency
        reach = reach.tolil()
        reach.setdiag(0)
        reach = reach.tocsr()
        reach.eliminate_zeros()

        counts = np.diff(reach.indptr)
        width = int(counts.max()) if len(counts) else 0
        mask = np.arange(width)[None, :] < counts[:, None]
        indices = np.repeat(np.arange(self.num_vertices)[:, None], width, axis=1)
        indices[mask] = reach.indices
        cache[k] = (indices, mask)
        return indices, mask


# ==============================================================================
# INMERSIÓN DISCRETA
# ==============================================================================

@dataclass(frozen=True, eq=False)
class ImmersedMesh:
    """
    Superficie triangulada cerrada y orientada con vértices en R^N.

    La conectividad es inmutable; el flujo solo mueve posiciones y crea
    mallas nuevas con with_positions, que comparten la topología.
    """
    positions: np.ndarray
    topology: MeshTopology

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float)
        if positions.ndim != 2:
            raise InvalidMesh("Las posiciones deben ser una matriz (V, N)")
        if positions.shape[1] < 3:
            raise InvalidMesh(f"Dimensión ambiente N={positions.shape[1]} < 3")
        if positions.shape[0] != self.topology.num_vertices:
            raise InvalidMesh("El número de posiciones no coincide con la topología")
        if not np.all(np.isfinite(positions)):
            raise InvalidMesh("Posiciones no finitas")
        positions.setflags(write=False)
        object.__setattr__(self, 'positions', positions)

    @classmethod
    def from_arrays(cls, positions, faces) -> 'ImmersedMesh':
        positions = np.asarray(positions, dtype=float)
        return cls(positions, MeshTopology(faces, len(positions)))

    def with_positions(self, positions) -> 'ImmersedMesh':
        return ImmersedMesh(positions, self.topology)

    # --- Tamaños --------------------------------------------------------------

    @property
    def faces(self) -> np.ndarray:
        return self.topology.faces

    @property
    def ambient_dim(self) -> int:
        return self.positions.shape[1]

    @property
    def num_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def num_faces(self) -> int:
        return self.topology.num_faces

    # --- Geometría --------------------------------------------------------------

    @cached_property
    def corner_terms(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Productos escalares en cada esquina y doble área de cada cara.

        Returns:
            (dots, double_areas): dots[f, k] = <p_{k+1} - p_k, p_{k+2} - p_k>;
            double_areas[f] = |u ^ v|, válido en cualquier codimensión.
        """
        p = self.positions[self.faces]
        nxt = np.roll(p, -1, axis=1) - p
        prv = np.roll(p, -2, axis=1) - p
        dots = np.einsum('fkn,fkn->fk', nxt, prv)
        u = p[:, 1] - p[:, 0]
        v = p[:, 2] - p[:, 0]
        uu = np.einsum('fn,fn->f', u, u)
        vv = np.einsum('fn,fn->f', v, v)
        uv = np.einsum('fn,fn->f', u, v)
        double_areas = np.sqrt(np.maximum(uu * vv - uv * uv, 0.0))
        return dots, double_areas

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * self.corner_terms[1]

    @cached_property
    def corner_angles(self) -> np.ndarray:
        dots, double_areas = self.corner_terms
        return np.arctan2(double_areas[:, None], dots)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.topology.edges
        return np.linalg.norm(self.positions[e[:, 0]] - self.positions[e[:, 1]], axis=1)

    @property
    def h_min(self) -> float:
        """Longitud mínima de arista"""
        return float(self.edge_lengths.min())

    @property
    def h_mean(self) -> float:
        return float(self.edge_lengths.mean())

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.positions[self.faces].mean(axis=1)

    @property
    def bounding_diagonal(self) -> float:
        return float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))

    @property
    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)


# ==============================================================================
# VALIDACIÓN
# ==============================================================================

@dataclass(frozen=True)
class MeshQualityReport:
    """Reporte de calidad; nunca modifica la malla"""
    min_angle: float
    max_valence: int
    num_vertices: int
    num_edges: int
    num_faces: int
    euler_characteristic: int
    is_closed: bool
    is_oriented: bool
    min_face_area: float
    area_eps: float

    @property
    def has_degenerate_faces(self) -> bool:
        return self.min_face_area < self.area_eps


def default_area_eps(mesh: ImmersedMesh) -> float:
    factor = settings.FLOW_SETTINGS.get('AREA_EPS_FACTOR', 1e-12)
    return factor * mesh.bounding_diagonal ** 2


def quality_report(mesh: ImmersedMesh, area_eps: Optional[float] = None) -> MeshQualityReport:
    """Calcula el reporte sin lanzar errores"""
    topo = mesh.topology
    if area_eps is None:
        area_eps = default_area_eps(mesh)

    counts = topo.edge_face_counts
    is_closed = bool(np.all(counts == 2))
    is_oriented = topo.max_directed_multiplicity == 1

    return MeshQualityReport(
        min_angle=float(mesh.corner_angles.min()),
        max_valence=int(topo.valences.max()),
        num_vertices=mesh.num_vertices,
        num_edges=topo.num_edges,
        num_faces=topo.num_faces,
        euler_characteristic=topo.euler_characteristic,
        is_closed=is_closed,
        is_oriented=is_oriented,
        min_face_area=float(mesh.face_areas.min()),
        area_eps=float(area_eps),
    )


def validate(mesh: ImmersedMesh, area_eps: Optional[float] = None) -> MeshQualityReport:
    """
    Valida que la malla sea una superficie cerrada, orientada y sin caras
    degeneradas.

    Args:
        mesh: Malla a validar
        area_eps: Área mínima admitida (por defecto relativa a la caja)

    Returns:
        MeshQualityReport

    Raises:
        NotClosed, NotOriented, DegenerateFace (con el reporte adjunto)
    """
    report = quality_report(mesh, area_eps)

    if not report.is_closed:
        counts = mesh.topology.edge_face_counts
        if np.any(counts == 1):
            raise NotClosed(f"{int(np.sum(counts == 1))} aristas de borde", report)
        raise NotClosed(f"{int(np.sum(counts > 2))} aristas no-variedad", report)

    if not report.is_oriented:
        raise NotOriented("Orientación inconsistente entre caras vecinas", report)

    if report.has_degenerate_faces:
        bad = int(np.sum(mesh.face_areas < report.area_eps))
        raise DegenerateFace(
            f"{bad} caras con área < {report.area_eps:.3e}", report
        )

    return report


# ==============================================================================
# GENERADORES
# ==============================================================================

def _subdivide(vertices: np.ndarray, faces: np.ndarray):
    """Divide cada triángulo en cuatro por los puntos medios y proyecta a la esfera"""
    num_faces = len(faces)
    halves = np.concatenate((faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]))
    unique, inverse = np.unique(np.sort(halves, axis=1), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1).reshape(3, num_faces).T + len(vertices)

    midpoints = vertices[unique].mean(axis=1)
    vertices = np.vstack((vertices, midpoints))
    vertices /= np.linalg.norm(vertices, axis=1)[:, None]

    m01, m12, m20 = inverse[:, 0], inverse[:, 1], inverse[:, 2]
    f0, f1, f2 = faces[:, 0], faces[:, 1], faces[:, 2]
    faces = np.concatenate((
        np.column_stack((f0, m01, m20)),
        np.column_stack((f1, m12, m01)),
        np.column_stack((f2, m20, m12)),
        np.column_stack((m01, m12, m20)),
    ))
    return vertices, faces


def _embed(points: np.ndarray, ambient_dim: int) -> np.ndarray:
    if ambient_dim < points.shape[1]:
        raise InvalidParameters(f"ambient_dim={ambient_dim} menor que {points.shape[1]}")
    padded = np.zeros((len(points), ambient_dim))
    padded[:, :points.shape[1]] = points
    return padded


def icosphere(radius: float = 1.0, level: int = 0, ambient_dim: int = 3) -> ImmersedMesh:
    """
    Esfera por subdivisión del icosaedro, centrada en el origen.

    V = 10 * 4^level + 2. Para ambient_dim > 3 la esfera vive en las tres
    primeras coordenadas de R^N.
    """
    if radius <= 0:
        raise InvalidParameters(f"radius debe ser positivo (recibido {radius})")
    if level < 0:
        raise InvalidParameters(f"level debe ser >= 0 (recibido {level})")

    max_level = settings.FLOW_SETTINGS.get('MAX_ICOSPHERE_LEVEL', 7)
    if level > max_level:
        raise InvalidParameters(
            f"level={level} excede el presupuesto de memoria (máximo {max_level})"
        )

    vertices = ICOSAHEDRON_VERTICES / np.linalg.norm(ICOSAHEDRON_VERTICES, axis=1)[:, None]
    faces = ICOSAHEDRON_FACES.copy()
    for _ in range(level):
        vertices, faces = _subdivide(vertices, faces)

    return ImmersedMesh.from_arrays(_embed(radius * vertices, ambient_dim), faces)


def ellipsoid(a: float, b: float, c: float, level: int) -> ImmersedMesh:
    """Elipsoide de semiejes (a, b, c) a partir de icosphere(1, level)"""
    if min(a, b, c) <= 0:
        raise InvalidParameters("Los semiejes del elipsoide deben ser positivos")
    sphere = icosphere(1.0, level)
    return sphere.with_positions(sphere.positions * np.array([a, b, c]))


def torus(R: float, r: float, nu: int = 64, nv: int = 32, embed: str = 'R3') -> ImmersedMesh:
    """
    Toro sobre una grilla nu x nv.

    embed='R3' da el toro de revolución de radios (R, r); embed='clifford_R4'
    da el toro plano (cos u, sin u, cos v, sin v) * R / sqrt(2) en R^4 y
    no usa r.
    """
    if embed not in TORUS_EMBEDDINGS:
        raise InvalidParameters(f"embed debe ser uno de {TORUS_EMBEDDINGS}")
    if nu < 3 or nv < 3:
        raise InvalidParameters("La grilla del toro necesita nu, nv >= 3")
    if R <= 0:
        raise InvalidParameters("R debe ser positivo")
    if embed == 'R3' and not 0 < r < R:
        raise InvalidParameters(f"Se requiere 0 < r < R (r={r}, R={R})")

    u = 2.0 * np.pi * np.arange(nu) / nu
    v = 2.0 * np.pi * np.arange(nv) / nv
    U, V = np.meshgrid(u, v, indexing='ij')
    U, V = U.reshape(-1), V.reshape(-1)

    if embed == 'R3':
        ring = R + r * np.cos(V)
        positions = np.column_stack((ring * np.cos(U), ring * np.sin(U), r * np.sin(V)))
    else:
        positions = R / np.sqrt(2.0) * np.column_stack(
            (np.cos(U), np.sin(U), np.cos(V), np.sin(V))
        )

    I, J = np.meshgrid(np.arange(nu), np.arange(nv), indexing='ij')
    I, J = I.reshape(-1), J.reshape(-1)
    a = I * nv + J
    b = ((I + 1) % nu) * nv + J
    c = ((I + 1) % nu) * nv + (J + 1) % nv
    d = I * nv + (J + 1) % nv
    faces = np.concatenate((np.column_stack((a, b, c)), np.column_stack((a, c, d))))

    return ImmersedMesh.from_arrays(positions, faces)


def dumbbell(neck_ratio: float, level: int) -> ImmersedMesh:
    """
    Dos bulbos esféricos unidos por un cuello tipo catenoide de radio
    relativo neck_ratio.

    La esfera unitaria se estira a lo largo de z y cada paralelo se escala
    por el mínimo suave entre 1 y a cosh(Z / w), con a = neck_ratio y
    w = DUMBBELL_NECK_WIDTH; cerca del plano Z = 0 el perfil es el de un
    catenoide de cintura a.
    """
    if not 0.0 < neck_ratio < 1.0:
        raise InvalidParameters(f"neck_ratio debe estar en (0, 1) (recibido {neck_ratio})")

    sphere = icosphere(1.0, level)
    x, y, z = sphere.positions.T
    Z = DUMBBELL_ELONGATION * z
    with np.errstate(over='ignore'):
        catenoid = neck_ratio * np.cosh(Z / DUMBBELL_NECK_WIDTH)
    squeeze = (1.0 + catenoid ** -4) ** -0.25
    positions = np.column_stack((x * squeeze, y * squeeze, Z))
    return sphere.with_positions(positions)


# ==============================================================================
# ENTRADA / SALIDA
# ==============================================================================

def _write_records(fh, mesh: ImmersedMesh):
    n = mesh.ambient_dim
    np.savetxt(fh, mesh.positions, fmt='v ' + ' '.join(['%.17g'] * n))
    np.savetxt(fh, mesh.faces + 1, fmt='f %d %d %d')


def save_obj(mesh: ImmersedMesh, path) -> Path:
    """Escribe el subconjunto OBJ (v/f, índices desde 1). Solo N = 3."""
    if mesh.ambient_dim != 3:
        raise UnsupportedDimension(
            f"OBJ solo admite N=3 (la malla vive en R^{mesh.ambient_dim}); use save_extended"
        )
    path = Path(path)
    with path.open('w', encoding='utf-8') as fh:
        fh.write(f"# chenflow: {mesh.num_vertices} vertices, {mesh.num_faces} caras\n")
        _write_records(fh, mesh)
    return path


def save_extended(mesh: ImmersedMesh, path) -> Path:
    """Formato extendido: encabezado 'ndim N' y luego registros v/f"""
    path = Path(path)
    with path.open('w', encoding='utf-8') as fh:
        fh.write(f"# chenflow: {mesh.num_vertices} vertices, {mesh.num_faces} caras\n")
        fh.write(f"ndim {mesh.ambient_dim}\n")
        _write_records(fh, mesh)
    return path


def mesh_suffix(mesh: ImmersedMesh) -> str:
    return OBJ_SUFFIX if mesh.ambient_dim == 3 else EXTENDED_SUFFIX


def save_mesh(mesh: ImmersedMesh, path) -> Path:
    """Elige OBJ o formato extendido según la dimensión ambiente"""
    if mesh.ambient_dim == 3:
        return save_obj(mesh, path)
    return save_extended(mesh, path)


def _parse_mesh_lines(lines, allow_extended: bool) -> ImmersedMesh:
    ndim = None
    vertices = []
    faces = []

    for line_number, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        tag, *values = line.split()

        if tag == 'ndim':
            if ndim is not None or vertices:
                raise ParseError("'ndim' debe aparecer una vez y antes de los vértices", line_number)
            try:
                ndim = int(values[0]) if len(values) == 1 else None
            except ValueError:
                ndim = None
            if ndim is None or ndim < 3:
                raise ParseError("encabezado 'ndim' inválido", line_number)
            if ndim != 3 and not allow_extended:
                raise UnsupportedDimension(f"OBJ plano no admite ndim {ndim}")

        elif tag == 'v':
            try:
                coords = [float(x) for x in values]
            except ValueError:
                raise ParseError("coordenada no numérica", line_number)
            expected = ndim or 3
            if len(coords) != expected:
                if ndim is None and len(coords) > 3:
                    raise UnsupportedDimension(
                        f"línea {line_number}: vértice con {len(coords)} coordenadas en OBJ plano"
                    )
                raise ParseError(f"se esperaban {expected} coordenadas", line_number)
            vertices.append(coords)

        elif tag == 'f':
            if len(values) != 3:
                raise ParseError(f"solo se admiten triángulos (cara con {len(values)} vértices)", line_number)
            try:
                indices = [int(x) for x in values]
            except ValueError:
                raise ParseError("índice de cara inválido", line_number)
            if min(indices) < 1:
                raise ParseError("los índices de cara empiezan en 1", line_number)
            faces.append([i - 1 for i in indices])

        else:
            raise ParseError(f"registro no soportado '{tag}'", line_number)

    if not vertices or not faces:
        raise ParseError("el archivo no contiene vértices y caras")

    return ImmersedMesh.from_arrays(np.array(vertices), np.array(faces))


def load_obj(path) -> ImmersedMesh:
    """Lee el subconjunto OBJ (N = 3)"""
    with Path(path).open('r', encoding='utf-8') as fh:
        return _parse_mesh_lines(fh, allow_extended=False)


def load_mesh(path) -> ImmersedMesh:
    """Lee OBJ o el formato extendido (detecta el encabezado 'ndim')"""
    with Path(path).open('r', encoding='utf-8') as fh:
        mesh = _parse_mesh_lines(fh, allow_extended=True)
    logger.debug(f"Malla leída de {path}: V={mesh.num_vertices}, N={mesh.ambient_dim}")
    return mesh
