# chenflow/exceptions.py
"""
Jerarquía de errores del laboratorio de flujos.

Todas las excepciones de dominio heredan de ChenFlowError para que los
comandos de gestión puedan convertirlas en CommandError con un solo except.
"""


class ChenFlowError(Exception):
    """Error base del paquete chenflow"""


# ==============================================================================
# MALLAS
# ==============================================================================

class MeshError(ChenFlowError):
    """Malla inválida. Guarda el reporte de calidad cuando existe."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InvalidMesh(MeshError):
    """Índices fuera de rango, vértices repetidos en una cara o formas erróneas"""


class NotClosed(MeshError):
    """Se encontró una arista de borde (o no-variedad)"""


class NotOriented(MeshError):
    """Una arista se recorre dos veces en el mismo sentido"""


class DegenerateFace(MeshError):
    """Cara con área menor que area_eps"""


class ParseError(ChenFlowError):
    """Archivo de malla mal formado"""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"línea {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class UnsupportedDimension(ChenFlowError):
    """OBJ plano solo admite R^3"""


class InvalidParameters(ChenFlowError, ValueError):
    """Parámetros de generador, paso o constante fuera de rango"""


# ==============================================================================
# GEOMETRÍA DISCRETA
# ==============================================================================

class GeometryError(ChenFlowError):
    """Falla al ensamblar un operador geométrico"""


class DegenerateCotangent(GeometryError):
    """Ángulo mayor que pi - 1e-6 (solo se lanza en modo estricto)"""


class RankDeficientStar(GeometryError):
    """El 1-anillo de un vértice es colineal o tiene menos de 3 vecinos"""


class UnderdeterminedFit(GeometryError):
    """No hay suficientes vecinos para el ajuste cuadrático ni en el 3-anillo"""


# ==============================================================================
# FLUJO Y ANÁLISIS
# ==============================================================================

class SolverFailure(ChenFlowError):
    """El solver no convergió o el paso dejó una malla degenerada"""


class FlowTerminated(ChenFlowError):
    """Se intentó avanzar un estado que ya terminó"""


class PreconditionViolated(ChenFlowError):
    """La hipótesis de un chequeo no se cumple; el chequeo se omite"""


class RadiusScheduleExhausted(ChenFlowError):
    """Ningún radio del cronograma presentó concentración por encima de eps3"""


class ConfigError(ChenFlowError):
    """Archivo de configuración inválido"""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}


class RunDataError(ChenFlowError):
    """Directorio de corrida vacío o incompleto"""
