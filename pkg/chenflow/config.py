# chenflow/config.py
"""
Configuración de corridas en archivos INI con secciones [mesh], [flow] y
[constants]. Cada sección se valida con un formulario de Django; las claves
son exactamente los nombres de los campos de FlowConfig y Constants.
"""

import configparser
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from django import forms

from .analysis_suite import Constants
from .exceptions import ConfigError, InvalidParameters
from .flow_engine import FlowConfig, FlowFamily, Integrator
from .mesh_core import (
    TORUS_EMBEDDINGS,
    ImmersedMesh,
    dumbbell,
    ellipsoid,
    icosphere,
    load_mesh,
    torus,
)

logger = logging.getLogger(__name__)


# ==============================================================================
# GENERADORES
# ==============================================================================

GENERATORS = {
    'icosphere': icosphere,
    'ellipsoid': ellipsoid,
    'torus': torus,
    'dumbbell': dumbbell,
}

GENERATOR_PARAMS = {
    'icosphere': ('radius', 'level', 'ambient_dim'),
    'ellipsoid': ('a', 'b', 'c', 'level'),
    'torus': ('R', 'r', 'nu', 'nv', 'embed'),
    'dumbbell': ('neck_ratio', 'level'),
}

GENERATOR_REQUIRED = {
    'icosphere': (),
    'ellipsoid': ('a', 'b', 'c', 'level'),
    'torus': ('R', 'r'),
    'dumbbell': ('neck_ratio', 'level'),
}


def allowed_params():
    names = []
    for params in GENERATOR_PARAMS.values():
        names.extend(p for p in params if p not in names)
    return names


def _form_errors(form: forms.Form) -> dict:
    return {key: [str(e) for e in errors] for key, errors in form.errors.items()}


def _raise_form(section: str, form: forms.Form):
    errors = _form_errors(form)
    detail = '; '.join(f"{key}: {' '.join(msgs)}" for key, msgs in errors.items())
    raise ConfigError(f"[{section}] inválida: {detail}", errors)


class MeshSourceForm(forms.Form):
    """Sección [mesh]: una ruta o un generador con sus parámetros"""
    path = forms.CharField(required=False)
    generator = forms.ChoiceField(
        required=False, choices=[('', '')] + [(name, name) for name in GENERATORS]
    )
    radius = forms.FloatField(required=False)
    level = forms.IntegerField(required=False, min_value=0)
    ambient_dim = forms.IntegerField(required=False, min_value=3)
    a = forms.FloatField(required=False)
    b = forms.FloatField(required=False)
    c = forms.FloatField(required=False)
    R = forms.FloatField(required=False)
    r = forms.FloatField(required=False)
    nu = forms.IntegerField(required=False, min_value=3)
    nv = forms.IntegerField(required=False, min_value=3)
    embed = forms.ChoiceField(
        required=False, choices=[('', '')] + [(name, name) for name in TORUS_EMBEDDINGS]
    )
    neck_ratio = forms.FloatField(required=False)

    def clean(self):
        data = super().clean()
        path, generator = data.get('path'), data.get('generator')
        if bool(path) == bool(generator):
            raise forms.ValidationError("Indique exactamente uno de 'path' o 'generator'")
        if generator:
            allowed = GENERATOR_PARAMS[generator]
            extra = [k for k in allowed_params() if k not in allowed and data.get(k) not in (None, '')]
            if extra:
                raise forms.ValidationError(f"Parámetros no válidos para {generator}: {', '.join(extra)}")
            missing = [k for k in GENERATOR_REQUIRED[generator] if data.get(k) is None]
            if missing:
                raise forms.ValidationError(f"Faltan parámetros de {generator}: {', '.join(missing)}")
        return data


@dataclass(frozen=True)
class MeshSource:
    """Origen de la malla inicial"""
    path: Optional[str] = None
    generator: Optional[str] = None
    params: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, data: dict, base_dir: Optional[Path] = None) -> 'MeshSource':
        form = MeshSourceForm(data=dict(data))
        if not form.is_valid():
            _raise_form('mesh', form)
        cleaned = form.cleaned_data

        if cleaned['path']:
            path = Path(cleaned['path']).expanduser()
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return cls(path=str(path))

        generator = cleaned['generator']
        params = {
            k: cleaned[k] for k in GENERATOR_PARAMS[generator]
            if cleaned.get(k) not in (None, '')
        }
        return cls(generator=generator, params=params)

    def build(self) -> ImmersedMesh:
        """Genera o lee la malla (OSError si la ruta no existe)"""
        if self.path:
            return load_mesh(self.path)
        try:
            return GENERATORS[self.generator](**self.params)
        except TypeError as exc:
            raise ConfigError(f"parámetros inválidos para {self.generator}: {exc}") from exc

    def describe(self) -> str:
        if self.path:
            return self.path
        args = ','.join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.generator}:{args}" if args else self.generator

    def as_section(self) -> dict:
        if self.path:
            return {'path': self.path}
        section = {'generator': self.generator}
        section.update({k: repr(v) if isinstance(v, float) else str(v) for k, v in self.params.items()})
        return section


def parse_mesh_spec(text: str, base_dir: Optional[Path] = None) -> MeshSource:
    """
    'icosphere:radius=1,level=4' o 'torus' -> generador; cualquier otra
    cosa se toma como ruta de archivo.
    """
    name, _, args = text.partition(':')
    if name not in GENERATORS:
        return MeshSource.from_mapping({'path': text}, base_dir)

    data = {'generator': name}
    for item in filter(None, (part.strip() for part in args.split(','))):
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError(f"parámetro sin valor en '{text}': {item}")
        data[key.strip()] = value.strip()
    unknown = set(data) - {'generator'} - set(allowed_params())
    if unknown:
        raise ConfigError(f"parámetros desconocidos: {', '.join(sorted(unknown))}")
    return MeshSource.from_mapping(data, base_dir)


# ==============================================================================
# FLUJO Y CONSTANTES
# ==============================================================================

class FlowConfigForm(forms.Form):
    family = forms.ChoiceField(required=False, choices=FlowFamily.choices)
    integrator = forms.ChoiceField(required=False, choices=Integrator.choices)
    tau_scale = forms.FloatField(required=False)
    tau_max = forms.FloatField(required=False)
    rebuild_every = forms.IntegerField(required=False, min_value=1)
    max_steps = forms.IntegerField(required=False, min_value=0)
    stop_area_fraction = forms.FloatField(required=False)
    stop_max_A_h = forms.FloatField(required=False)
    stop_h_ratio = forms.FloatField(required=False)
    diag_every = forms.IntegerField(required=False, min_value=1)
    track_concentration = forms.NullBooleanField(required=False)
    solver_maxiter = forms.IntegerField(required=False, min_value=1)

    def clean_stop_area_fraction(self):
        value = self.cleaned_data.get('stop_area_fraction')
        if value is not None and not 0.0 < value < 1.0:
            raise forms.ValidationError("Debe estar en (0, 1)")
        return value

    def clean(self):
        data = super().clean()
        if (data.get('integrator') or Integrator.CF_SEMIIMPLICIT) == Integrator.CF_SEMIIMPLICIT \
                and (data.get('family') or FlowFamily.CHEN) != FlowFamily.CHEN:
            raise forms.ValidationError("cf_semiimplicit solo integra la familia chen")
        return data


class ConstantsForm(forms.Form):
    n = forms.IntegerField(required=False, min_value=2, max_value=2)
    eps1 = forms.FloatField(required=False)
    eps2 = forms.FloatField(required=False)
    c_lifespan = forms.FloatField(required=False)


def _clean_section(form_class, section: str, data: dict, target):
    unknown = set(data) - set(form_class.base_fields)
    if unknown:
        raise ConfigError(f"[{section}] claves desconocidas: {', '.join(sorted(unknown))}")
    form = form_class(data=dict(data))
    if not form.is_valid():
        _raise_form(section, form)
    values = {k: v for k, v in form.cleaned_data.items() if v not in (None, '')}
    try:
        return target(**values)
    except InvalidParameters as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _ini_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ==============================================================================
# CONFIGURACIÓN COMPLETA
# ==============================================================================

@dataclass(frozen=True)
class RunConfig:
    mesh: MeshSource
    flow: FlowConfig = field(default_factory=FlowConfig)
    constants: Constants = field(default_factory=Constants)

    @classmethod
    def from_ini_text(cls, text: str, base_dir: Optional[Path] = None) -> 'RunConfig':
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # R y r son claves distintas
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"INI mal formado: {exc}") from exc

        unknown = set(parser.sections()) - {'mesh', 'flow', 'constants'}
        if unknown:
            raise ConfigError(f"secciones desconocidas: {', '.join(sorted(unknown))}")
        if not parser.has_section('mesh'):
            raise ConfigError("falta la sección [mesh]")

        section = lambda name: dict(parser[name]) if parser.has_section(name) else {}
        return cls(
            mesh=MeshSource.from_mapping(section('mesh'), base_dir),
            flow=_clean_section(FlowConfigForm, 'flow', section('flow'), FlowConfig),
            constants=_clean_section(ConstantsForm, 'constants', section('constants'), Constants),
        )

    def to_ini_text(self) -> str:
        """Eco completo; from_ini_text(to_ini_text()) devuelve una configuración igual"""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser['mesh'] = self.mesh.as_section()
        parser['flow'] = {k: _ini_value(v) for k, v in self.flow.as_dict().items()}
        parser['constants'] = {
            k: _ini_value(getattr(self.constants, k)) for k in ConstantsForm.base_fields
        }
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()


def load_run_config(path) -> RunConfig:
    """Lee un INI; las rutas relativas de malla se resuelven junto al archivo"""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f"no se pudo leer {path}: {exc}") from exc
    config = RunConfig.from_ini_text(text, base_dir=path.resolve().parent)
    logger.info(f"Configuración cargada de {path}: malla {config.mesh.describe()}")
    return config
