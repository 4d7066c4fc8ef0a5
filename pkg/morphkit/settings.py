'''
Pipeline configuration: one JSON file, one section per stage, validated with pydantic.
'''
import pathlib
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError, MissingInputError
from . import reference, utilities


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class SynthSettings(_Section):
    n_subjects: int = Field(5, ge=2)
    n_expressions: int = Field(3, ge=1, le=len(reference.EXPRESSIONS))
    subdivision: int = Field(3, ge=2, le=6)
    n_jawline: int = Field(reference.DEFAULT_JAWLINE_COUNT, ge=1)
    n_modes: int = Field(6, ge=0, le=6)
    noise: float = Field(0.0, ge=0)
    dropout: float = Field(0.0, ge=0, lt=1)


class FusionSettings(_Section):
    merge_epsilon: float = Field(1e-3, gt=0)
    icp_max_iterations: int = Field(50, ge=1)
    icp_metric: Literal['point_to_point', 'point_to_plane'] = 'point_to_point'
    reject_distance: Union[Literal['auto'], float, None] = 'auto'
    allow_missing_view: bool = False
    local_k: int = Field(12, ge=3)
    min_neighbors: int = Field(1, ge=0)


class RegistrationSettings(_Section):
    stiffness_radius: Optional[float] = Field(None, gt=0)
    schedule: List[float] = [8.0, 4.0, 2.0, 1.0]
    max_inner_iterations: int = Field(10, ge=1)
    lambda_overrides: Dict[str, float] = {}

    @field_validator('schedule')
    @classmethod
    def _positive_schedule(cls, v):
        if not v or any(m <= 0 for m in v):
            raise ValueError('schedule must be a non-empty list of positive multipliers')
        return v

    @field_validator('lambda_overrides')
    @classmethod
    def _known_parts(cls, v):
        unknown = sorted(set(v) - set(reference.FACE_PARTS))
        if unknown:
            raise ValueError(f'unknown face parts {unknown}; known: {list(reference.FACE_PARTS)}')
        if any(lam < 0 for lam in v.values()):
            raise ValueError('stiffness weights must be non-negative')
        return v


class ModelSettings(_Section):
    shape_variance: float = Field(0.99, gt=0, le=1)
    shape_components: int = Field(199, ge=1)
    expression_variance: float = Field(0.99, gt=0, le=1)
    expression_components: int = Field(99, ge=1)
    align_to_template: bool = True


class FitSettings(_Section):
    shape_regularization: float = Field(1e-3, ge=0)
    expression_regularization: float = Field(1e-3, ge=0)
    icp_rounds: int = Field(10, ge=0)


class EvaluateSettings(_Section):
    radii: List[float] = [0.6, 0.7, 0.8, 0.9, 1.0]
    alignment: Literal['similarity', 'rigid'] = 'similarity'
    nme_mode: Literal['3d', '2d'] = '3d'
    bbox_size: Optional[float] = Field(None, gt=0)

    @field_validator('radii')
    @classmethod
    def _increasing(cls, v):
        if not v or any(r <= 0 for r in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError('crop radii must be positive and strictly increasing')
        return v


class CustomSettings(_Section):
    remesh_command: Optional[str] = None
    format: Literal['obj', 'ply'] = 'obj'


class PipelineConfig(_Section):
    loglevel: Literal['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'] = 'INFO'
    seed: int = Field(0, ge=0)
    synth: SynthSettings = SynthSettings()
    fusion: FusionSettings = FusionSettings()
    registration: RegistrationSettings = RegistrationSettings()
    model: ModelSettings = ModelSettings()
    fit: FitSettings = FitSettings()
    evaluate: EvaluateSettings = EvaluateSettings()
    custom: CustomSettings = CustomSettings()


def _validate(data):
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        problems = '; '.join(f'{".".join(str(x) for x in err["loc"])}: {err["msg"]}' for err in e.errors())
        raise ConfigError(f'Invalid configuration: {problems}')


def load_config(path=None):
    '''PipelineConfig from a JSON file; no path means every default'''
    if path is None:
        return PipelineConfig()
    path = pathlib.Path(path)
    if not path.is_file():
        raise MissingInputError(path)
    try:
        data = utilities.read_json(path)
    except ValueError as e:
        raise ConfigError(f'Cannot parse {path}: {e}')
    if not isinstance(data, dict):
        raise ConfigError(f'{path} must hold a JSON object')
    return _validate(data)


def with_overrides(config, seed=None, radii=None, lambda_overrides=None, format=None):
    '''Command-line flags on top of the file values, validated again'''
    data = config.model_dump()
    if seed is not None:
        data['seed'] = seed
    if radii is not None:
        data['evaluate']['radii'] = list(radii)
    if lambda_overrides:
        data['registration']['lambda_overrides'] = {**data['registration']['lambda_overrides'], **lambda_overrides}
    if format is not None:
        data['custom']['format'] = format
    return _validate(data)
