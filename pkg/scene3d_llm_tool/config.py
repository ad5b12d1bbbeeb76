#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
Run configuration: one YAML (or JSON) file with a section per module. Every key is optional and falls
back to the module default; unknown sections or keys are errors.
"""

import dataclasses
from dataclasses import dataclass, field
from logging import getLogger

import yaml

from .geometry import Aabb
from .localize import PosEmbedConfig, LocTokenConfig, DEFAULT_BINS, DEFAULT_BASE_VOCAB
from .voxfield import TrainConfig, RaySampleConfig


logger = getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RenderSection:
    n_objects: int = 3
    bounds: tuple = (-2.0, -2.0, -2.0, 2.0, 2.0, 2.0)
    n_views: int = 8
    width: int = 128
    height: int = 128
    fov_deg: float = 60.0
    radius: float = 6.0
    elevation: float = 0.3
    feature_dim: int = 32

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ValueError('render.feature_dim must be at least 2, got %r' % (self.feature_dim,))

    @property
    def scene_bounds(self):
        return Aabb.from_list(list(self.bounds))


@dataclass(frozen=True)
class FusionSection:
    voxel_size: float = 0.1
    grid_resolution: int = 16       # vertices per axis of the neural field grid
    workers: int = 1


@dataclass(frozen=True)
class ResamplerSection:
    n_latents: int = 32
    d_model: int = 64
    n_layers: int = 2
    seed: int = 0


@dataclass(frozen=True)
class PipelineSection:
    task: str = 'qa'
    pipeline: str = 'box'
    demos: tuple = ()           # paths of demonstration files, at most 3
    max_rounds: int = 6
    workers: int = 1
    template_dir: str = None


@dataclass(frozen=True)
class NavSection:
    policy: str = 'oracle'
    max_steps: int = 200
    success_radius: float = 1.0
    observe_radius: int = 3


@dataclass(frozen=True)
class LocTokenSection:
    bins: int = DEFAULT_BINS
    base_vocab: int = DEFAULT_BASE_VOCAB
    scene_bounds: tuple = None


@dataclass(frozen=True)
class PosEmbedSection:
    d_v: int = None
    scale_min: float = 0.1
    scale_max: float = 100.0
    combine: str = 'add'


_SECTIONS = dict(
    pos_embed=PosEmbedSection,
    loc_tokens=LocTokenSection,
    train=TrainConfig,
    ray_sample=RaySampleConfig,
    resampler=ResamplerSection,
    pipeline=PipelineSection,
    fusion=FusionSection,
    nav=NavSection,
    render=RenderSection,
)


def _build(name, cls, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError('Section %r must be a mapping, got %r' % (name, type(values).__name__))
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError('Unknown key(s) in section %r: %s' % (name, ', '.join(unknown)))
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    try:
        coerced = {}
        for k, v in values.items():
            if isinstance(v, list):
                v = tuple(v)
            elif isinstance(v, str) and types[k] is float:
                v = float(v)        # YAML reads exponents without a dot (1e-5) as strings
            coerced[k] = v
        return cls(**coerced)
    except (TypeError, ValueError) as ex:
        raise ConfigError('Invalid section %r: %s' % (name, ex))


@dataclass(frozen=True)
class RunConfig:
    pos_embed: PosEmbedSection = field(default_factory=PosEmbedSection)
    loc_tokens: LocTokenSection = field(default_factory=LocTokenSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    ray_sample: RaySampleConfig = field(default_factory=RaySampleConfig)
    resampler: ResamplerSection = field(default_factory=ResamplerSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    nav: NavSection = field(default_factory=NavSection)
    render: RenderSection = field(default_factory=RenderSection)

    @staticmethod
    def from_dict(d):
        if d is None:
            d = {}
        if not isinstance(d, dict):
            raise ConfigError('Config root must be a mapping')
        unknown = sorted(set(d) - set(_SECTIONS))
        if unknown:
            raise ConfigError('Unknown config section(s): %s' % ', '.join(unknown))
        return RunConfig(**{name: _build(name, cls, d.get(name)) for name, cls in _SECTIONS.items()})

    @staticmethod
    def from_text(text):
        try:
            return RunConfig.from_dict(yaml.safe_load(text))
        except yaml.YAMLError as ex:
            raise ConfigError('Config is not valid YAML/JSON: %s' % ex)

    @staticmethod
    def load(path):
        if path is None:
            return RunConfig()
        with open(path, 'r', encoding='utf-8') as f:
            cfg = RunConfig.from_text(f.read())
        logger.info('Loaded config %r', path)
        return cfg

    def with_overrides(self, section, **values):
        """Copy with some keys of one section replaced; None values leave the config untouched."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = dataclasses.asdict(getattr(self, section))
        current.update(values)
        return dataclasses.replace(self, **{section: _build(section, _SECTIONS[section], current)})

    def pos_embed_config(self, d_v):
        s = self.pos_embed
        if s.d_v is not None and s.d_v != d_v:
            raise ConfigError('Config expects %d-dim features, got %d' % (s.d_v, d_v))
        return PosEmbedConfig(d_v=d_v, scale_min=s.scale_min, scale_max=s.scale_max, combine=s.combine)

    def loc_token_config(self, scene_bounds=None):
        s = self.loc_tokens
        bounds = Aabb.from_list(list(s.scene_bounds)) if s.scene_bounds is not None else scene_bounds
        if bounds is None:
            bounds = self.render.scene_bounds
        return LocTokenConfig(scene_bounds=bounds, bins=s.bins, base_vocab=s.base_vocab)
