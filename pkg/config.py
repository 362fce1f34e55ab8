"""Experiment configuration.

A config file is flat ``key = value`` text with ``#`` comments. Keys are the
field names of ``ExperimentConfig`` and ``TrainConfig``; ``seed`` feeds both.
Command-line flags are applied on top of the file and win.
"""
from __future__ import annotations

from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from datagen import NoiseKind, NoiseSpec
from emtrain import Curriculum, TrainConfig
from logger import log_path, setup_logger

config_logger = setup_logger('config', log_path('config'))

SHARED_KEYS = ('seed',)
_NONE_WORDS = ('', 'none', 'null')


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f'invalid value for {field}: {message}')
        self.field = field


class DatasetSource(str, Enum):
    BLOBS = 'blobs'
    FILE = 'file'


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    source: DatasetSource = Field(DatasetSource.BLOBS, description='Generate Gaussian blobs or load a dataset file')
    dataset_path: Optional[str] = Field(None, description='NLDS file, required when source is "file"')
    n: int = Field(4000, ge=2, description='Number of samples before the train/test split')
    num_classes: int = Field(4, ge=2, le=0xFFFF)
    d: int = Field(2, ge=2, description='Feature dimension')
    separation: float = Field(3.0, gt=0, description='Radius of the circle the class means sit on')
    noise_kind: NoiseKind = NoiseKind.IDN
    noise_rate: float = Field(0.4, ge=0, lt=1)
    noise_std: float = Field(0.1, ge=0, description='Spread of per-sample flip rates for IDN')
    test_fraction: float = Field(0.2, gt=0, lt=1)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    out_dir: str = Field('runs/default', min_length=1)
    record_wall_time: bool = Field(True, description='Write 0.0 as wall_time_s when false')
    train: TrainConfig = Field(default_factory=TrainConfig)

    @model_validator(mode='after')
    def _one_dataset_source(self):
        if self.source is DatasetSource.FILE and not self.dataset_path:
            raise ValueError('dataset_path is required when source is "file"')
        if self.source is DatasetSource.BLOBS and self.dataset_path:
            raise ValueError('dataset_path given but source is "blobs"')
        if self.n < self.num_classes:
            raise ValueError(f'n={self.n} cannot cover {self.num_classes} classes')
        return self

    @property
    def noise(self):
        return NoiseSpec(self.noise_kind, self.noise_rate, self.noise_std)

    def echo(self):
        """Full config as JSON-ready values, in declaration order."""
        return self.model_dump(mode='json')


EXPERIMENT_KEYS = tuple(k for k in ExperimentConfig.model_fields if k != 'train')
TRAIN_KEYS = tuple(k for k in TrainConfig.model_fields if k not in SHARED_KEYS)


def read_config_file(path):
    """Parse ``key = value`` lines into a dict of raw strings."""
    values = {}
    try:
        with open(path, encoding='utf-8') as fh:
            lines = fh.readlines()
    except OSError as e:
        config_logger.error(f'Error reading config {path}: {e}')
        raise
    for number, line in enumerate(lines, start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise ConfigError(f'{path}:{number}', f'expected "key = value", got {line!r}')
        values[key.strip()] = value.strip()
    config_logger.info(f'Read {len(values)} keys from {path}')
    return values


def _normalize(value):
    if isinstance(value, str) and value.strip().lower() in _NONE_WORDS:
        return None
    return value


def _route(values):
    experiment, train = {}, {}
    for key, value in values.items():
        if key in SHARED_KEYS:
            experiment[key] = train[key] = value
        elif key in EXPERIMENT_KEYS:
            experiment[key] = value
        elif key in TRAIN_KEYS:
            train[key] = value
        else:
            raise ConfigError(key, 'unknown configuration key')
    return experiment, train


def _validation_error(e):
    first = e.errors()[0]
    field = '.'.join(str(part) for part in first['loc'] if part != 'train') or 'config'
    return ConfigError(field, first['msg'])


def build_config(values=None, overrides=None):
    """ExperimentConfig from flat key/value pairs; ``overrides`` win over ``values``."""
    merged = {**(values or {}), **(overrides or {})}
    merged = {k: _normalize(v) for k, v in merged.items()}
    merged = {k: v for k, v in merged.items() if v is not None or k in ('fixed_eps', 'coteaching_tau',
                                                                        'dataset_path', 'checkpoint_dir',
                                                                        'dump_splits_dir')}
    experiment, train = _route(merged)
    try:
        config = ExperimentConfig(**experiment, train=TrainConfig(**train))
    except ValidationError as e:
        error = _validation_error(e)
        config_logger.error(str(error))
        raise error from e
    return config


def load_experiment(path=None, overrides=None):
    values = read_config_file(path) if path else {}
    return build_config(values, overrides)


def with_updates(config, **changes):
    """Copy of ``config`` with flat keys replaced and re-validated."""
    values = {k: v for k, v in config.model_dump().items() if k != 'train'}
    values.update({k: v for k, v in config.train.model_dump().items() if k not in SHARED_KEYS})
    values.update(changes)
    return build_config(values)


def ablation_overrides(no_epsilon=False, fixed_eps=None, lam=None):
    """Flat overrides for the ablation arms: no noise-rate curriculum, an oracle fixed rate, a lambda override."""
    overrides = {}
    if no_epsilon:
        overrides.update(curriculum=Curriculum.NONE.value, lam=0.0)
    if fixed_eps is not None:
        overrides.update(curriculum=Curriculum.FIXED.value, fixed_eps=fixed_eps)
    if lam is not None:
        overrides['lam'] = lam
    return overrides
