"""Core numeric components: tensors, network, simulation, patches, training and evaluation"""

from .errors import ConfigError, DataError, DivergenceError, NowcastError, ShapeError
from .tensor import Graph, GradientSet, ParameterSet, Workspace
from .net import ModelConfig, NowcastModel, build_model
from .storm_sim import MosaicSequence, SimConfig
from .patches import NormStats, PatchDataset, PipelineConfig
from .trainer import Trainer, TrainConfig, lr_at

__all__ = [
    'ConfigError',
    'DataError',
    'DivergenceError',
    'NowcastError',
    'ShapeError',
    'Graph',
    'GradientSet',
    'ParameterSet',
    'Workspace',
    'ModelConfig',
    'NowcastModel',
    'build_model',
    'MosaicSequence',
    'SimConfig',
    'NormStats',
    'PatchDataset',
    'PipelineConfig',
    'Trainer',
    'TrainConfig',
    'lr_at',
]
