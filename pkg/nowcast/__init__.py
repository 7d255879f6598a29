"""
nowcast - Precipitation nowcasting with a multiscale CNN
Synthetic radar mosaics, synchronous data-parallel training and forecast evaluation on CPU cores
"""

__version__ = "0.1.0"
__author__ = "nowcast Team"

from .core.net import ModelConfig, NowcastModel, build_model, canonical_config, tiny_config
from .core.patches import NormStats, PatchDataset, PipelineConfig, generate_datasets
from .core.storm_sim import MosaicSequence, SimConfig, gen_mosaic_sequence
from .core.trainer import Trainer, TrainConfig, TrainingReport, train
from .core.evaluation import HistMatchConfig, evaluate_forecasts, histogram_match_local, infer_grid
from .core.bench import benchmark_scaling, batch_size_sweep, speedup_table

__all__ = [
    'ModelConfig',
    'NowcastModel',
    'build_model',
    'canonical_config',
    'tiny_config',
    'NormStats',
    'PatchDataset',
    'PipelineConfig',
    'generate_datasets',
    'MosaicSequence',
    'SimConfig',
    'gen_mosaic_sequence',
    'Trainer',
    'TrainConfig',
    'TrainingReport',
    'train',
    'HistMatchConfig',
    'evaluate_forecasts',
    'histogram_match_local',
    'infer_grid',
    'benchmark_scaling',
    'batch_size_sweep',
    'speedup_table',
]
