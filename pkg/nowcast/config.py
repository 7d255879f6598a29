"""
Run configuration for nowcast
Flat `section.key = value` files, environment overrides and command-line flags
"""

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union, get_args, get_origin

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .core.bench import DEFAULT_BATCH_SIZES
from .core.errors import ConfigError
from .core.evaluation import HistMatchConfig
from .core.net import ModelConfig, infer_shapes, model_preset
from .core.patches import DATASET_PRESETS, PipelineConfig
from .core.storm_sim import SimConfig
from .core.trainer import TrainConfig
from .utils import atomic_write_text, config_digest

logger = logging.getLogger(__name__)

ENV_VARS = {
    'NOWCAST_SEED': 'seed',
    'NOWCAST_WORKERS': 'workers',
    'NOWCAST_OUT_DIR': 'out_dir',
}

_SIM = SimConfig()
_PIPELINE = PipelineConfig()
_TRAIN = TrainConfig()


@dataclass(frozen=True)
class Setting:
    """One `key = value` assignment and where it came from"""

    key: str
    value: str
    origin: str = 'default'
    line: Optional[int] = None


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    @model_validator(mode='before')
    @classmethod
    def _from_text(cls, data: Any) -> Any:
        """Comma-separated lists and 'none' for optional keys"""
        if not isinstance(data, dict):
            return data
        values = dict(data)
        for name, value in data.items():
            info = cls.model_fields.get(name)
            if info is None or not isinstance(value, str):
                continue
            args = get_args(info.annotation)
            if type(None) in args and value.strip().lower() in ('', 'none'):
                values[name] = None
            elif get_origin(info.annotation) in (tuple, list) or any(get_origin(a) in (tuple, list) for a in args):
                values[name] = [part.strip() for part in value.split(',') if part.strip()]
        return values


class GlobalSection(_Section):
    seed: int = Field(0, ge=0, description="master seed for simulation, sampling, init and shuffling")
    out_dir: str = Field('runs', description="parent directory of per-run output directories")
    workers: int = Field(1, ge=1, description="data-parallel workers (also threads for simulation/inference)")


class SimSection(_Section):
    grid_hw: Tuple[int, int] = Field(_SIM.grid_hw, description="mosaic height, width (1 km pixels)")
    frame_count: int = Field(_SIM.frame_count, ge=0, description="frames per simulated sequence (10 min apart)")
    cell_count: int = Field(_SIM.cell_count, ge=0, description="storm cells per sequence (preset-dependent)")
    amplitude_range: Tuple[float, float] = Field(_SIM.amplitude_range, description="peak VIL range, kg/m^2")
    radius_range_km: Tuple[float, float] = Field(_SIM.radius_range_km, description="cell radius range")
    velocity_range_km: Tuple[float, float] = Field(_SIM.velocity_range_km, description="km per frame, per axis")
    growth_range: Tuple[float, float] = Field(_SIM.growth_range, description="log-amplitude change per frame")
    vmax: float = Field(_SIM.vmax, gt=0, description="VIL mapped to digital level 255")
    site_spacing_px: int = Field(_SIM.site_spacing_px, ge=1, description="radar site lattice spacing")
    radar_range_px: int = Field(_SIM.radar_range_px, ge=0, description="radar coverage radius")
    start_minutes: int = Field(_SIM.start_minutes, description="timestamp of the first frame")


class PipelineSection(_Section):
    preset: Literal['small', 'large'] = Field(_PIPELINE.preset, description="dataset size preset (small, large)")
    patch_px: int = Field(_PIPELINE.patch_px, ge=1, description="square patch extent in pixels")
    train_samples: int = Field(_PIPELINE.train_samples, ge=1, description="training patches (preset-dependent)")
    test_samples: int = Field(_PIPELINE.test_samples, ge=1, description="held-out patches (preset-dependent)")
    centers_per_window: int = Field(_PIPELINE.centers_per_window, ge=1, description="patches cut per time window")
    w_floor: float = Field(_PIPELINE.w_floor, ge=0, description="sampling weight floor added to VIL")
    val_fraction: float = Field(_PIPELINE.val_fraction, gt=0, le=1,
                                description="share of the test set each worker validates on")


class ModelSection(_Section):
    preset: Literal['tiny', 'canonical'] = Field('tiny', description="network layout (tiny, canonical)")
    loss_crop_km: int = Field(48, ge=1, description="central window scored by the loss")


class TrainSection(_Section):
    batch_size: int = Field(_TRAIN.batch_size, ge=1, description="per-worker batch size n")
    eta: float = Field(_TRAIN.eta, gt=0, description="single-worker learning rate")
    warmup_epochs: int = Field(_TRAIN.warmup_epochs, ge=0, description="epochs of linear learning-rate warmup")
    epochs: int = Field(_TRAIN.epochs, ge=0, description="training epochs")
    lr_policy: Literal['scale_up', 'scale_down', 'none'] = Field(
        _TRAIN.lr_policy.value, description="learning-rate scaling with workers (scale_up, scale_down, none)")
    shuffle: bool = Field(_TRAIN.shuffle, description="reshuffle each worker's shard every epoch")
    momentum: float = Field(_TRAIN.momentum, ge=0, lt=1, description="SGD momentum (0 disables)")
    max_steps: Optional[int] = Field(_TRAIN.max_steps, ge=0, description="cap on optimizer steps (none = unlimited)")
    precision: int = Field(_TRAIN.precision, description="float width, 32 or 64")
    audit_replicas: bool = Field(_TRAIN.audit_replicas, description="hash every replica after each step")


class EvalSection(_Section):
    batch_size: int = Field(16, ge=1, description="patches per forward pass during evaluation")
    hist_tile_px: int = Field(64, ge=8, description="tile size for local histogram matching")
    hist_bins: int = Field(256, ge=16, description="histogram bins for matching")
    infer_tile_px: Optional[int] = Field(None, ge=1, description="input tile size for grid inference (none = one pass)")
    worker_counts: Tuple[int, ...] = Field((1, 2, 4), description="worker counts for bench-scaling")
    batch_sizes: Tuple[int, ...] = Field(DEFAULT_BATCH_SIZES, description="per-worker batch sizes for bench-batch")


SECTIONS: Dict[str, type] = {
    'sim': SimSection,
    'pipeline': PipelineSection,
    'model': ModelSection,
    'train': TrainSection,
    'eval': EvalSection,
}


def _format_value(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ', '.join(_format_value(v) for v in value)
    return str(value)


def parse_config_text(text: str, origin: str = '<config>') -> List[Setting]:
    """Parse `section.key = value` lines; `#` starts a comment"""
    settings = []
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", number)
        settings.append(Setting(key.strip(), value.strip(), origin, number))
    return settings


def parse_override(text: str) -> Setting:
    """A `--set section.key=value` flag"""
    key, sep, value = text.partition('=')
    if not sep or not key.strip():
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    return Setting(key.strip(), value.strip(), '--set')


def env_settings() -> List[Setting]:
    """Overrides from NOWCAST_* variables, after loading a .env file if one exists"""
    load_dotenv(find_dotenv(usecwd=True))
    return [Setting(key, os.environ[var], var) for var, key in ENV_VARS.items() if os.getenv(var)]


def _validation_error(error: ValidationError, section: str, where: Dict[str, Setting]) -> ConfigError:
    first = error.errors()[0]
    name = str(first['loc'][0]) if first['loc'] else ''
    key = f"{section}.{name}" if section else name
    if first['type'] == 'extra_forbidden':
        message = f"unknown key '{key}'"
    else:
        message = f"{key}: {first['msg']}"
    setting = where.get(key)
    if setting is None:
        return ConfigError(message)
    if setting.line is None:
        return ConfigError(f"{message} (from {setting.origin})")
    return ConfigError(message, setting.line)


@dataclass
class RunConfig:
    """Resolved settings for one nowcast command"""

    seed: int = 0
    out_dir: str = 'runs'
    workers: int = 1
    sim: SimSection = field(default_factory=SimSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_settings(cls, settings: Sequence[Setting]) -> 'RunConfig':
        """
        Validate a list of assignments; later assignments win

        Keys listed by the chosen dataset preset take the preset's value
        unless they were assigned explicitly.
        """
        grouped: Dict[str, Dict[str, Any]] = {'': {}, **{name: {} for name in SECTIONS}}
        where: Dict[str, Setting] = {}
        for setting in settings:
            section, _, name = setting.key.rpartition('.')
            if section not in grouped:
                raise ConfigError(f"unknown section '{section}' in key '{setting.key}'", setting.line)
            grouped[section][name] = setting.value
            where[setting.key] = setting

        preset = str(grouped['pipeline'].get('preset', _PIPELINE.preset)).strip()
        for key, value in DATASET_PRESETS.get(preset, {}).items():
            if key not in where:
                section, _, name = key.partition('.')
                grouped[section][name] = value

        sections = {}
        for section, values in grouped.items():
            model = SECTIONS.get(section, GlobalSection)
            try:
                sections[section] = model.model_validate(values)
            except ValidationError as e:
                raise _validation_error(e, section, where) from None

        top = sections.pop('')
        config = cls(seed=top.seed, out_dir=top.out_dir, workers=top.workers, **sections)
        config.check()
        return config

    @classmethod
    def from_file(cls, config_file: Union[str, Path]) -> 'RunConfig':
        """Load a config file on top of the defaults"""
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_settings(parse_config_text(path.read_text(), str(path)))

    @classmethod
    def from_env(cls) -> 'RunConfig':
        """Defaults plus NOWCAST_* environment overrides"""
        return cls.from_settings(env_settings())

    @classmethod
    def load(cls, config_file: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
             seed: Optional[int] = None, workers: Optional[int] = None,
             out_dir: Optional[str] = None) -> 'RunConfig':
        """
        Resolve defaults < config file < environment < flags

        Args:
            config_file: optional flat config file
            overrides: `section.key=value` strings from repeated --set flags
            seed, workers, out_dir: dedicated flags, None when not given

        Returns:
            Validated RunConfig
        """
        settings: List[Setting] = []
        if config_file is not None:
            path = Path(config_file)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            settings.extend(parse_config_text(path.read_text(), str(path)))
        settings.extend(env_settings())
        settings.extend(parse_override(text) for text in overrides)
        for key, flag, value in (('seed', '--seed', seed), ('workers', '--workers', workers),
                                 ('out_dir', '--out', out_dir)):
            if value is not None:
                settings.append(Setting(key, str(value), flag))
        config = cls.from_settings(settings)
        logger.debug(f"Resolved configuration from {len(settings)} setting(s)")
        return config

    def check(self):
        """Build every module config so cross-field problems surface before any work starts"""
        self.sim_config()
        pipeline = self.pipeline_config()
        self.train_config()
        self.hist_config()
        infer_shapes(self.model_config(), (pipeline.patch_px, pipeline.patch_px))

    def sim_config(self) -> SimConfig:
        return SimConfig(seed=self.seed, **self.sim.model_dump())

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(**self.pipeline.model_dump())

    def model_config(self) -> ModelConfig:
        return replace(model_preset(self.model.preset), loss_crop_km=self.model.loss_crop_km)

    def train_config(self, **overrides) -> TrainConfig:
        settings = dict(self.train.model_dump(), workers=self.workers, seed=self.seed,
                        val_fraction=self.pipeline.val_fraction)
        settings.update(overrides)
        return TrainConfig(**settings)

    def hist_config(self) -> HistMatchConfig:
        return HistMatchConfig(self.eval.hist_tile_px, self.eval.hist_bins)

    def as_dict(self) -> Dict[str, Any]:
        values = {'seed': self.seed, 'out_dir': self.out_dir, 'workers': self.workers}
        for name in SECTIONS:
            values[name] = getattr(self, name).model_dump()
        return values

    def digest(self) -> int:
        """Hash of everything that can change numeric results"""
        values = self.as_dict()
        values.pop('out_dir')
        return config_digest(values)

    def to_text(self) -> str:
        lines = ["# nowcast resolved configuration", ""]
        values = self.as_dict()
        for key in ('seed', 'out_dir', 'workers'):
            lines.append(f"{key} = {_format_value(values[key])}")
        for section in SECTIONS:
            lines.append("")
            for name, value in values[section].items():
                lines.append(f"{section}.{name} = {_format_value(value)}")
        return '\n'.join(lines) + '\n'

    def to_file(self, config_file: Union[str, Path]):
        """Save the resolved config in the same flat format it is read from"""
        atomic_write_text(config_file, self.to_text())


def describe_keys() -> List[Tuple[str, str, str]]:
    """(key, default, description) for every configuration key"""
    rows = []
    for section, model in (('', GlobalSection), *SECTIONS.items()):
        for name, info in model.model_fields.items():
            key = f"{section}.{name}" if section else name
            rows.append((key, _format_value(info.default), info.description or ''))
    return rows
