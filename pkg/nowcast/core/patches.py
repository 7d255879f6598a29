"""
Training-patch pipeline

Turns a mosaic sequence into aligned (X, Y) patch tensors: 13-frame windows
around random times t0, patch centers drawn inside radar coverage with
probability proportional to VIL plus a floor, 7 input frames (t0-60 .. t0)
and 6 target frames (t0+10 .. t0+60). Also holds normalization, the NWC1
dataset container, worker sharding and per-worker validation subsets.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from .container import ContainerReader, ContainerWriter
from .errors import ConfigError, DataError, PayloadMismatch, SamplingError, TruncatedFile, ZeroVariance
from .storm_sim import FRAME_DT_MINUTES, MosaicSequence, SimConfig, coverage_for, gen_mosaic_sequence

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'NWC1'
DATASET_VERSION = 1

INPUT_FRAMES = 7
OUTPUT_FRAMES = 6
WINDOW_FRAMES = INPUT_FRAMES + OUTPUT_FRAMES
CENTER_INDEX = INPUT_FRAMES - 1

# Overrides for the two corpus sizes; explicit settings win over these
DATASET_PRESETS: Dict[str, Dict[str, object]] = {
    'small': {'sim.cell_count': 40, 'pipeline.train_samples': 2048, 'pipeline.test_samples': 512},
    'large': {'sim.cell_count': 100, 'pipeline.train_samples': 5120, 'pipeline.test_samples': 1280},
}


@dataclass(frozen=True)
class PipelineConfig:
    patch_px: int = 70
    train_samples: int = 2048
    test_samples: int = 512
    centers_per_window: int = 8
    w_floor: float = 1.0
    val_fraction: float = 0.3
    preset: str = 'small'

    def __post_init__(self):
        if self.patch_px < 1:
            raise ConfigError(f"patch_px must be positive, got {self.patch_px}")
        if self.train_samples < 1 or self.test_samples < 1:
            raise ConfigError("sample counts must be at least 1")
        if self.centers_per_window < 1:
            raise ConfigError("centers_per_window must be at least 1")
        if self.w_floor < 0:
            raise ConfigError("w_floor must be >= 0")
        if not 0 < self.val_fraction <= 1:
            raise ConfigError(f"val_fraction must be in (0, 1], got {self.val_fraction}")
        if self.preset not in DATASET_PRESETS:
            raise ConfigError(f"unknown dataset preset '{self.preset}'")


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ZeroVariance(f"normalization std must be > 0, got {self.std}")

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


class PatchCenter(NamedTuple):
    x: int
    y: int


@dataclass
class SequenceWindow:
    frames: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        if self.frames.shape[0] != WINDOW_FRAMES or len(self.timestamps) != WINDOW_FRAMES:
            raise DataError(f"a window holds exactly {WINDOW_FRAMES} frames, got {self.frames.shape[0]}")
        if np.any(np.diff(self.timestamps) != FRAME_DT_MINUTES):
            raise DataError(f"window timestamps must step by {FRAME_DT_MINUTES} minutes")

    @property
    def t0(self) -> int:
        return int(self.timestamps[CENTER_INDEX])


@dataclass
class PatchDataset:
    X: np.ndarray
    Y: np.ndarray
    norm: Optional[NormStats] = None

    def __post_init__(self):
        if self.X.ndim != 4 or self.Y.ndim != 4:
            raise DataError(f"X and Y must be [S,P,P,C], got {self.X.shape} and {self.Y.shape}")
        if self.X.shape[:3] != self.Y.shape[:3]:
            raise DataError(f"X {self.X.shape} and Y {self.Y.shape} are not sample-aligned")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def patch_px(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> 'PatchDataset':
        return PatchDataset(self.X[indices], self.Y[indices], self.norm)


# =============================================================================
# Windows and sampling
# =============================================================================

def window_at(sequence: MosaicSequence, t0: int) -> SequenceWindow:
    start = t0 - CENTER_INDEX
    if start < 0 or start + WINDOW_FRAMES > len(sequence):
        raise DataError(f"t0 index {t0} has no full window in a {len(sequence)}-frame sequence")
    return SequenceWindow(sequence.grids[start:start + WINDOW_FRAMES],
                          sequence.timestamps[start:start + WINDOW_FRAMES])


def select_window_times(sequence: MosaicSequence, count: int, rng: np.random.Generator) -> List[int]:
    """Uniformly drawn center indices with six frames on either side (with replacement)"""
    if len(sequence) < WINDOW_FRAMES:
        raise DataError(f"sequence of {len(sequence)} frames is shorter than a {WINDOW_FRAMES}-frame window")
    if count == 0:
        return []
    high = len(sequence) - OUTPUT_FRAMES
    return [int(t) for t in rng.integers(CENTER_INDEX, high, size=count)]


class PatchSampler:
    """
    Weighted patch-center draws for a fixed coverage mask

    Eligible pixels are inside the mask with the whole patch on the grid;
    their weight is VIL + w_floor.
    """

    def __init__(self, mask: np.ndarray, patch_px: int, w_floor: float = 1.0):
        height, width = mask.shape
        half = patch_px // 2
        inside = np.zeros_like(mask, dtype=bool)
        if patch_px <= height and patch_px <= width:
            inside[half:height - patch_px + half + 1, half:width - patch_px + half + 1] = True
        self.shape = mask.shape
        self.patch_px = patch_px
        self.w_floor = w_floor
        self.eligible = np.flatnonzero(mask & inside)

    def weights(self, frame: np.ndarray) -> np.ndarray:
        return frame.reshape(-1)[self.eligible].astype(np.float64) + self.w_floor

    def sample(self, frame: np.ndarray, count: int, rng: np.random.Generator) -> List[PatchCenter]:
        if frame.shape != self.shape:
            raise DataError(f"frame {frame.shape} does not match mask {self.shape}")
        if self.eligible.size == 0:
            raise SamplingError("no pixel is both covered by radar and far enough from the grid edge")
        weights = self.weights(frame)
        if count > np.count_nonzero(weights):
            raise SamplingError(f"cannot draw {count} distinct centers from {np.count_nonzero(weights)} candidates")
        picks = rng.choice(self.eligible.size, size=count, replace=False, p=weights / weights.sum())
        width = self.shape[1]
        return [PatchCenter(int(i % width), int(i // width)) for i in self.eligible[picks]]


def sample_patch_centers(frame: np.ndarray, mask: np.ndarray, count: int, rng: np.random.Generator,
                         patch_px: int, w_floor: float = 1.0) -> List[PatchCenter]:
    return PatchSampler(mask, patch_px, w_floor).sample(frame, count, rng)


def extract_patch_pair(window: SequenceWindow, center: PatchCenter, patch_px: int,
                       dtype=np.float64) -> Tuple[np.ndarray, np.ndarray]:
    """Patch rows/cols [c - P//2, c - P//2 + P); X channels oldest first, Y channels by lead"""
    top, left = center.y - patch_px // 2, center.x - patch_px // 2
    height, width = window.frames.shape[1:]
    if top < 0 or left < 0 or top + patch_px > height or left + patch_px > width:
        raise DataError(f"patch at ({center.x}, {center.y}) leaves the {height}x{width} grid")
    block = window.frames[:, top:top + patch_px, left:left + patch_px]
    stacked = np.moveaxis(block, 0, -1).astype(dtype)
    return stacked[..., :INPUT_FRAMES], stacked[..., INPUT_FRAMES:]


def build_dataset(sequence: MosaicSequence, mask: np.ndarray, count: int, config: PipelineConfig,
                  rng: np.random.Generator, dtype=np.float32, progress: bool = False) -> PatchDataset:
    """Unnormalized dataset of `count` patch pairs"""
    if count < 1:
        raise SamplingError("sample count must be at least 1")
    sampler = PatchSampler(mask, config.patch_px, config.w_floor)
    P = config.patch_px
    X = np.empty((count, P, P, INPUT_FRAMES), dtype=dtype)
    Y = np.empty((count, P, P, OUTPUT_FRAMES), dtype=dtype)
    windows = select_window_times(sequence, math.ceil(count / config.centers_per_window), rng)
    filled = 0
    for t0 in tqdm(windows, desc="Extracting patches", disable=not progress):
        window = window_at(sequence, t0)
        take = min(config.centers_per_window, count - filled)
        for center in sampler.sample(sequence.grids[t0], take, rng):
            X[filled], Y[filled] = extract_patch_pair(window, center, P, dtype)
            filled += 1
    return PatchDataset(X, Y)


# =============================================================================
# Normalization
# =============================================================================

def compute_norm(X: np.ndarray) -> NormStats:
    mean = float(np.mean(X, dtype=np.float64))
    std = float(np.std(X, dtype=np.float64))
    if std == 0:
        raise ZeroVariance("input patches have zero variance")
    return NormStats(mean, std)


def normalize(dataset: PatchDataset, stats: Optional[NormStats] = None) -> PatchDataset:
    """
    Standardize X and Y with one global scalar mean/std

    Stats come from X unless given (e.g. the training stats for a test set).
    """
    stats = stats or compute_norm(dataset.X)
    X = stats.apply(dataset.X).astype(dataset.X.dtype)
    Y = stats.apply(dataset.Y).astype(dataset.Y.dtype)
    return PatchDataset(X, Y, stats)


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.invert(values)


# =============================================================================
# Sharding and validation subsets
# =============================================================================

def shard(sample_count: int, workers: int, rank: int) -> range:
    """Contiguous, balanced slice of [0, S) owned by `rank`"""
    if workers < 1 or not 0 <= rank < workers:
        raise ConfigError(f"rank {rank} is not valid for {workers} workers")
    if workers > sample_count:
        raise DataError(f"cannot split {sample_count} samples across {workers} workers")
    base, extra = divmod(sample_count, workers)
    start = rank * base + min(rank, extra)
    return range(start, start + base + (1 if rank < extra else 0))


def validation_subsample(test_count: int, fraction: float, seed: int, rank: int) -> np.ndarray:
    """Sorted indices of round(fraction * S_test) test samples, independent per rank"""
    if test_count < 1:
        raise DataError("test set is empty")
    if not 0 < fraction <= 1:
        raise ConfigError(f"validation fraction must be in (0, 1], got {fraction}")
    size = max(1, int(math.floor(fraction * test_count + 0.5)))
    rng = np.random.default_rng([seed, rank])
    return np.sort(rng.choice(test_count, size=size, replace=False))


# =============================================================================
# NWC1 dataset container
# =============================================================================

def dataset_to_bytes(dataset: PatchDataset) -> bytes:
    S, P = len(dataset), dataset.patch_px
    # unnormalized datasets carry NaN stats
    mean, std = (dataset.norm.mean, dataset.norm.std) if dataset.norm else (math.nan, math.nan)
    writer = ContainerWriter(DATASET_MAGIC, DATASET_VERSION)
    writer.u64(S).u32(P).u32(dataset.X.shape[-1]).u32(dataset.Y.shape[-1]).f64(mean).f64(std)
    writer.array(dataset.X, '<f4').array(dataset.Y, '<f4')
    return writer.getvalue()


def dataset_from_bytes(data: bytes, source: str = '<bytes>') -> PatchDataset:
    reader = ContainerReader(data, DATASET_MAGIC, (DATASET_VERSION,), source)
    S, P, cin, cout = reader.u64(), reader.u32(), reader.u32(), reader.u32()
    mean, std = reader.f64(), reader.f64()
    expected = S * P * P * (cin + cout) * 4
    if reader.remaining < expected:
        raise TruncatedFile(f"{source}: header declares {S} samples ({expected} bytes), "
                            f"payload has {reader.remaining}")
    if reader.remaining > expected:
        raise PayloadMismatch(f"{source}: {reader.remaining - expected} bytes beyond the declared {S} samples")
    X = reader.array((S, P, P, cin), '<f4').astype(np.float32)
    Y = reader.array((S, P, P, cout), '<f4').astype(np.float32)
    norm = None if math.isnan(mean) else NormStats(mean, std)
    return PatchDataset(X, Y, norm)


def write_dataset(path: Union[str, Path], dataset: PatchDataset):
    from nowcast.utils import atomic_write_bytes

    atomic_write_bytes(path, dataset_to_bytes(dataset))
    logger.info(f"Wrote {len(dataset)} samples to {path}")


def read_dataset(path: Union[str, Path]) -> PatchDataset:
    with open(path, 'rb') as f:
        dataset = dataset_from_bytes(f.read(), str(path))
    logger.info(f"Loaded {len(dataset)} samples from {path}")
    return dataset


# =============================================================================
# End-to-end generation
# =============================================================================

@dataclass
class DatasetBundle:
    train_sequence: MosaicSequence
    test_sequence: MosaicSequence
    mask: np.ndarray
    train: PatchDataset
    test: PatchDataset


def generate_datasets(sim: SimConfig, pipeline: PipelineConfig, workers: int = 1,
                      progress: bool = False, dtype=np.float32) -> DatasetBundle:
    """
    Simulate training and held-out sequences and cut normalized datasets

    The held-out sequence uses seed + 1; the test set is normalized with the
    training statistics.
    """
    mask = coverage_for(sim)
    train_sequence = gen_mosaic_sequence(sim, workers, progress)
    test_sequence = gen_mosaic_sequence(replace(sim, seed=sim.seed + 1), workers, progress)

    rng = np.random.Generator(np.random.PCG64(sim.seed))
    train = normalize(build_dataset(train_sequence, mask, pipeline.train_samples, pipeline, rng, dtype, progress))
    test = normalize(build_dataset(test_sequence, mask, pipeline.test_samples, pipeline, rng, dtype, progress),
                     train.norm)
    logger.info(f"Datasets ready: {len(train)} train / {len(test)} test samples, "
                f"mean {train.norm.mean:.4f}, std {train.norm.std:.4f}")
    return DatasetBundle(train_sequence, test_sequence, mask, train, test)
