"""
Synthetic VIL mosaics

Precipitation is a sum of Gaussian storm cells that advect linearly across a
periodic grid (1 km per pixel) while growing or decaying exponentially.
Frames are 10 minutes apart and quantized to digital VIL (0-255). A radar
coverage mask marks pixels within range of a lattice of synthetic sites.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .container import ContainerReader, ContainerWriter
from .errors import ConfigError, DataError, PayloadMismatch

logger = logging.getLogger(__name__)

MOSAIC_MAGIC = b'VIL1'
MOSAIC_VERSION = 1

FRAME_DT_MINUTES = 10
RADAR_RANGE_PX = 230

Range = Tuple[float, float]


@dataclass(frozen=True)
class SimConfig:
    """Storm simulation settings; all ranges are inclusive (lo, hi)"""

    grid_hw: Tuple[int, int] = (512, 512)
    frame_count: int = 48
    frame_dt_minutes: int = FRAME_DT_MINUTES
    cell_count: int = 40
    amplitude_range: Range = (2.0, 20.0)
    radius_range_km: Range = (4.0, 14.0)
    velocity_range_km: Range = (-5.0, 5.0)
    growth_range: Range = (-0.04, 0.04)
    vmax: float = 20.0
    site_spacing_px: int = 300
    radar_range_px: int = RADAR_RANGE_PX
    start_minutes: int = 0
    seed: int = 0

    def __post_init__(self):
        if len(self.grid_hw) != 2 or min(self.grid_hw) < 1:
            raise ConfigError(f"grid_hw must be two positive extents, got {self.grid_hw}")
        if self.frame_dt_minutes != FRAME_DT_MINUTES:
            raise ConfigError(f"frame_dt_minutes is fixed at {FRAME_DT_MINUTES}")
        if self.frame_count < 0 or self.cell_count < 0:
            raise ConfigError("frame_count and cell_count must be non-negative")
        for name in ('amplitude_range', 'radius_range_km', 'velocity_range_km', 'growth_range'):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.amplitude_range[0] < 0 or self.radius_range_km[0] <= 0:
            raise ConfigError("amplitudes must be >= 0 and radii > 0")
        if self.vmax <= 0 or self.site_spacing_px < 1 or self.radar_range_px < 0:
            raise ConfigError("vmax and site_spacing_px must be positive")


@dataclass(frozen=True)
class StormCell:
    x0: float
    y0: float
    vx: float
    vy: float
    amplitude: float
    radius: float
    growth: float

    def center(self, t: int, hw: Tuple[int, int]) -> Tuple[float, float]:
        return (self.x0 + self.vx * t) % hw[1], (self.y0 + self.vy * t) % hw[0]

    def amplitude_at(self, t: int, bounds: Range) -> float:
        return float(np.clip(self.amplitude * math.exp(self.growth * t), bounds[0], bounds[1]))


@dataclass
class Mosaic:
    timestamp_minutes: int
    grid: np.ndarray


class MosaicSequence:
    """Frames stacked as uint8 [T, H, W] with their timestamps"""

    def __init__(self, grids: np.ndarray, timestamps: Sequence[int], frame_dt_minutes: int = FRAME_DT_MINUTES):
        grids = np.asarray(grids)
        if grids.ndim != 3 or grids.dtype != np.uint8:
            raise DataError(f"mosaic stack must be uint8 [T,H,W], got {grids.dtype} {grids.shape}")
        if len(timestamps) != grids.shape[0]:
            raise DataError(f"{len(timestamps)} timestamps for {grids.shape[0]} frames")
        self.grids = grids
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.frame_dt_minutes = frame_dt_minutes

    def __len__(self) -> int:
        return self.grids.shape[0]

    def __getitem__(self, index: int) -> Mosaic:
        return Mosaic(int(self.timestamps[index]), self.grids[index])

    @property
    def hw(self) -> Tuple[int, int]:
        return self.grids.shape[1], self.grids.shape[2]

    def __eq__(self, other) -> bool:
        return (isinstance(other, MosaicSequence) and self.frame_dt_minutes == other.frame_dt_minutes
                and np.array_equal(self.timestamps, other.timestamps) and np.array_equal(self.grids, other.grids))


def spawn_cells(config: SimConfig, rng: np.random.Generator) -> List[StormCell]:
    height, width = config.grid_hw
    cells = []
    for _ in range(config.cell_count):
        cells.append(StormCell(
            x0=float(rng.uniform(0, width)),
            y0=float(rng.uniform(0, height)),
            vx=float(rng.uniform(*config.velocity_range_km)),
            vy=float(rng.uniform(*config.velocity_range_km)),
            amplitude=float(rng.uniform(*config.amplitude_range)),
            radius=float(rng.uniform(*config.radius_range_km)),
            growth=float(rng.uniform(*config.growth_range)),
        ))
    return cells


def _axis(center: float, extent: int, reach: int) -> Tuple[np.ndarray, np.ndarray]:
    """Grid indices and minimum-image offsets along one periodic axis"""
    if 2 * reach + 1 >= extent:
        index = np.arange(extent)
        offset = (index - center + extent / 2) % extent - extent / 2
        return index, offset
    base = int(math.floor(center))
    absolute = np.arange(base - reach, base + reach + 2)
    return absolute % extent, absolute - center


def render_field(cells: Sequence[StormCell], t: int, config: SimConfig) -> np.ndarray:
    """Continuous (pre-quantization) field of frame t"""
    height, width = config.grid_hw
    field = np.zeros((height, width))
    for cell in cells:
        cx, cy = cell.center(t, config.grid_hw)
        reach = int(math.ceil(6 * cell.radius))
        rows, dy = _axis(cy, height, reach)
        cols, dx = _axis(cx, width, reach)
        block = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * cell.radius ** 2))
        field[np.ix_(rows, cols)] += cell.amplitude_at(t, config.amplitude_range) * block
    return field


def digital_vil_quantize(field: np.ndarray, vmax: float = 20.0) -> np.ndarray:
    """Map v >= 0 to round-half-up(255 * min(v / vmax, 1)) as uint8"""
    field = np.asarray(field, dtype=np.float64)
    if not np.all(np.isfinite(field)):
        raise DataError("field contains non-finite values")
    if np.any(field < 0):
        raise DataError(f"field has negative values (min {field.min():.4g})")
    scaled = 255.0 * np.minimum(field / vmax, 1.0)
    return np.floor(scaled + 0.5).astype(np.uint8)


def gen_mosaic_sequence(config: SimConfig, workers: int = 1, progress: bool = False) -> MosaicSequence:
    """
    Generate a quantized mosaic sequence

    Deterministic in `config.seed`; frames are rendered independently, so
    `workers > 1` only changes wall time.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    cells = spawn_cells(config, rng)
    grids = np.zeros((config.frame_count,) + tuple(config.grid_hw), dtype=np.uint8)

    def render(t: int):
        grids[t] = digital_vil_quantize(render_field(cells, t, config), config.vmax)

    if workers > 1 and config.frame_count > 1:
        _render_parallel(render, config.frame_count, workers, progress)
    else:
        for t in tqdm(range(config.frame_count), desc="Rendering frames", disable=not progress):
            render(t)

    timestamps = [config.start_minutes + t * config.frame_dt_minutes for t in range(config.frame_count)]
    logger.info(f"Generated {config.frame_count} frames of {config.grid_hw[0]}x{config.grid_hw[1]} "
                f"with {len(cells)} cells")
    return MosaicSequence(grids, timestamps, config.frame_dt_minutes)


def _render_parallel(render, frame_count: int, workers: int, progress: bool):
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(render, t): t for t in range(frame_count)}
        for future in tqdm(as_completed(futures), total=frame_count, desc="Rendering frames", disable=not progress):
            future.result()


def site_lattice(hw: Tuple[int, int], spacing: int) -> List[Tuple[int, int]]:
    """Radar sites (x, y) on a square lattice offset by half a spacing"""
    height, width = hw
    return [(x, y) for y in range(spacing // 2, height, spacing) for x in range(spacing // 2, width, spacing)]


def radar_coverage_mask(sites: Sequence[Tuple[int, int]], hw: Tuple[int, int],
                        range_px: int = RADAR_RANGE_PX) -> np.ndarray:
    """True where the nearest site is within `range_px` (planar distance)"""
    height, width = hw
    mask = np.zeros((height, width), dtype=bool)
    yy, xx = np.ogrid[:height, :width]
    for x, y in sites:
        if not (0 <= x < width and 0 <= y < height):
            raise ConfigError(f"radar site ({x}, {y}) lies outside the {height}x{width} grid")
        mask |= (yy - y) ** 2 + (xx - x) ** 2 <= range_px ** 2
    return mask


def coverage_for(config: SimConfig) -> np.ndarray:
    return radar_coverage_mask(site_lattice(config.grid_hw, config.site_spacing_px),
                               config.grid_hw, config.radar_range_px)


# =============================================================================
# VIL1 mosaic container
# =============================================================================

def mosaics_to_bytes(sequence: MosaicSequence) -> bytes:
    height, width = sequence.hw
    writer = ContainerWriter(MOSAIC_MAGIC, MOSAIC_VERSION)
    writer.u32(height).u32(width).u32(len(sequence)).u32(sequence.frame_dt_minutes)
    for t in range(len(sequence)):
        writer.i64(int(sequence.timestamps[t])).array(sequence.grids[t], 'u1')
    return writer.getvalue()


def mosaics_from_bytes(data: bytes, source: str = '<bytes>') -> MosaicSequence:
    reader = ContainerReader(data, MOSAIC_MAGIC, (MOSAIC_VERSION,), source)
    height, width, count, dt = reader.u32(), reader.u32(), reader.u32(), reader.u32()
    expected = count * (8 + height * width)
    # short payloads surface as TruncatedFile from the frame reads
    if reader.remaining > expected:
        raise PayloadMismatch(f"{source}: header declares {count} frames, payload has {reader.remaining} bytes")
    grids = np.zeros((count, height, width), dtype=np.uint8)
    timestamps = []
    for t in range(count):
        timestamps.append(reader.i64())
        grids[t] = reader.array((height, width), 'u1')
    reader.expect_end()
    return MosaicSequence(grids, timestamps, dt)


def write_mosaics(path: Union[str, Path], sequence: MosaicSequence):
    from nowcast.utils import atomic_write_bytes

    atomic_write_bytes(path, mosaics_to_bytes(sequence))
    logger.info(f"Wrote {len(sequence)} mosaics to {path}")


def read_mosaics(path: Union[str, Path]) -> MosaicSequence:
    with open(path, 'rb') as f:
        return mosaics_from_bytes(f.read(), str(path))
